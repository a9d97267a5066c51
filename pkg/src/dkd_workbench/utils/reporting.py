"""CSV, JSON and Markdown outputs of a run

Every table is written with a fixed column order and fixed float formatting
so that two runs with the same config and seed produce identical bytes.
"""

import csv
import dataclasses
import logging
import os
from collections import defaultdict
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Type, TypeVar, Union

import numpy as np
from pydantic import BaseModel

from dkd_workbench.models.models import (
    AccuracyRow,
    CensusRow,
    LSSReport,
    SweepRow,
    TrainingMode,
)

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)

CENSUS_FILE = "census.csv"
ACCURACY_FILE = "accuracy.csv"
SWEEP_FILE = "zeta_sweep.csv"
LSS_FILE = "lss.json"
REPORT_FILE = "report.md"
NOTHING_TO_REPORT = "nothing to report"

# census column order, starred columns are boosted voting
CENSUS_MODES = [TrainingMode.kd.value, TrainingMode.dkd.value, TrainingMode.ri.value]


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    if isinstance(value, (list, tuple)):
        return ";".join(_cell(v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def _write_csv(path: Union[str, os.PathLike], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def write_history_csv(records: Sequence[Any], path: Union[str, os.PathLike]) -> Path:
    """Write a member's per-epoch training records

    Args:
        records (Sequence[Any]): Dataclass records, one per epoch
        path (Union[str, os.PathLike]): Output CSV

    Returns:
        Path: The written file
    """
    if not records:
        header = ["member", "epoch", "loss", "cross_entropy", "similarities"]
        return _write_csv(path, header, [])
    header = [f.name for f in dataclasses.fields(records[0])]
    return _write_csv(path, header, ([getattr(r, name) for name in header] for r in records))


def write_rows_csv(rows: Sequence[BaseModel], path: Union[str, os.PathLike]) -> Path:
    """Write pydantic rows of one type as a CSV, columns in field order"""
    if not rows:
        raise ValueError(f"no rows to write to {path}")
    header = list(type(rows[0]).model_fields)
    written = _write_csv(path, header, ([getattr(r, name) for name in header] for r in rows))
    logger.debug(f"Wrote {len(rows)} rows to {written}")
    return written


def read_rows_csv(path: Union[str, os.PathLike], model: Type[M]) -> list[M]:
    """Read a CSV written by write_rows_csv back into pydantic rows"""
    list_fields = {
        name
        for name, info in model.model_fields.items()
        if "list" in str(info.annotation)
    }
    rows = []
    with open(path, newline="") as f:
        for raw in csv.DictReader(f):
            values: dict[str, Any] = {}
            for key, text in raw.items():
                if key in list_fields:
                    values[key] = [float(v) for v in text.split(";")] if text else []
                elif text == "":
                    values[key] = None
                else:
                    values[key] = text
            rows.append(model.model_validate(values))
    return rows


def write_json(document: BaseModel, path: Union[str, os.PathLike]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(document.model_dump_json(indent=2) + "\n")
    return path


def markdown_table(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join(" --- " for _ in header) + "|",
    ]
    for row in rows:
        lines.append("| " + " | ".join(_fraction(v) for v in row) + " |")
    return "\n".join(lines)


def _fraction(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    if value is None:
        return "-"
    return str(value)


def census_table(rows: Sequence[CensusRow]) -> str:
    """Failed majorities per attack stream, one column pair per mode

    Unstarred columns count plain top-1 failures, starred columns boosted ones.
    """
    cells: dict[tuple[str, str], dict[str, int]] = defaultdict(dict)
    for row in rows:
        mode = TrainingMode(row.mode).value
        cells[(row.attack, row.param)][mode] = row.plain_failed
        cells[(row.attack, row.param)][mode + "*"] = row.boosted_failed
    header = ["Attack", "Param"]
    for mode in CENSUS_MODES:
        header += [mode.upper(), mode.upper() + "*"]
    body = []
    for (attack, param), counts in cells.items():
        line: list[Any] = [attack, param]
        for mode in CENSUS_MODES:
            line += [counts.get(mode), counts.get(mode + "*")]
        body.append(line)
    return markdown_table(header, body)


def accuracy_table(rows: Sequence[AccuracyRow]) -> str:
    """Ensemble accuracies per protocol, plain and boosted, with the reference column"""
    header = ["Protocol", "Attack", "Param", "Mode", "Samples", "Plain", "Boosted", "Ref."]
    body = [
        [
            r.protocol,
            r.attack,
            r.param,
            TrainingMode(r.mode).value.upper() if r.mode is not None else None,
            r.samples,
            r.plain_accuracy,
            r.boosted_accuracy,
            r.reference_accuracy,
        ]
        for r in rows
    ]
    return markdown_table(header, body)


def sweep_table(rows: Sequence[SweepRow]) -> str:
    header = ["Mode", "zeta", "LSS", "Plain", "Boosted", "|cos|"]
    body = [
        [
            TrainingMode(r.mode).value.upper(),
            f"{r.zeta:.1f}",
            r.ensemble_lss,
            r.plain_accuracy,
            r.boosted_accuracy,
            r.mean_pairwise_cosine,
        ]
        for r in rows
    ]
    return markdown_table(header, body)


def lss_table(reports: Sequence[tuple[str, LSSReport]]) -> str:
    header = ["Run", "Mode", "zeta", "Ensemble LSS", "Per member", "Subsampled"]
    body = []
    for name, report in reports:
        per_member = ", ".join(
            f"{m.lss:.4f}" if m.separable else "inseparable" for m in report.per_member
        )
        body.append(
            [
                name,
                TrainingMode(report.mode).value.upper() if report.mode is not None else None,
                report.zeta,
                report.ensemble_lss,
                per_member,
                "yes" if report.subsampled else "no",
            ]
        )
    return markdown_table(header, body)


def build_report(run_dir: Union[str, os.PathLike]) -> Optional[str]:
    """Merge every table found below a run directory into one Markdown report

    Args:
        run_dir (Union[str, os.PathLike]): Directory holding one or more runs

    Returns:
        Optional[str]: The report, also written to report.md, or None when there
            is nothing to report
    """
    root = Path(run_dir)
    if not root.is_dir():
        return None
    sections = []
    census = [r for p in sorted(root.rglob(CENSUS_FILE)) for r in read_rows_csv(p, CensusRow)]
    if census:
        sections.append("## Failed majorities\n\n" + census_table(census))
    accuracies = [r for p in sorted(root.rglob(ACCURACY_FILE)) for r in read_rows_csv(p, AccuracyRow)]
    if accuracies:
        sections.append("## Accuracy under attack\n\n" + accuracy_table(accuracies))
    sweep = [r for p in sorted(root.rglob(SWEEP_FILE)) for r in read_rows_csv(p, SweepRow)]
    if sweep:
        sections.append("## Separation and accuracy against zeta\n\n" + sweep_table(sweep))
    reports = [
        (str(p.parent.relative_to(root)) or ".", LSSReport.model_validate_json(p.read_text()))
        for p in sorted(root.rglob(LSS_FILE))
    ]
    if reports:
        sections.append("## Latent space separation\n\n" + lss_table(reports))
    if not sections:
        logger.info(f"{root}: {NOTHING_TO_REPORT}")
        return None
    report = "\n\n".join(sections) + "\n"
    (root / REPORT_FILE).write_text(report)
    logger.info(f"Wrote {root / REPORT_FILE}")
    return report


def lss_trend(rows: Sequence[SweepRow]) -> dict[str, bool]:
    """Per mode, whether separation grows with zeta over the sweep grid

    The grid is split at its median zeta. The trend holds when the mean LSS
    above the median is at least the mean LSS below it.
    """
    trend = {}
    by_mode: dict[str, list[SweepRow]] = defaultdict(list)
    for row in rows:
        by_mode[TrainingMode(row.mode).value].append(row)
    for mode, mode_rows in by_mode.items():
        median = float(np.median([r.zeta for r in mode_rows]))
        low = [r.ensemble_lss for r in mode_rows if r.zeta < median]
        high = [r.ensemble_lss for r in mode_rows if r.zeta > median]
        trend[mode] = bool(not low or not high or np.mean(high) >= np.mean(low))
    return trend
