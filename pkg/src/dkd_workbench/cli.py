"""Command line entry point

    dkd-workbench train --mode dkd --zeta 0.9 --members 3 --out runs/mnist
    dkd-workbench attack --attack fgsm --epsilon 0.1 --out runs/mnist
    dkd-workbench lss --out runs/mnist
    dkd-workbench zeta-sweep --out runs/mnist
    dkd-workbench census --attack deepfool --iterations 50 --out runs/mnist
    dkd-workbench report --out runs/mnist

All subcommands share one run directory, --out or <output_dir>/<name> of the
config. Each training mode keeps its ensemble in a subdirectory of the same
name, every attack writes its tables to <attack>_<param>/.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from dkd_workbench.attacks.protocols import (
    AdversarialSet,
    aggregated_adversarials,
    blackbox_transfer,
    clean_row,
    projected_adversarials,
    transfer_adversarials,
    whitebox_aggregated,
    whitebox_direct,
    whitebox_projected,
)
from dkd_workbench.ensemble.voting import evaluate_ensemble, failed_majority_census
from dkd_workbench.metrics.lss import ensemble_lss
from dkd_workbench.models.models import (
    AttackConfig,
    AttackKind,
    Architecture,
    DatasetName,
    ExperimentConfig,
    SweepRow,
    TrainingMode,
)
from dkd_workbench.networks.architectures import ARCHITECTURES, ModelGraph
from dkd_workbench.training.trainer import (
    MANIFEST_NAME,
    build_ensemble,
    load_ensemble,
    mean_pairwise_cosine,
    train_reference,
)
from dkd_workbench.utils.checkpoints import load_checkpoint, save_checkpoint
from dkd_workbench.utils.config import load_experiment_config, save_experiment_config
from dkd_workbench.utils.datasets import DatasetHandle, load_dataset
from dkd_workbench.utils.image_utils import save_adversarial_batch
from dkd_workbench.utils.reporting import (
    ACCURACY_FILE,
    CENSUS_FILE,
    LSS_FILE,
    NOTHING_TO_REPORT,
    SWEEP_FILE,
    build_report,
    lss_trend,
    write_json,
    write_rows_csv,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
CONFIG_NAME = "config.json"
REFERENCE_CHECKPOINT = Path("reference") / "reference.ckpt"
SWEEP_DIR = "sweep"
CENSUS_PROTOCOLS = ("transfer", "projected", "aggregated")

DATASET_ARCH = {
    DatasetName.mnist.value: Architecture.mnist.value,
    DatasetName.cifar10.value: Architecture.cifar10.value,
    DatasetName.synthetic_blobs.value: Architecture.toy.value,
}


def _emit_error(error: str, message: str, subcommand: Optional[str]) -> None:
    sys.stderr.write(json.dumps({"error": error, "message": message, "subcommand": subcommand}) + "\n")


class _Parser(argparse.ArgumentParser):
    """Reports usage errors as JSON on stderr, exit status 2"""

    def error(self, message: str):  # type: ignore[override]
        words = self.prog.split()
        _emit_error("UsageError", message, words[-1] if len(words) > 1 else None)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML, JSON or YAML experiment config")
    common.add_argument("--out", type=Path, help="Run directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--dataset", choices=[d.value for d in DatasetName])
    common.add_argument("--mode", choices=[m.value for m in TrainingMode])
    common.add_argument("--zeta", type=float)
    common.add_argument("--members", type=int, help="Ensemble size")
    common.add_argument("--epochs", type=int)
    common.add_argument("--attack", choices=[a.value for a in AttackKind])
    common.add_argument("--epsilon", type=float)
    common.add_argument("--iterations", type=int)
    common.add_argument("--samples", type=int, help="Attack only the first test samples")
    common.add_argument("--boost-n", type=int, dest="boost_n")
    common.add_argument("--workers", type=int)
    common.add_argument("--verbose", "-v", action="store_true")

    parser = _Parser(prog="dkd-workbench", description="Diverse knowledge distillation workbench")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("train", parents=[common], help="Build an ensemble")
    attack = commands.add_parser("attack", parents=[common], help="Black-box and white-box attack tables")
    attack.add_argument("--save-adversarials", action="store_true", dest="save_adversarials")
    commands.add_parser("lss", parents=[common], help="Latent space separation of the trained ensembles")
    commands.add_parser("zeta-sweep", parents=[common], help="Separation and accuracy over the zeta grid")
    census = commands.add_parser("census", parents=[common], help="Failed majorities under an attack")
    census.add_argument("--protocol", choices=CENSUS_PROTOCOLS, default="transfer")
    commands.add_parser("report", parents=[common], help="Merge the tables of a run directory")
    return parser


def config_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Dotted config keys set by the command line flags"""
    overrides = {
        "train.seed": args.seed,
        "train.mode": args.mode,
        "loss.zeta": args.zeta,
        "train.ensemble_size": args.members,
        "train.epochs": args.epochs,
        "attack.kind": args.attack,
        "attack.epsilon": args.epsilon,
        "attack.iterations": args.iterations,
        "attack.samples": args.samples,
        "voting.boost_n": args.boost_n,
        "workers": args.workers,
    }
    if args.dataset is not None:
        overrides["dataset.name"] = args.dataset
        overrides["train.arch"] = DATASET_ARCH[args.dataset]
    if getattr(args, "save_adversarials", False):
        overrides["attack.save_adversarials"] = True
    return overrides


def _ensemble_dir(run_dir: Path, mode: str) -> Path:
    return run_dir / TrainingMode(mode).value


def _attack_dir(run_dir: Path, cfg: AttackConfig) -> Path:
    return run_dir / f"{AttackKind(cfg.kind).value}_{cfg.param_label}"


def _trained_modes(cfg: ExperimentConfig, run_dir: Path, args: argparse.Namespace) -> list[str]:
    """The requested mode, or every sweep mode with an ensemble in the run directory"""
    modes = [args.mode] if args.mode else [TrainingMode(m).value for m in cfg.sweep_modes]
    found = [m for m in modes if (_ensemble_dir(run_dir, m) / MANIFEST_NAME).is_file()]
    if not found:
        raise FileNotFoundError(f"no trained ensemble for {', '.join(modes)} in {run_dir}, run train first")
    return found


def _trained_ensembles(cfg: ExperimentConfig, run_dir: Path, args: argparse.Namespace) -> dict[str, list[ModelGraph]]:
    return {mode: load_ensemble(_ensemble_dir(run_dir, mode)).members for mode in _trained_modes(cfg, run_dir, args)}


def _reference_model(cfg: ExperimentConfig, run_dir: Path) -> ModelGraph:
    """Load the black-box reference model of the run, training it on first use"""
    path = run_dir / REFERENCE_CHECKPOINT
    if path.is_file():
        model, _ = load_checkpoint(path)
        return model
    arch = Architecture(cfg.reference_arch).value
    train_arch = Architecture(cfg.train.arch).value
    if ARCHITECTURES[arch][1] != ARCHITECTURES[train_arch][1]:
        logger.warning(f"reference architecture {arch} does not fit {cfg.dataset.name} inputs, using {train_arch}")
        arch = train_arch
    logger.info(f"Training the {arch} reference model")
    reference = train_reference(cfg.train, load_dataset(cfg.dataset, "train"), arch, cfg.reference_seed_offset)
    save_checkpoint(reference.model, path, TrainingMode.ri, 0.0, 0, reference.seed)
    return reference.model


def _save(stem: Path, adversarials: AdversarialSet, cfg: AttackConfig) -> None:
    if cfg.save_adversarials:
        clean = adversarials.clean if cfg.save_previews else None
        save_adversarial_batch(stem, adversarials.adversarial, adversarials.metadata(cfg), clean)


def run_train(cfg: ExperimentConfig, run_dir: Path, args: argparse.Namespace) -> dict[str, Any]:
    mode = TrainingMode(cfg.train.mode).value
    directory = _ensemble_dir(run_dir, mode)
    save_experiment_config(cfg, directory / CONFIG_NAME)
    train_set = load_dataset(cfg.dataset, "train")
    test_set = load_dataset(cfg.dataset, "test")
    ensemble = build_ensemble(cfg.train, train_set, directory, cfg.name, cfg.workers)
    evaluation = evaluate_ensemble(ensemble.members, test_set, cfg.voting.boost_n)
    cosine = mean_pairwise_cosine(ensemble.members, test_set.images[: cfg.lss.max_points_per_model])
    logger.info(
        f"{mode} ensemble: plain {evaluation.plain_accuracy:.4f}, boosted {evaluation.boosted_accuracy:.4f}, "
        f"mean |cos| {cosine:.4f}"
    )
    return {
        "run_dir": str(directory),
        "mode": mode,
        "members": len(ensemble),
        "plain_accuracy": evaluation.plain_accuracy,
        "boosted_accuracy": evaluation.boosted_accuracy,
        "member_accuracies": evaluation.member_accuracies,
        "mean_pairwise_cosine": cosine,
    }


def run_attack(cfg: ExperimentConfig, run_dir: Path, args: argparse.Namespace) -> dict[str, Any]:
    attack, n, workers = cfg.attack, cfg.voting.boost_n, cfg.workers
    test_set = load_dataset(cfg.dataset, "test")
    ensembles = _trained_ensembles(cfg, run_dir, args)
    reference = _reference_model(cfg, run_dir)
    directory = _attack_dir(run_dir, attack)

    rows = [clean_row(members, test_set, attack, n, mode, reference) for mode, members in ensembles.items()]
    transfer = transfer_adversarials(reference, attack, test_set, workers)
    _save(directory / "transfer", transfer, attack)
    rows += blackbox_transfer(reference, ensembles, attack, test_set, n, workers, transfer)
    # the main model is member 0 of every mode
    main_model = next(iter(ensembles.values()))[0]
    rows.append(whitebox_direct(main_model, attack, test_set, workers))
    for mode, members in ensembles.items():
        projected = projected_adversarials(members, attack, test_set, workers)
        _save(directory / f"{mode}_projected", projected, attack)
        rows.append(whitebox_projected(members, attack, test_set, n, workers, mode, projected))
        aggregated = aggregated_adversarials(members, attack, test_set, workers)
        _save(directory / f"{mode}_aggregated", aggregated, attack)
        rows.append(whitebox_aggregated(members, attack, test_set, n, workers, mode, aggregated))
    path = write_rows_csv(rows, directory / ACCURACY_FILE)
    return {"table": str(path), "rows": [r.model_dump(mode="json") for r in rows]}


def _census_stream(
    protocol: str,
    members: list[ModelGraph],
    attack: AttackConfig,
    test_set: DatasetHandle,
    workers: int,
    transfer: Optional[AdversarialSet],
) -> AdversarialSet:
    if protocol == "transfer" and transfer is not None:
        return transfer
    if protocol == "projected":
        return projected_adversarials(members, attack, test_set, workers)
    return aggregated_adversarials(members, attack, test_set, workers)


def run_census(cfg: ExperimentConfig, run_dir: Path, args: argparse.Namespace) -> dict[str, Any]:
    attack = cfg.attack
    test_set = load_dataset(cfg.dataset, "test")
    ensembles = _trained_ensembles(cfg, run_dir, args)
    transfer = None
    if args.protocol == "transfer":
        transfer = transfer_adversarials(_reference_model(cfg, run_dir), attack, test_set, cfg.workers)
    rows = []
    for mode, members in ensembles.items():
        stream = _census_stream(args.protocol, members, attack, test_set, cfg.workers, transfer)
        rows.append(
            failed_majority_census(
                members,
                test_set.head(len(stream.labels)),
                stream.batches(attack.batch_size),
                mode,
                AttackKind(attack.kind).value,
                attack.param_label,
                cfg.voting.boost_n,
            )
        )
    path = write_rows_csv(rows, _attack_dir(run_dir, attack) / CENSUS_FILE)
    return {"table": str(path), "rows": [r.model_dump(mode="json") for r in rows]}


def run_lss(cfg: ExperimentConfig, run_dir: Path, args: argparse.Namespace) -> dict[str, Any]:
    test_set = load_dataset(cfg.dataset, "test")
    summary = {}
    for mode in _trained_modes(cfg, run_dir, args):
        directory = _ensemble_dir(run_dir, mode)
        ensemble = load_ensemble(directory)
        report = ensemble_lss(ensemble.members, test_set.images, cfg.lss, cfg.workers, ensemble.zeta, mode)
        write_json(report, directory / LSS_FILE)
        summary[mode] = report.ensemble_lss
    return {"ensemble_lss": summary}


def run_zeta_sweep(cfg: ExperimentConfig, run_dir: Path, args: argparse.Namespace) -> dict[str, Any]:
    train_set = load_dataset(cfg.dataset, "train")
    test_set = load_dataset(cfg.dataset, "test")
    modes = [args.mode] if args.mode else [TrainingMode(m).value for m in cfg.sweep_modes]
    rows: list[SweepRow] = []
    for mode in modes:
        independent: Optional[SweepRow] = None
        for zeta in cfg.zeta_grid:
            # zeta does not enter RI training, one ensemble serves the whole grid
            if mode == TrainingMode.ri.value and independent is not None:
                rows.append(independent.model_copy(update={"zeta": zeta}))
                continue
            train_cfg = cfg.train.model_copy(update={"mode": mode, "zeta": zeta})
            directory = run_dir / SWEEP_DIR / f"{mode}_zeta{zeta:g}"
            members = build_ensemble(train_cfg, train_set, directory, cfg.name, cfg.workers).members
            report = ensemble_lss(members, test_set.images, cfg.lss, cfg.workers, zeta, mode)
            evaluation = evaluate_ensemble(members, test_set, cfg.voting.boost_n)
            row = SweepRow(
                mode=mode,
                zeta=zeta,
                ensemble_lss=report.ensemble_lss,
                plain_accuracy=evaluation.plain_accuracy,
                boosted_accuracy=evaluation.boosted_accuracy,
                mean_pairwise_cosine=mean_pairwise_cosine(members, test_set.images[: cfg.lss.max_points_per_model]),
            )
            logger.info(f"{mode} zeta {zeta:g}: LSS {row.ensemble_lss:.6f}, boosted {row.boosted_accuracy:.4f}")
            rows.append(row)
            if mode == TrainingMode.ri.value:
                independent = row
    path = write_rows_csv(rows, run_dir / SWEEP_FILE)
    trend = lss_trend(rows)
    for mode, rising in trend.items():
        if not rising:
            logger.warning(f"{mode}: separation does not grow with zeta over the grid")
    return {"table": str(path), "lss_rises_with_zeta": trend}


def run_report(cfg: ExperimentConfig, run_dir: Path, args: argparse.Namespace) -> None:
    report = build_report(run_dir)
    print(report if report is not None else NOTHING_TO_REPORT)


COMMANDS: dict[str, Callable[[ExperimentConfig, Path, argparse.Namespace], Optional[dict[str, Any]]]] = {
    "train": run_train,
    "attack": run_attack,
    "lss": run_lss,
    "zeta-sweep": run_zeta_sweep,
    "census": run_census,
    "report": run_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format=LOG_FORMAT,
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    try:
        cfg = load_experiment_config(args.config, config_overrides(args))
        run_dir = args.out if args.out is not None else Path(cfg.output_dir) / cfg.name
        summary = COMMANDS[args.command](cfg, Path(run_dir), args)
    except Exception as e:
        logger.debug(f"{args.command} failed", exc_info=True)
        _emit_error(type(e).__name__, str(e), args.command)
        return 1
    if summary is not None:
        print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
