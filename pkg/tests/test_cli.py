import csv
import importlib
import json
from pathlib import Path

import pytest
import yaml

from dkd_workbench.cli import build_parser, config_overrides, main

BLOBS_CONFIG = {
    "name": "blobs",
    "dataset": {"name": "synthetic-blobs", "blob_per_class": 30, "train_subset": None, "test_subset": None},
    "train": {"arch": "toy", "ensemble_size": 2, "epochs": 2, "batch_size": 16, "lr": 0.01},
    "attack": {"kind": "fgsm", "epsilon": 0.1, "samples": 12, "batch_size": 6},
    "lss": {"max_points_per_model": 20},
    "zeta_grid": [0.0, 0.9],
    "sweep_modes": ["ri", "dkd"],
}


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    Path("blobs.yaml").write_text(yaml.safe_dump(BLOBS_CONFIG))
    return tmp_path


def _run(capsys, *argv):
    status = main(list(argv))
    captured = capsys.readouterr()
    return status, captured.out, captured.err


def _command(capsys, command, *flags):
    return _run(capsys, command, "--config", "blobs.yaml", "--out", "run", *flags)


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ============================================================================
# 1. ARGUMENTS AND ERRORS
# ============================================================================


class TestArguments:
    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["bogus"])
        assert e.value.code == 2
        error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert error["error"] == "UsageError"

    def test_bad_flag_value_names_the_subcommand(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["train", "--zeta", "high"])
        assert e.value.code == 2
        error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert error["subcommand"] == "train"

    def test_flags_become_overrides(self):
        args = build_parser().parse_args(
            ["census", "--dataset", "cifar10", "--zeta", "0.5", "--members", "4", "--boost-n", "2"]
        )
        overrides = config_overrides(args)
        assert overrides["dataset.name"] == "cifar10" and overrides["train.arch"] == "cifar10"
        assert overrides["loss.zeta"] == 0.5 and overrides["train.ensemble_size"] == 4
        assert overrides["voting.boost_n"] == 2 and overrides["train.mode"] is None
        assert args.protocol == "transfer"

    def test_missing_config(self, workspace, capsys):
        status, out, err = _run(capsys, "train", "--config", "missing.yaml")
        assert status == 1 and out == ""
        error = json.loads(err.strip().splitlines()[-1])
        assert error == {"error": "ConfigError", "message": error["message"], "subcommand": "train"}

    def test_attack_before_train(self, workspace, capsys):
        status, _, err = _command(capsys, "attack")
        assert status == 1
        assert json.loads(err.strip().splitlines()[-1])["error"] == "FileNotFoundError"

    def test_report_on_empty_directory(self, workspace, capsys):
        Path("run").mkdir()
        status, out, _ = _command(capsys, "report")
        assert status == 0
        assert out.strip() == "nothing to report"


# ============================================================================
# 2. A SMALL RUN END TO END
# ============================================================================


def test_train_attack_census_report(workspace, capsys):
    status, out, _ = _command(capsys, "train")
    assert status == 0
    summary = json.loads(out)
    assert summary["mode"] == "dkd" and summary["members"] == 2
    assert (Path("run") / "dkd" / "manifest.json").is_file()
    assert (Path("run") / "dkd" / "config.json").is_file()

    assert _command(capsys, "train", "--mode", "ri")[0] == 0

    status, out, _ = _command(capsys, "lss")
    assert status == 0
    assert set(json.loads(out)["ensemble_lss"]) == {"ri", "dkd"}
    assert (Path("run") / "ri" / "lss.json").is_file()

    status, out, _ = _command(capsys, "attack", "--save-adversarials")
    assert status == 0
    rows = _rows(Path("run") / "fgsm_0.1" / "accuracy.csv")
    protocols = [r["protocol"] for r in rows]
    assert protocols.count("clean") == 2 and protocols.count("transfer") == 2
    assert protocols.count("direct") == 1
    assert protocols.count("projected") == 2 and protocols.count("aggregated") == 2
    assert all(r["samples"] == "12" for r in rows)
    assert (Path("run") / "reference" / "reference.ckpt").is_file()
    assert (Path("run") / "fgsm_0.1" / "transfer.npy").is_file()
    assert (Path("run") / "fgsm_0.1" / "dkd_aggregated.json").is_file()

    for protocol in ("transfer", "projected"):
        status, _, _ = _command(capsys, "census", "--protocol", protocol)
        assert status == 0
        census = _rows(Path("run") / "fgsm_0.1" / "census.csv")
        assert [r["mode"] for r in census] == ["ri", "dkd"]
        assert all(int(r["boosted_failed"]) <= int(r["plain_failed"]) for r in census)

    status, out, _ = _command(capsys, "report")
    assert status == 0
    assert "Failed majorities" in out and "Latent space separation" in out
    assert (Path("run") / "report.md").is_file()


def test_zeta_sweep(workspace, capsys):
    status, out, _ = _command(capsys, "zeta-sweep", "--epochs", "1")
    assert status == 0
    assert set(json.loads(out)["lss_rises_with_zeta"]) == {"ri", "dkd"}
    rows = _rows(Path("run") / "zeta_sweep.csv")
    assert [(r["mode"], r["zeta"]) for r in rows] == [
        ("ri", "0.000000"),
        ("ri", "0.900000"),
        ("dkd", "0.000000"),
        ("dkd", "0.900000"),
    ]
    assert rows[0]["ensemble_lss"] == rows[1]["ensemble_lss"]
    assert (Path("run") / "sweep" / "dkd_zeta0.9" / "manifest.json").is_file()
    assert not (Path("run") / "sweep" / "ri_zeta0.9").exists()


def test_same_seed_same_tables(workspace, capsys):
    for out in ("first", "second"):
        for command in ("train", "attack"):
            status, _, _ = _run(capsys, command, "--config", "blobs.yaml", "--out", out)
            assert status == 0
    for table in (Path("dkd") / "history_member_1.csv", Path("dkd") / "members" / "member_1.ckpt",
                  Path("fgsm_0.1") / "accuracy.csv"):
        assert (Path("first") / table).read_bytes() == (Path("second") / table).read_bytes()


@pytest.mark.parametrize("kind, directory", [("fgsm", "fgsm_0.1"), ("deepfool", "deepfool_3"), ("jsma", "jsma_3"), ("cw", "cw_3")])
def test_every_attack_kind(workspace, capsys, kind, directory):
    assert _command(capsys, "train", "--epochs", "1")[0] == 0
    status, out, _ = _command(capsys, "attack", "--attack", kind, "--iterations", "3", "--samples", "4")
    assert status == 0
    rows = _rows(Path("run") / directory / "accuracy.csv")
    assert [r["protocol"] for r in rows] == ["clean", "transfer", "direct", "projected", "aggregated"]
    assert all(r["attack"] == ("none" if r["protocol"] == "clean" else kind) for r in rows)
    assert all(0.0 <= float(r["boosted_accuracy"]) <= 1.0 for r in rows)
    assert all(r["samples"] == "4" for r in rows)
    assert len(json.loads(out)["rows"]) == 5


@pytest.mark.parametrize(
    "module",
    [
        "dkd_workbench.cli",
        "dkd_workbench.utils.checkpoints",
        "dkd_workbench.utils.datasets",
        "dkd_workbench.utils.reporting",
    ],
)
def test_module_documentation(module):
    assert importlib.import_module(module).__doc__
