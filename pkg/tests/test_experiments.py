"""Desk-scale MNIST experiments

Slow: every test trains full ensembles on a 10k/2k MNIST subset. Set
DKD_DATA_DIR to a directory holding the MNIST IDX files to run them with
``pytest -m slow``.
"""

import os

import numpy as np
import pytest

from dkd_workbench.attacks.protocols import (
    aggregated_adversarials,
    blackbox_transfer,
    transfer_adversarials,
    whitebox_aggregated,
    whitebox_direct,
)
from dkd_workbench.ensemble.voting import evaluate_ensemble, failed_majority_census
from dkd_workbench.metrics.lss import ensemble_lss
from dkd_workbench.models.models import AttackConfig, DatasetConfig, LSSConfig, TrainConfig
from dkd_workbench.training.trainer import build_ensemble, train_reference
from dkd_workbench.utils.datasets import DATA_DIR_ENV, load_dataset

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(not os.environ.get(DATA_DIR_ENV), reason=f"{DATA_DIR_ENV} not set"),
]

SEEDS = range(5)
MODES = ("ri", "kd", "dkd")
FGSM = AttackConfig(kind="fgsm", epsilon=0.1)
ZETA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


@pytest.fixture(scope="module")
def mnist():
    cfg = DatasetConfig(name="mnist", train_subset=10000, test_subset=2000)
    return load_dataset(cfg, "train"), load_dataset(cfg, "test")


@pytest.fixture(scope="module")
def ensembles(mnist):
    """Ensembles by (mode, seed), trained on first use"""
    train, _ = mnist
    cache = {}

    def get(mode, seed, zeta=0.9):
        key = (mode, seed, zeta)
        if key not in cache:
            cfg = TrainConfig(mode=mode, arch="mnist", ensemble_size=3, epochs=15, zeta=zeta, seed=seed * 100)
            cache[key] = build_ensemble(cfg, train).members
        return cache[key]

    return get


@pytest.fixture(scope="module")
def reference(mnist):
    train, _ = mnist
    return train_reference(TrainConfig(arch="mnist", epochs=15), train).model


def test_clean_boosted_accuracy(mnist, ensembles):
    _, test = mnist
    assert evaluate_ensemble(ensembles("dkd", 0), test).boosted_accuracy >= 0.93


def test_dkd_separates_latents_more_than_ri_and_kd(mnist, ensembles):
    _, test = mnist
    median = {
        mode: np.median([ensemble_lss(ensembles(mode, s), test.images, LSSConfig()).ensemble_lss for s in SEEDS])
        for mode in MODES
    }
    assert median["dkd"] > median["ri"] >= median["kd"]


def test_separation_grows_with_zeta(mnist, ensembles):
    _, test = mnist
    lss, accuracy = {}, []
    for zeta in ZETA_GRID:
        members = ensembles("dkd", 0, zeta)
        lss[zeta] = ensemble_lss(members, test.images, LSSConfig()).ensemble_lss
        accuracy.append(evaluate_ensemble(members, test).boosted_accuracy)
    assert lss[0.9] > lss[0.1]
    assert max(accuracy) - min(accuracy) <= 0.05


def test_transfer_ordering(mnist, ensembles, reference):
    _, test = mnist
    adversarials = transfer_adversarials(reference, FGSM, test)
    boosted = {mode: [] for mode in MODES}
    for seed in SEEDS:
        rows = blackbox_transfer(
            reference, {m: ensembles(m, seed) for m in MODES}, FGSM, test, adversarials=adversarials
        )
        for row in rows:
            assert row.boosted_accuracy >= row.plain_accuracy - 0.005
            boosted[row.mode].append(row.boosted_accuracy)
    median = {mode: np.median(values) for mode, values in boosted.items()}
    assert median["dkd"] >= median["kd"] and median["dkd"] >= median["ri"]


def test_boosting_removes_most_failed_majorities(mnist, ensembles, reference):
    _, test = mnist
    adversarials = transfer_adversarials(reference, FGSM, test)
    row = failed_majority_census(ensembles("dkd", 0), test, adversarials.batches(100), "dkd", "fgsm", "0.1")
    assert row.boosted_failed <= row.plain_failed
    if row.plain_failed:
        assert row.boosted_failed <= 0.2 * row.plain_failed


def test_aggregated_attack_against_undefended_model(mnist, ensembles):
    _, test = mnist
    members = ensembles("dkd", 0)
    undefended = whitebox_direct(members[0], FGSM, test)
    aggregated = whitebox_aggregated(
        members, FGSM, test, adversarials=aggregated_adversarials(members, FGSM, test)
    )
    assert aggregated.boosted_accuracy - undefended.plain_accuracy >= 0.2
