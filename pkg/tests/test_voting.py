import itertools
import logging

import numpy as np
import pytest

from dkd_workbench.ensemble.voting import (
    boosted_vote,
    clamp_boost_n,
    evaluate_ensemble,
    evaluate_votes,
    failed_majority_census,
    majority_vote,
    ranked_classes,
    vote_batch,
)
from dkd_workbench.networks.architectures import build_model
from dkd_workbench.utils.datasets import make_synthetic_blobs

CLASSES = 10

# multiples of 1/64, so summed probabilities and their ties are exact
BACKGROUND = 1 / 64
TOP3_WEIGHTS = [(32 / 64, 16 / 64, 9 / 64), (28 / 64, 20 / 64, 9 / 64), (36 / 64, 12 / 64, 9 / 64)]


def _peaked(top, high=0.91):
    row = np.full(CLASSES, (1.0 - high) / (CLASSES - 1))
    row[top] = high
    return row


def _ranked(order, weights=(0.5, 0.3, 0.15)):
    """Probability row whose top classes are order, in that order"""
    row = np.full(CLASSES, (1.0 - sum(weights)) / (CLASSES - len(weights)))
    for cls, w in zip(order, weights):
        row[cls] = w
    return row


def _random_probs(members, samples, seed):
    z = np.random.default_rng(seed).normal(size=(members, samples, CLASSES)) * 3
    e = np.exp(z - z.max(axis=2, keepdims=True))
    return e / e.sum(axis=2, keepdims=True)


# ============================================================================
# 1. PLAIN MAJORITY
# ============================================================================


class TestMajorityVote:
    def test_every_three_member_vote(self):
        for tops in itertools.product(range(CLASSES), repeat=3):
            outcome = majority_vote([_peaked(t) for t in tops])
            counts = np.bincount(tops, minlength=CLASSES)
            if counts.max() >= 2:
                assert not outcome.failed_top1
                assert outcome.prediction == counts.argmax()
            else:
                assert outcome.failed_top1
                assert outcome.prediction == min(tops)
            assert not outcome.used_boost

    def test_half_is_not_a_majority(self):
        outcome = majority_vote([_peaked(1), _peaked(1), _peaked(2), _peaked(3)])
        assert outcome.failed_top1
        assert outcome.prediction == 1
        assert not majority_vote([_peaked(1), _peaked(1), _peaked(1), _peaked(3)]).failed_top1

    def test_single_member_always_decides(self):
        outcome = majority_vote([_peaked(7)])
        assert outcome.prediction == 7 and not outcome.failed_top1

    def test_plurality_tie_uses_summed_probability(self):
        probs = [_peaked(4, 0.9), _peaked(4, 0.9), _peaked(2, 0.99), _peaked(2, 0.99), _peaked(5)]
        assert majority_vote(probs).prediction == 2

    def test_invalid_input(self):
        with pytest.raises(ValueError):
            majority_vote([])
        with pytest.raises(ValueError):
            majority_vote([np.full(CLASSES, 0.2)])

    def test_member_order_does_not_matter(self):
        probs = _random_probs(5, 200, seed=3)
        expected = vote_batch(probs, 3).predictions
        for seed in range(10):
            order = np.random.default_rng(seed).permutation(5)
            np.testing.assert_array_equal(vote_batch(probs[order], 3).predictions, expected)


# ============================================================================
# 2. BOOSTED VOTING
# ============================================================================


class TestBoostedVote:
    def test_majority_is_left_alone(self):
        probs = [_ranked([3, 1, 2]), _ranked([3, 0, 2]), _ranked([6, 1, 2])]
        outcome = boosted_vote(probs, n=3)
        assert outcome.prediction == 3
        assert not outcome.failed_top1 and not outcome.used_boost

    def test_top_n_resolves_failed_majority(self):
        probs = [_ranked([0, 1, 2]), _ranked([1, 3, 4]), _ranked([5, 1, 6])]
        assert majority_vote(probs).failed_top1
        outcome = boosted_vote(probs, n=3)
        assert outcome.prediction == 1
        assert outcome.failed_top1 and outcome.used_boost and not outcome.boost_tied
        assert outcome.per_member_top_n == [[0, 1, 2], [1, 3, 4], [5, 1, 6]]

    def test_tied_boost_is_deterministic(self):
        probs = [_ranked([3, 4, 5]), _ranked([0, 1, 2]), _ranked([6, 7, 8])]
        outcomes = [boosted_vote(probs, n=3) for _ in range(5)]
        assert {o.prediction for o in outcomes} == {0}
        assert all(o.boost_tied for o in outcomes)
        assert boosted_vote(probs[::-1], n=3).prediction == 0

    def test_n_above_class_count_is_clamped(self, caplog):
        probs = [_ranked([0, 1, 2]), _ranked([1, 3, 4]), _ranked([5, 1, 6])]
        with caplog.at_level(logging.WARNING):
            outcome = boosted_vote(probs, n=25)
        assert len(outcome.per_member_top_n[0]) == CLASSES
        assert "exceeds" in caplog.text

    def test_clamp_boost_n(self):
        assert clamp_boost_n(3, 10) == 3
        assert clamp_boost_n(12, 10) == 10
        with pytest.raises(ValueError):
            clamp_boost_n(1, 10)

    def test_ranked_classes_break_ties_by_id(self):
        row = np.array([0.2, 0.3, 0.2, 0.3])
        assert ranked_classes(row, 4).tolist() == [1, 3, 0, 2]

    def test_every_three_member_top3_vote(self):
        triples = np.array(list(itertools.combinations(range(CLASSES), 3)))
        rest = np.arange(len(triples))
        second, third = (a.ravel() for a in np.meshgrid(rest, rest, indexing="ij"))
        samples = len(second)
        classes = np.arange(CLASSES)
        for first in range(len(triples)):
            # member m ranks its triple rotated by m
            sets = np.stack(
                [
                    triples[np.full(samples, first)],
                    np.roll(triples[second], -1, axis=1),
                    np.roll(triples[third], -2, axis=1),
                ]
            )
            probs = np.full((3, samples, CLASSES), BACKGROUND)
            for m in range(3):
                for position in range(3):
                    probs[m, np.arange(samples), sets[m, :, position]] = TOP3_WEIGHTS[m][position]

            top1_counts = (sets[:, :, 0, None] == classes).sum(axis=0)
            top3_counts = (sets[:, :, :, None] == classes).sum(axis=(0, 2))
            summed = probs.sum(axis=0)
            failed = top1_counts.max(axis=1) < 2
            key = np.where(top3_counts == top3_counts.max(axis=1, keepdims=True), summed, -1.0)
            boosted_winner = (key == key.max(axis=1, keepdims=True)).argmax(axis=1)
            expected = np.where(failed, boosted_winner, top1_counts.argmax(axis=1))

            votes = vote_batch(probs, 3)
            np.testing.assert_array_equal(votes.failed_top1, failed)
            np.testing.assert_array_equal(votes.used_boost, failed)
            assert not np.any(votes.used_boost & ~votes.failed_top1)
            np.testing.assert_array_equal(votes.predictions, expected)
            for order in itertools.permutations(range(3)):
                np.testing.assert_array_equal(vote_batch(probs[list(order)], 3).predictions, expected)

    def test_batch_matches_single_votes(self):
        probs = _random_probs(4, 60, seed=0)
        batch = vote_batch(probs, 3)
        for i in range(60):
            outcome = boosted_vote(probs[:, i, :], n=3)
            assert outcome.prediction == batch.predictions[i]
            assert outcome.failed_top1 == batch.failed_top1[i]
            assert outcome.boost_tied == batch.boost_tied[i]


# ============================================================================
# 3. ENSEMBLE EVALUATION
# ============================================================================


def test_boosting_never_adds_failures():
    for seed in range(10):
        probs = _random_probs(4, 100, seed)
        labels = np.random.default_rng(seed).integers(0, CLASSES, 100)
        result = evaluate_votes(probs, labels, n=3)
        assert result.boosted_failed <= result.plain_failed
        assert result.accuracy_improved == pytest.approx(result.boosted_accuracy - result.plain_accuracy)
        assert len(result.member_accuracies) == 4


def test_empty_evaluation():
    result = evaluate_votes(np.zeros((3, 0, CLASSES)), np.zeros(0, dtype=int))
    assert result.samples == 0 and result.plain_accuracy == 0.0


@pytest.fixture(scope="module")
def toy_ensemble():
    return [build_model("toy", seed) for seed in range(3)]


def test_evaluate_ensemble(toy_ensemble):
    blobs = make_synthetic_blobs(2, 64, 20, seed=0)
    result = evaluate_ensemble(toy_ensemble, blobs)
    assert result.samples == 40
    with pytest.raises(ValueError):
        evaluate_ensemble([], blobs)


def test_census_counts(toy_ensemble):
    blobs = make_synthetic_blobs(2, 64, 20, seed=0)
    stream = [(blobs.images[i : i + 8], blobs.images[i : i + 8]) for i in range(0, 40, 8)]
    row = failed_majority_census(toy_ensemble, blobs, stream, "dkd", "fgsm", "0.1")
    direct = evaluate_votes(np.stack([m.predict_proba(blobs.images) for m in toy_ensemble]), blobs.labels)
    assert row.samples == 40
    assert row.plain_failed == direct.plain_failed
    assert row.boosted_failed == direct.boosted_failed <= row.plain_failed
    assert row.accuracy_improved == pytest.approx(row.boosted_accuracy - row.plain_accuracy)


def test_census_stream_past_dataset(toy_ensemble):
    blobs = make_synthetic_blobs(2, 64, 5, seed=0)
    stream = [(blobs.images, blobs.images), (blobs.images, blobs.images)]
    with pytest.raises(ValueError):
        failed_majority_census(toy_ensemble, blobs, stream, "ri", "fgsm", "0.1")
