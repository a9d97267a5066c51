"""Plain and boosted majority voting over ensemble members

Plain voting takes each member's top-1 class and accepts a class picked by
more than half of the members. When no such class exists the sample is a
failed majority; plain voting then falls back to the plurality class.
Boosted voting instead lets every member vote once for each of its top-n
classes.

Ties are broken by the summed member probability of the class, then by the
lowest class id. Probabilities are summed after sorting over members so the
result does not depend on member order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from dkd_workbench.models.models import CensusRow, TrainingMode
from dkd_workbench.networks.architectures import ModelGraph
from dkd_workbench.utils.datasets import DatasetHandle

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-4


@dataclass
class VoteOutcome:
    """The ensemble decision on one sample

    Attributes:
        prediction (int): The chosen class
        failed_top1 (bool): No class had a strict top-1 majority
        used_boost (bool): The top-n fallback decided the prediction
        boost_tied (bool): The top-n vote count had a tie, settled by probability
        per_member_top_n (list[list[int]]): Ranked classes of every member
        per_member_probs (np.ndarray): Member probability rows (M, K)
    """

    prediction: int
    failed_top1: bool
    used_boost: bool = False
    boost_tied: bool = False
    per_member_top_n: list[list[int]] = field(default_factory=list)
    per_member_probs: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


@dataclass
class BatchVotes:
    predictions: np.ndarray
    failed_top1: np.ndarray
    used_boost: np.ndarray
    boost_tied: np.ndarray


@dataclass
class EnsembleEvaluation:
    """Accuracies of one ensemble on one set of inputs"""

    samples: int
    plain_accuracy: float
    boosted_accuracy: float
    member_accuracies: list[float]
    plain_failed: int
    boosted_failed: int
    plain_predictions: np.ndarray
    boosted_predictions: np.ndarray

    @property
    def accuracy_improved(self) -> float:
        return self.boosted_accuracy - self.plain_accuracy


def _check_member_probs(member_probs: np.ndarray) -> np.ndarray:
    member_probs = np.asarray(member_probs, dtype=np.float64)
    if member_probs.ndim == 2:
        member_probs = member_probs[:, None, :]
    if member_probs.ndim != 3 or member_probs.shape[0] == 0:
        raise ValueError(f"expected member probabilities (M, N, K) with M >= 1, got shape {member_probs.shape}")
    sums = member_probs.sum(axis=2)
    if np.any(np.abs(sums - 1.0) > PROBABILITY_TOLERANCE):
        raise ValueError("every member probability vector must sum to 1")
    return member_probs


def clamp_boost_n(n: int, classes: int) -> int:
    if n < 2:
        raise ValueError(f"boosted voting needs n >= 2, got {n}")
    if n > classes:
        logger.warning(f"boost n={n} exceeds the {classes} classes, using {classes}")
        return classes
    return n


def _select(counts: np.ndarray, summed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise class with the most votes, then highest summed probability, then lowest id"""
    best = counts.max(axis=1, keepdims=True)
    candidates = counts == best
    tied = candidates.sum(axis=1) > 1
    keyed = np.where(candidates, summed, -np.inf)
    return keyed.argmax(axis=1), tied


def ranked_classes(member_probs: np.ndarray, n: int) -> np.ndarray:
    """Top-n classes of every member row, ties ordered by class id"""
    return np.argsort(-member_probs, axis=-1, kind="stable")[..., :n]


def vote_batch(member_probs: np.ndarray, n: int = 3, boosted: bool = True) -> BatchVotes:
    """Vote on a batch of samples at once

    Args:
        member_probs (np.ndarray): Probabilities (M, N, K), M members and N samples
        n (int): Top-n candidates per member for the boosted fallback
        boosted (bool): Resolve failed majorities with top-n votes

    Returns:
        BatchVotes: Predictions and failure flags per sample
    """
    member_probs = _check_member_probs(member_probs)
    members, samples, classes = member_probs.shape
    summed = np.sort(member_probs, axis=0).sum(axis=0)
    eye = np.eye(classes, dtype=np.int64)
    top1 = member_probs.argmax(axis=2)
    counts = eye[top1].sum(axis=0)
    failed = 2 * counts.max(axis=1) <= members
    predictions, _ = _select(counts, summed)
    used_boost = np.zeros(samples, dtype=bool)
    boost_tied = np.zeros(samples, dtype=bool)
    if boosted and failed.any():
        n = clamp_boost_n(n, classes)
        ranked = ranked_classes(member_probs, n)
        votes = eye[ranked].sum(axis=(0, 2))
        boosted_predictions, tied = _select(votes, summed)
        predictions = np.where(failed, boosted_predictions, predictions)
        used_boost = failed.copy()
        boost_tied = failed & tied
    return BatchVotes(predictions, failed, used_boost, boost_tied)


def _outcome(member_probs: np.ndarray, n: int, boosted: bool) -> VoteOutcome:
    member_probs = _check_member_probs(member_probs)
    if member_probs.shape[1] != 1:
        raise ValueError("majority_vote decides one sample, use vote_batch for batches")
    votes = vote_batch(member_probs, n, boosted)
    rows = member_probs[:, 0, :]
    ranks = ranked_classes(rows, clamp_boost_n(n, rows.shape[1]) if boosted else 1)
    return VoteOutcome(
        prediction=int(votes.predictions[0]),
        failed_top1=bool(votes.failed_top1[0]),
        used_boost=bool(votes.used_boost[0]),
        boost_tied=bool(votes.boost_tied[0]),
        per_member_top_n=[list(map(int, r)) for r in ranks],
        per_member_probs=rows,
    )


def majority_vote(probs: Sequence[np.ndarray] | np.ndarray) -> VoteOutcome:
    """Strict top-1 majority over the members' probability vectors

    Args:
        probs (Sequence[np.ndarray] | np.ndarray): One probability vector per member

    Returns:
        VoteOutcome: failed_top1 is set when no class has more than half the votes

    Raises:
        ValueError: If there are no members or a vector does not sum to 1
    """
    if len(probs) == 0:
        raise ValueError("majority_vote needs at least one member")
    return _outcome(np.asarray(probs), 1, boosted=False)


def boosted_vote(probs: Sequence[np.ndarray] | np.ndarray, n: int = 3) -> VoteOutcome:
    """Majority vote with a top-n fallback when the top-1 majority fails

    n larger than the class count is clamped to the class count.
    """
    if len(probs) == 0:
        raise ValueError("boosted_vote needs at least one member")
    return _outcome(np.asarray(probs), n, boosted=True)


def member_probabilities(
    members: Sequence[ModelGraph], images: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Softmax outputs of every member, stacked as (M, N, K)"""
    return np.stack([m.predict_proba(images, batch_size) for m in members])


def evaluate_votes(member_probs: np.ndarray, labels: np.ndarray, n: int = 3) -> EnsembleEvaluation:
    """Plain and boosted accuracies from precomputed member probabilities"""
    member_probs = _check_member_probs(member_probs)
    labels = np.asarray(labels)
    plain = vote_batch(member_probs, n, boosted=False)
    boosted = vote_batch(member_probs, n, boosted=True)
    samples = len(labels)
    if samples == 0:
        return EnsembleEvaluation(0, 0.0, 0.0, [0.0] * len(member_probs), 0, 0, plain.predictions, boosted.predictions)
    return EnsembleEvaluation(
        samples=samples,
        plain_accuracy=float(np.mean(plain.predictions == labels)),
        boosted_accuracy=float(np.mean(boosted.predictions == labels)),
        member_accuracies=[float(np.mean(p.argmax(axis=1) == labels)) for p in member_probs],
        plain_failed=int(plain.failed_top1.sum()),
        boosted_failed=int(boosted.boost_tied.sum()),
        plain_predictions=plain.predictions,
        boosted_predictions=boosted.predictions,
    )


def evaluate_ensemble(
    members: Sequence[ModelGraph],
    dataset: DatasetHandle,
    n: int = 3,
    batch_size: int = 256,
) -> EnsembleEvaluation:
    """Clean accuracy of each member and of the plain and boosted ensemble votes"""
    if not members:
        raise ValueError("evaluate_ensemble needs at least one member")
    return evaluate_votes(member_probabilities(members, dataset.images, batch_size), dataset.labels, n)


def failed_majority_census(
    members: Sequence[ModelGraph],
    dataset: DatasetHandle,
    stream: Iterable[tuple[np.ndarray, np.ndarray]],
    mode: TrainingMode | str,
    attack: str,
    param: str,
    n: int = 3,
) -> CensusRow:
    """Count failed majorities over a stream of (clean, adversarial) batches

    Batches follow the dataset order. The plain count is the number of
    samples without a strict top-1 majority; the boosted count is the number
    of those whose top-n vote was itself tied.

    Args:
        members (Sequence[ModelGraph]): The ensemble
        dataset (DatasetHandle): Source of the labels, in stream order
        stream (Iterable[tuple[np.ndarray, np.ndarray]]): Clean and adversarial batches
        mode (TrainingMode | str): How the ensemble was trained
        attack (str): Attack name for the table
        param (str): Attack parameter for the table
        n (int): Top-n of boosted voting

    Returns:
        CensusRow: Counts with plain and boosted accuracy and their difference
    """
    offset = 0
    plain_failed = boosted_failed = 0
    plain_correct = boosted_correct = 0
    for _clean, adversarial in stream:
        labels = dataset.labels[offset : offset + len(adversarial)]
        if len(labels) != len(adversarial):
            raise ValueError(f"attack stream runs past the {len(dataset)} samples of the dataset")
        offset += len(adversarial)
        result = evaluate_votes(member_probabilities(members, adversarial), labels, n)
        plain_failed += result.plain_failed
        boosted_failed += result.boosted_failed
        plain_correct += int(np.sum(result.plain_predictions == labels))
        boosted_correct += int(np.sum(result.boosted_predictions == labels))
    plain_accuracy = plain_correct / offset if offset else 0.0
    boosted_accuracy = boosted_correct / offset if offset else 0.0
    logger.info(
        f"{attack} {param} ({TrainingMode(mode).value}): {plain_failed} failed majorities, "
        f"{boosted_failed} after boosting, accuracy change {boosted_accuracy - plain_accuracy:+.4f}"
    )
    return CensusRow(
        mode=mode,
        attack=attack,
        param=param,
        samples=offset,
        plain_failed=plain_failed,
        boosted_failed=boosted_failed,
        plain_accuracy=plain_accuracy,
        boosted_accuracy=boosted_accuracy,
        accuracy_improved=boosted_accuracy - plain_accuracy,
    )
