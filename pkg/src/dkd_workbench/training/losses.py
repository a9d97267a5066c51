"""Training objectives: cross-entropy, latent cosine similarity, DKD and KD"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dkd_workbench.core import tensor as T
from dkd_workbench.core.tensor import Tensor
from dkd_workbench.models.models import DiversityLossConfig

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-6


@dataclass
class DegenerateLatentCounter:
    """Counts samples whose latent had zero norm and was left out of a similarity"""

    count: int = 0

    def add(self, n: int) -> None:
        self.count += n


@dataclass
class DKDLossTerms:
    """A DKD loss together with its parts, as logged by the trainer"""

    total: Tensor
    cross_entropy: float
    similarities: list[float] = field(default_factory=list)
    zeta: float = 0.0

    @property
    def recomposed(self) -> float:
        """(1 - zeta) * CE + (zeta / i) * sum of similarities"""
        i = len(self.similarities)
        return (1.0 - self.zeta) * self.cross_entropy + (self.zeta / i) * sum(self.similarities)


def _labels(labels: np.ndarray | Sequence[int], rows: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (rows,):
        raise ValueError(f"{labels.shape[0]} labels for a batch of {rows}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes}), got {labels.min()}..{labels.max()}")
    return labels


def cross_entropy(probs: Tensor, labels: np.ndarray | Sequence[int]) -> Tensor:
    """Mean negative log-probability of the true class

    A zero probability is clamped to ``LOG_FLOOR`` rather than raising.

    Args:
        probs (Tensor): Probability rows (N, K), each summing to 1
        labels (np.ndarray | Sequence[int]): True classes (N,)

    Returns:
        Tensor: Scalar loss, nonnegative
    """
    probs = T.as_tensor(probs)
    if probs.ndim != 2:
        raise ValueError(f"cross_entropy needs probability rows, got shape {probs.shape}")
    sums = probs.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > ROW_SUM_TOLERANCE):
        raise ValueError(f"probability rows must sum to 1, worst row sums to {sums[np.argmax(np.abs(sums - 1))]}")
    labels = _labels(labels, probs.shape[0], probs.shape[1])
    return T.scale(T.reduce_mean(T.log(T.pick(probs, labels))), -1.0)


def cosine_similarity_loss(
    latent_a: Tensor | np.ndarray,
    latent_b: Tensor | np.ndarray,
    counter: DegenerateLatentCounter | None = None,
) -> Tensor:
    """Mean over the batch of the cosine between paired latent rows

    Rows where either latent has zero norm contribute 0 and are counted.

    Args:
        latent_a (Tensor | np.ndarray): Latents (N, D)
        latent_b (Tensor | np.ndarray): Latents (N, D)
        counter (DegenerateLatentCounter | None): Collects zero-norm rows

    Returns:
        Tensor: Scalar in [-1, 1]
    """
    a, b = T.as_tensor(latent_a), T.as_tensor(latent_b)
    if a.shape != b.shape:
        raise ValueError(f"latent shapes {a.shape} and {b.shape} differ")
    if a.ndim != 2:
        raise ValueError(f"latents must be row vectors, got shape {a.shape}")
    norm_a, norm_b = T.l2_norm(a), T.l2_norm(b)
    live = (norm_a.data > 0) & (norm_b.data > 0)
    dead = int((~live).sum())
    if dead:
        logger.warning(f"{dead} zero-norm latent rows left out of the cosine similarity")
        if counter is not None:
            counter.add(dead)
    mask = live.astype(a.dtype)
    # dead rows get denominator 1 and a masked numerator
    denom = T.add(T.mul(norm_a, norm_b), Tensor(1.0 - mask))
    cosines = T.mul(T.div(T.inner(a, b), denom), Tensor(mask))
    return T.reduce_mean(cosines)


def dkd_loss_terms(
    probs: Tensor,
    labels: np.ndarray | Sequence[int],
    own_latent: Tensor,
    frozen_latents: Sequence[np.ndarray | Tensor],
    cfg: DiversityLossConfig,
    counter: DegenerateLatentCounter | None = None,
) -> DKDLossTerms:
    """Cross-entropy blended with the similarity to every frozen predecessor

    loss = (1 - zeta) * CE + (zeta / i) * sum_k cos(own, frozen_k), with i the
    number of frozen models. The frozen latents are detached, so the gradient
    only reaches ``probs`` and ``own_latent``.

    Raises:
        ValueError: If there are no frozen latents
    """
    if not frozen_latents:
        raise ValueError("dkd_loss needs at least one frozen latent, train the main model with cross_entropy")
    zeta = cfg.zeta
    i = len(frozen_latents)
    ce = cross_entropy(probs, labels)
    similarities = [
        cosine_similarity_loss(own_latent, T.as_tensor(f).detach(), counter) for f in frozen_latents
    ]
    total = T.scale(ce, 1.0 - zeta)
    for sim in similarities:
        total = T.add(total, T.scale(sim, zeta / i))
    return DKDLossTerms(
        total=total,
        cross_entropy=ce.item(),
        similarities=[s.item() for s in similarities],
        zeta=zeta,
    )


def dkd_loss(
    probs: Tensor,
    labels: np.ndarray | Sequence[int],
    own_latent: Tensor,
    frozen_latents: Sequence[np.ndarray | Tensor],
    cfg: DiversityLossConfig,
) -> Tensor:
    return dkd_loss_terms(probs, labels, own_latent, frozen_latents, cfg).total


def soft_targets(teacher_logits: np.ndarray | Sequence[np.ndarray], temperature: float) -> np.ndarray:
    """Tempered softmax of one teacher, or the mean over several teachers"""
    if isinstance(teacher_logits, np.ndarray) and teacher_logits.ndim == 2:
        stack = [teacher_logits]
    else:
        stack = [np.asarray(t) for t in teacher_logits]
    targets = []
    for logits in stack:
        z = np.asarray(logits, dtype=np.float64) / temperature
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        targets.append(e / e.sum(axis=1, keepdims=True))
    return np.mean(targets, axis=0)


def kd_baseline_loss(
    student_logits: Tensor,
    teacher_logits: np.ndarray | Sequence[np.ndarray],
    labels: np.ndarray | Sequence[int],
    cfg: DiversityLossConfig,
) -> Tensor:
    """Hinton-style distillation blended with cross-entropy

    loss = (1 - zeta) * CE(student) + zeta * T^2 * KL(p_teacher || p_student)
    with both distributions tempered by T. Several teacher logit arrays are
    combined by averaging their tempered soft targets.

    Raises:
        ValueError: If the temperature is not positive
    """
    temperature = cfg.kd_temperature
    if temperature <= 0:
        raise ValueError(f"KD temperature must be positive, got {temperature}")
    student_logits = T.as_tensor(student_logits)
    targets = soft_targets(teacher_logits, temperature).astype(student_logits.dtype)
    if targets.shape != student_logits.shape:
        raise ValueError(f"teacher targets {targets.shape} do not match student logits {student_logits.shape}")
    ce = cross_entropy(T.softmax(student_logits), labels)
    log_student = T.log(T.softmax(T.scale(student_logits, 1.0 / temperature)))
    log_targets = np.log(np.maximum(targets, T.LOG_FLOOR))
    # KL = sum_k p_t * (log p_t - log p_s), per row, then batch mean
    pointwise = T.mul(Tensor(targets), T.sub(Tensor(log_targets), log_student))
    kl = T.reduce_mean(T.reduce_sum(pointwise, axis=1))
    return T.add(
        T.scale(ce, 1.0 - cfg.zeta),
        T.scale(kl, cfg.zeta * temperature * temperature),
    )
