"""Evaluation protocols: black-box transfer and white-box attacks on an ensemble

transfer     adversarials crafted on an external reference model
direct       a single model attacked with its own gradients (no defense)
projected    each sample crafted on one member, round-robin, applied to all
aggregated   the perturbations of every member summed, re-projected, applied to all
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from dkd_workbench.attacks.attacks import AttackResult, Classifier, make_attack
from dkd_workbench.ensemble.voting import evaluate_votes
from dkd_workbench.models.models import AccuracyRow, AttackConfig, AttackKind, AttackMetadata, TrainingMode
from dkd_workbench.utils.datasets import DatasetHandle

logger = logging.getLogger(__name__)


@dataclass
class AdversarialSet:
    """Adversarials for the evaluated samples, in dataset order"""

    clean: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    source: str
    flagged: int = 0
    source_success: Optional[np.ndarray] = None
    success_per_member: Optional[np.ndarray] = None

    def batches(self, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for start in range(0, len(self.labels), batch_size):
            yield self.clean[start : start + batch_size], self.adversarial[start : start + batch_size]

    def metadata(self, cfg: AttackConfig) -> AttackMetadata:
        flat = (self.adversarial - self.clean).reshape(len(self.clean), -1)
        linf = np.abs(flat).max(axis=1) if flat.size else np.zeros(len(flat))
        l2 = np.linalg.norm(flat, axis=1) if flat.size else np.zeros(len(flat))
        success = self.source_success if self.source_success is not None else np.zeros(len(flat), bool)
        return AttackMetadata(
            attack=cfg,
            source_model=self.source,
            samples=len(self.clean),
            mean_linf=float(linf.mean()) if len(linf) else 0.0,
            max_linf=float(linf.max()) if len(linf) else 0.0,
            mean_l2=float(l2.mean()) if len(l2) else 0.0,
            success_rate=float(success.mean()) if len(success) else 0.0,
            flagged=self.flagged,
        )


def _samples(dataset: DatasetHandle, cfg: AttackConfig) -> tuple[np.ndarray, np.ndarray]:
    handle = dataset.head(cfg.samples) if cfg.samples is not None else dataset
    return handle.images.astype(np.float64), handle.labels


def craft(
    model: Classifier,
    cfg: AttackConfig,
    images: np.ndarray,
    labels: np.ndarray,
    source: str = "model",
    workers: int = 1,
) -> AttackResult:
    """Run one attack over many samples in batches, results in sample order"""
    attack = make_attack(model, cfg, source)
    starts = list(range(0, len(images), cfg.batch_size))

    def run(start: int) -> AttackResult:
        return attack.generate(images[start : start + cfg.batch_size], labels[start : start + cfg.batch_size])

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    if not parts:
        empty = np.zeros((0,) + images.shape[1:])
        return AttackResult(empty, empty, np.zeros(0), np.zeros(0), source, np.zeros(0, bool), np.zeros(0, int), np.zeros(0, bool))
    return AttackResult(
        adversarial=np.concatenate([p.adversarial for p in parts]),
        perturbation=np.concatenate([p.perturbation for p in parts]),
        linf=np.concatenate([p.linf for p in parts]),
        l2=np.concatenate([p.l2 for p in parts]),
        source_model=source,
        success=np.concatenate([p.success for p in parts]),
        iterations=np.concatenate([p.iterations for p in parts]),
        flagged=np.concatenate([p.flagged for p in parts]),
    )


def _probabilities(models: Sequence[Classifier], images: np.ndarray) -> np.ndarray:
    return np.stack([m.predict_proba(images) for m in models])


def member_success(members: Sequence[Classifier], adversarial: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """(M, N) flags, member m misclassifies adversarial sample n"""
    return _probabilities(members, adversarial).argmax(axis=2) != labels[None, :]


def _row(
    protocol: str,
    cfg: AttackConfig,
    members: Sequence[Classifier],
    adversarial: np.ndarray,
    labels: np.ndarray,
    n: int,
    mode: Optional[TrainingMode | str],
    reference_accuracy: Optional[float] = None,
) -> AccuracyRow:
    evaluation = evaluate_votes(_probabilities(members, adversarial), labels, n)
    logger.info(
        f"{protocol} {AttackKind(cfg.kind).value} {cfg.param_label}"
        f"{' ' + TrainingMode(mode).value if mode is not None else ''}: "
        f"plain {evaluation.plain_accuracy:.4f} boosted {evaluation.boosted_accuracy:.4f}"
    )
    return AccuracyRow(
        protocol=protocol,
        attack=AttackKind(cfg.kind).value,
        param=cfg.param_label,
        mode=mode,
        samples=evaluation.samples,
        plain_accuracy=evaluation.plain_accuracy,
        boosted_accuracy=evaluation.boosted_accuracy,
        reference_accuracy=reference_accuracy,
        member_accuracies=evaluation.member_accuracies,
    )


def transfer_adversarials(
    reference_model: Classifier, cfg: AttackConfig, dataset: DatasetHandle, workers: int = 1
) -> AdversarialSet:
    images, labels = _samples(dataset, cfg)
    result = craft(reference_model, cfg, images, labels, "reference", workers)
    return AdversarialSet(images, result.adversarial, labels, "reference", int(result.flagged.sum()), result.success)


def blackbox_transfer(
    reference_model: Classifier,
    ensembles: Mapping[str, Sequence[Classifier]],
    cfg: AttackConfig,
    dataset: DatasetHandle,
    n: int = 3,
    workers: int = 1,
    adversarials: Optional[AdversarialSet] = None,
) -> list[AccuracyRow]:
    """Replay adversarials crafted on the reference model against every ensemble

    Args:
        reference_model (Classifier): The model the attack sees
        ensembles (Mapping[str, Sequence[Classifier]]): Ensembles by training mode
        cfg (AttackConfig): The attack
        dataset (DatasetHandle): Evaluation samples
        n (int): Top-n of boosted voting
        workers (int): Threads for crafting
        adversarials (Optional[AdversarialSet]): Reuse an already crafted set

    Returns:
        list[AccuracyRow]: One row per ensemble, with the reference model's own accuracy
    """
    adversarials = adversarials or transfer_adversarials(reference_model, cfg, dataset, workers)
    reference_probs = reference_model.predict_proba(adversarials.adversarial)
    reference_accuracy = (
        float(np.mean(reference_probs.argmax(axis=1) == adversarials.labels)) if len(adversarials.labels) else 0.0
    )
    return [
        _row("transfer", cfg, members, adversarials.adversarial, adversarials.labels, n, mode, reference_accuracy)
        for mode, members in ensembles.items()
    ]


def direct_adversarials(
    model: Classifier, cfg: AttackConfig, dataset: DatasetHandle, workers: int = 1
) -> AdversarialSet:
    images, labels = _samples(dataset, cfg)
    result = craft(model, cfg, images, labels, "member_0", workers)
    return AdversarialSet(images, result.adversarial, labels, "member_0", int(result.flagged.sum()), result.success)


def whitebox_direct(
    model: Classifier,
    cfg: AttackConfig,
    dataset: DatasetHandle,
    workers: int = 1,
    mode: Optional[TrainingMode | str] = None,
) -> AccuracyRow:
    """Accuracy of one undefended model under an attack on its own gradients"""
    adversarials = direct_adversarials(model, cfg, dataset, workers)
    return _row("direct", cfg, [model], adversarials.adversarial, adversarials.labels, 2, mode)


def projected_adversarials(
    members: Sequence[Classifier], cfg: AttackConfig, dataset: DatasetHandle, workers: int = 1
) -> AdversarialSet:
    """Sample i is crafted on member i mod M"""
    if not members:
        raise ValueError("projected attack needs at least one member")
    images, labels = _samples(dataset, cfg)
    adversarial = images.copy()
    success = np.zeros(len(labels), dtype=bool)
    flagged = 0
    owner = np.arange(len(labels)) % len(members)
    for index, member in enumerate(members):
        rows = np.flatnonzero(owner == index)
        if len(rows) == 0:
            continue
        result = craft(member, cfg, images[rows], labels[rows], f"member_{index}", workers)
        adversarial[rows] = result.adversarial
        success[rows] = result.success
        flagged += int(result.flagged.sum())
    return AdversarialSet(
        images, adversarial, labels, "round-robin", flagged, success, member_success(members, adversarial, labels)
    )


def whitebox_projected(
    members: Sequence[Classifier],
    cfg: AttackConfig,
    dataset: DatasetHandle,
    n: int = 3,
    workers: int = 1,
    mode: Optional[TrainingMode | str] = None,
    adversarials: Optional[AdversarialSet] = None,
) -> AccuracyRow:
    """Craft on one member per sample and apply the perturbation to the whole ensemble"""
    adversarials = adversarials or projected_adversarials(members, cfg, dataset, workers)
    return _row("projected", cfg, members, adversarials.adversarial, adversarials.labels, n, mode)


def aggregate_perturbations(
    perturbations: Sequence[np.ndarray], cfg: AttackConfig
) -> np.ndarray:
    """Sum per-member perturbations and pull the sum back into the attack budget

    FGSM sums are clipped to the L-infinity ball of radius epsilon. Other
    attacks are rescaled into the L2 ball whose radius is the largest
    member perturbation of the sample.
    """
    stack = np.stack(perturbations)
    total = stack.sum(axis=0)
    if AttackKind(cfg.kind) == AttackKind.fgsm:
        return np.clip(total, -cfg.epsilon, cfg.epsilon)
    n = total.shape[0]
    flat_total = total.reshape(n, -1)
    radius = np.linalg.norm(stack.reshape(len(stack), n, -1), axis=2).max(axis=0)
    norms = np.linalg.norm(flat_total, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(norms > radius, radius / norms, 1.0)
    return (flat_total * factor[:, None]).reshape(total.shape)


def aggregated_adversarials(
    members: Sequence[Classifier], cfg: AttackConfig, dataset: DatasetHandle, workers: int = 1
) -> AdversarialSet:
    if not members:
        raise ValueError("aggregated attack needs at least one member")
    images, labels = _samples(dataset, cfg)
    results = [craft(m, cfg, images, labels, f"member_{i}", workers) for i, m in enumerate(members)]
    perturbation = aggregate_perturbations([r.perturbation for r in results], cfg)
    adversarial = np.clip(images + perturbation, cfg.clip_min, cfg.clip_max)
    flagged = int(sum(r.flagged.sum() for r in results))
    success = np.any([r.success for r in results], axis=0) if len(labels) else np.zeros(0, bool)
    return AdversarialSet(
        images, adversarial, labels, "aggregated", flagged, success, member_success(members, adversarial, labels)
    )


def whitebox_aggregated(
    members: Sequence[Classifier],
    cfg: AttackConfig,
    dataset: DatasetHandle,
    n: int = 3,
    workers: int = 1,
    mode: Optional[TrainingMode | str] = None,
    adversarials: Optional[AdversarialSet] = None,
) -> AccuracyRow:
    """Apply the sum of every member's perturbation, re-projected, to the ensemble"""
    adversarials = adversarials or aggregated_adversarials(members, cfg, dataset, workers)
    return _row("aggregated", cfg, members, adversarials.adversarial, adversarials.labels, n, mode)


def clean_row(
    members: Sequence[Classifier],
    dataset: DatasetHandle,
    cfg: AttackConfig,
    n: int = 3,
    mode: Optional[TrainingMode | str] = None,
    reference_model: Optional[Classifier] = None,
) -> AccuracyRow:
    """The no-attack row"""
    images, labels = _samples(dataset, cfg)
    evaluation = evaluate_votes(_probabilities(members, images), labels, n)
    reference_accuracy = None
    if reference_model is not None and len(labels):
        reference_accuracy = float(np.mean(reference_model.predict_proba(images).argmax(axis=1) == labels))
    return AccuracyRow(
        protocol="clean",
        attack="none",
        param="-",
        mode=mode,
        samples=evaluation.samples,
        plain_accuracy=evaluation.plain_accuracy,
        boosted_accuracy=evaluation.boosted_accuracy,
        reference_accuracy=reference_accuracy,
        member_accuracies=evaluation.member_accuracies,
    )
