"""Sequential ensemble construction in RI, KD and DKD modes

The first member (the main model) always trains on cross-entropy alone.
Every later member trains against all of its predecessors, which stay
frozen: their parameters are checksummed before and after.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from dkd_workbench.core import tensor as T
from dkd_workbench.core.optim import Adam
from dkd_workbench.core.tensor import Tensor
from dkd_workbench.errors import ConfigError, DivergenceError
from dkd_workbench.models.models import (
    Architecture,
    KDTeacherSource,
    MemberRecord,
    RunManifest,
    TrainConfig,
    TrainingMode,
)
from dkd_workbench.networks.architectures import ModelGraph, build_model, forward_with_latent
from dkd_workbench.training.losses import (
    DegenerateLatentCounter,
    cross_entropy,
    dkd_loss_terms,
    kd_baseline_loss,
)
from dkd_workbench.utils.checkpoints import file_sha256, load_checkpoint, save_checkpoint
from dkd_workbench.utils.datasets import DatasetHandle
from dkd_workbench.utils.reporting import write_history_csv

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class EpochRecord:
    """One row of a member's training history"""

    member: int
    epoch: int
    loss: float
    cross_entropy: float
    similarities: list[float]
    diversity_weight: float
    train_accuracy: float
    val_accuracy: Optional[float]
    degenerate_latents: int = 0


@dataclass
class TrainedMember:
    model: ModelGraph
    seed: int
    history: list[EpochRecord] = field(default_factory=list)
    train_accuracy: float = 0.0
    val_accuracy: Optional[float] = None


@dataclass
class EnsembleState:
    """Members in training order with their training context

    Attributes:
        members (list[ModelGraph]): Member 0 is the main model
        mode (str): ri, kd or dkd
        zeta (float): Diversity (or distillation) weight
        tap_id (int): Latent layer shared by all members
        seeds (list[int]): Initialization seed of each member
        histories (list[list[EpochRecord]]): Per-member epoch records
    """

    members: list[ModelGraph]
    mode: str
    zeta: float
    tap_id: int
    seeds: list[int] = field(default_factory=list)
    histories: list[list[EpochRecord]] = field(default_factory=list)
    accuracies: list[tuple[float, Optional[float]]] = field(default_factory=list)

    @property
    def frozen_mask(self) -> list[bool]:
        return [not any(p.requires_grad for p in m.params) for m in self.members]

    def __len__(self) -> int:
        return len(self.members)

    def append(self, trained: TrainedMember) -> None:
        trained.model.freeze()
        self.members.append(trained.model)
        self.seeds.append(trained.seed)
        self.histories.append(trained.history)
        self.accuracies.append((trained.train_accuracy, trained.val_accuracy))


@dataclass
class BatchLoss:
    """What an objective reports for one batch"""

    loss: Tensor
    cross_entropy: float
    similarities: list[float]
    diversity_weight: float
    correct: int


# (x batch, y batch, sample indices) -> BatchLoss
Objective = Callable[[np.ndarray, np.ndarray, np.ndarray], BatchLoss]


def epoch_order(count: int, seed: int, epoch: int) -> np.ndarray:
    """Sample order of one epoch, fixed by (seed, epoch)"""
    return np.random.default_rng([seed, epoch]).permutation(count)


def accuracy(model: ModelGraph, dataset: DatasetHandle, batch_size: int = 256) -> float:
    if len(dataset) == 0:
        return 0.0
    probs = model.predict_proba(dataset.images, batch_size)
    return float(np.mean(probs.argmax(axis=1) == dataset.labels))


def _fit(
    model: ModelGraph,
    cfg: TrainConfig,
    train: DatasetHandle,
    val: Optional[DatasetHandle],
    objective: Objective,
    member: int,
    seed: int,
    counter: DegenerateLatentCounter,
) -> list[EpochRecord]:
    optimizer = Adam(model.params, lr=cfg.lr)
    history: list[EpochRecord] = []
    images = train.images.astype(cfg.dtype)
    for epoch in range(cfg.epochs):
        order = epoch_order(len(train), seed, epoch)
        totals, ces, correct = [], [], 0
        sims: list[list[float]] = []
        weight = 0.0
        seen_degenerate = counter.count
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = objective(images[idx], train.labels[idx], idx)
            value = batch.loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"member {member} epoch {epoch} batch {start // cfg.batch_size}: loss is {value}"
                )
            T.backward(batch.loss)
            optimizer.step()
            totals.append(value * len(idx))
            ces.append(batch.cross_entropy * len(idx))
            sims.append([s * len(idx) for s in batch.similarities])
            correct += batch.correct
            weight = batch.diversity_weight
        n = len(order)
        record = EpochRecord(
            member=member,
            epoch=epoch,
            loss=sum(totals) / n,
            cross_entropy=sum(ces) / n,
            similarities=[sum(col) / n for col in zip(*sims)] if sims and sims[0] else [],
            diversity_weight=weight,
            train_accuracy=correct / n,
            val_accuracy=accuracy(model, val) if val is not None else None,
            degenerate_latents=counter.count - seen_degenerate,
        )
        history.append(record)
        sim_text = ", ".join(f"{s:.4f}" for s in record.similarities) or "-"
        val_text = f"{record.val_accuracy:.4f}" if record.val_accuracy is not None else "-"
        logger.info(
            f"member {member} epoch {epoch + 1}/{cfg.epochs}: loss {record.loss:.4f} "
            f"ce {record.cross_entropy:.4f} sim [{sim_text}] "
            f"train acc {record.train_accuracy:.4f} val acc {val_text}"
        )
    return history


def _correct(probs: Tensor, labels: np.ndarray) -> int:
    return int(np.sum(probs.data.argmax(axis=1) == labels))


def _frozen_outputs(
    predecessors: Sequence[ModelGraph], images: np.ndarray, which: str, workers: int
) -> list[np.ndarray]:
    """Latents or logits of every frozen predecessor over the whole training set"""

    def run(model: ModelGraph) -> np.ndarray:
        return model.latent(images) if which == "latent" else model.predict_logits(images)

    if workers > 1 and len(predecessors) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, predecessors))
    return [run(m) for m in predecessors]


def train_main(
    cfg: TrainConfig,
    dataset: DatasetHandle,
    seed: Optional[int] = None,
    member: int = 0,
) -> TrainedMember:
    """Train one model on cross-entropy alone

    Args:
        cfg (TrainConfig): Hyperparameters; arch, epochs, batch size and lr are used
        dataset (DatasetHandle): Training data, the last validation fraction is held out
        seed (Optional[int]): Initialization and shuffling seed, cfg.seed if None
        member (int): Member index used in logs

    Returns:
        TrainedMember: The model with its history and final accuracies

    Raises:
        DivergenceError: If the loss becomes NaN or infinite
    """
    seed = cfg.seed if seed is None else seed
    train, val = dataset.split_validation(cfg.validation_fraction)
    model = build_model(cfg.arch, seed, cfg.tap_id, cfg.dtype)

    def objective(x, y, idx):
        _, probs, _ = forward_with_latent(model, x)
        ce = cross_entropy(probs, y)
        return BatchLoss(ce, ce.item(), [], 0.0, _correct(probs, y))

    history = _fit(model, cfg, train, val, objective, member, seed, DegenerateLatentCounter())
    return TrainedMember(
        model=model,
        seed=seed,
        history=history,
        train_accuracy=accuracy(model, train),
        val_accuracy=accuracy(model, val) if val is not None else None,
    )


def train_auxiliary(
    ensemble: EnsembleState,
    cfg: TrainConfig,
    dataset: DatasetHandle,
    seed: Optional[int] = None,
    workers: int = 1,
) -> EnsembleState:
    """Train one more member against every frozen member of the ensemble

    DKD members minimize (1 - zeta) CE + (zeta / i) sum of latent cosines to
    the i predecessors; KD members distil the predecessors' soft targets.

    Raises:
        ValueError: In RI mode, or if the ensemble is empty
        RuntimeError: If a predecessor changed during training
    """
    mode = TrainingMode(cfg.mode)
    if mode == TrainingMode.ri:
        raise ValueError("RI members are trained independently, use train_main for each")
    if not ensemble.members:
        raise ValueError("train_auxiliary needs a trained main model first")
    member = len(ensemble)
    seed = cfg.seed + member if seed is None else seed
    loss_cfg = cfg.loss_config()
    train, val = dataset.split_validation(cfg.validation_fraction)
    images = train.images.astype(cfg.dtype)
    predecessors = list(ensemble.members)
    for m in predecessors:
        m.freeze()
    checksums = [m.checksum() for m in predecessors]

    model = build_model(cfg.arch, seed, ensemble.tap_id, cfg.dtype)
    counter = DegenerateLatentCounter()
    if mode == TrainingMode.dkd:
        frozen = _frozen_outputs(predecessors, images, "latent", workers)

        def objective(x, y, idx):
            _, probs, latent = forward_with_latent(model, x)
            terms = dkd_loss_terms(probs, y, latent, [f[idx] for f in frozen], loss_cfg, counter)
            return BatchLoss(
                terms.total,
                terms.cross_entropy,
                terms.similarities,
                loss_cfg.zeta / len(frozen),
                _correct(probs, y),
            )

    else:
        teachers = predecessors[:1] if cfg.kd_teacher == KDTeacherSource.main else predecessors
        teacher_logits = _frozen_outputs(teachers, images, "logits", workers)

        def objective(x, y, idx):
            logits, probs, _ = forward_with_latent(model, x)
            loss = kd_baseline_loss(logits, [t[idx] for t in teacher_logits], y, loss_cfg)
            ce = cross_entropy(probs.detach(), y).item()
            return BatchLoss(loss, ce, [], loss_cfg.zeta, _correct(probs, y))

    history = _fit(model, cfg, train, val, objective, member, seed, counter)
    for index, (m, before) in enumerate(zip(predecessors, checksums)):
        if m.checksum() != before:
            raise RuntimeError(f"member {index} changed while member {member} was trained")
    if counter.count:
        logger.warning(f"member {member}: {counter.count} zero-norm latent rows over training")
    ensemble.append(
        TrainedMember(
            model=model,
            seed=seed,
            history=history,
            train_accuracy=accuracy(model, train),
            val_accuracy=accuracy(model, val) if val is not None else None,
        )
    )
    return ensemble


def _member_path(run_dir: Path, index: int) -> Path:
    return run_dir / "members" / f"member_{index}.ckpt"


def _load_resumable(run_dir: Path, cfg: TrainConfig, name: str) -> Optional[RunManifest]:
    path = run_dir / MANIFEST_NAME
    if not path.is_file():
        return None
    manifest = RunManifest.model_validate_json(path.read_text())
    if manifest.train != cfg:
        raise ConfigError(
            f"{run_dir} was built with a different training config, use a fresh output directory"
        )
    return manifest


def build_ensemble(
    cfg: TrainConfig,
    dataset: DatasetHandle,
    run_dir: Optional[Union[str, os.PathLike]] = None,
    name: str = "dkd",
    workers: int = 1,
) -> EnsembleState:
    """Train the main model, then ensemble_size - 1 more members

    With a run directory, every member is checkpointed as soon as it is
    trained, with its history CSV, and the run manifest is updated. A later
    call with the same config resumes after the last persisted member.

    Args:
        cfg (TrainConfig): Mode, size and hyperparameters
        dataset (DatasetHandle): Training data
        run_dir (Optional[Union[str, os.PathLike]]): Where to persist members
        name (str): Run name recorded in the manifest
        workers (int): Threads for evaluating frozen predecessors

    Returns:
        EnsembleState: All members, frozen
    """
    mode = TrainingMode(cfg.mode)
    template = build_model(cfg.arch, cfg.seed, cfg.tap_id, cfg.dtype)
    ensemble = EnsembleState(members=[], mode=mode.value, zeta=cfg.zeta, tap_id=template.tap_id)
    directory = Path(run_dir) if run_dir is not None else None
    manifest: Optional[RunManifest] = None
    if directory is not None:
        manifest = _load_resumable(directory, cfg, name) or RunManifest(name=name, mode=mode, train=cfg)
        for record in manifest.members:
            path = directory / record.checkpoint
            if file_sha256(path) != record.sha256:
                raise ConfigError(f"{path} does not match the run manifest, refusing to resume")
            model, _ = load_checkpoint(path)
            ensemble.append(
                TrainedMember(model=model, seed=record.seed, train_accuracy=record.train_accuracy, val_accuracy=record.val_accuracy)
            )
        if manifest.members:
            logger.info(f"Resuming {directory} after {len(manifest.members)} persisted members")

    while len(ensemble) < cfg.ensemble_size:
        index = len(ensemble)
        seed = cfg.seed + index
        logger.info(f"Training member {index + 1}/{cfg.ensemble_size} ({mode.value}, seed {seed})")
        if index == 0 or mode == TrainingMode.ri:
            ensemble.append(train_main(cfg, dataset, seed=seed, member=index))
        else:
            train_auxiliary(ensemble, cfg, dataset, seed=seed, workers=workers)
        if directory is not None and manifest is not None:
            path = _member_path(directory, index)
            save_checkpoint(ensemble.members[index], path, mode, cfg.zeta, index, seed)
            write_history_csv(ensemble.histories[index], directory / f"history_member_{index}.csv")
            train_acc, val_acc = ensemble.accuracies[index]
            manifest.members.append(
                MemberRecord(
                    index=index,
                    seed=seed,
                    checkpoint=str(path.relative_to(directory)),
                    sha256=file_sha256(path),
                    train_accuracy=train_acc,
                    val_accuracy=val_acc,
                )
            )
            (directory / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2))
    return ensemble


def load_ensemble(run_dir: Union[str, os.PathLike]) -> EnsembleState:
    """Load every member listed in a run manifest"""
    directory = Path(run_dir)
    path = directory / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    manifest = RunManifest.model_validate_json(path.read_text())
    members = []
    tap_id = 0
    for record in manifest.members:
        model, header = load_checkpoint(directory / record.checkpoint)
        members.append(model)
        tap_id = header.tap_id
    return EnsembleState(
        members=members,
        mode=TrainingMode(manifest.mode).value,
        zeta=manifest.train.zeta,
        tap_id=tap_id,
        seeds=[r.seed for r in manifest.members],
        histories=[[] for _ in members],
        accuracies=[(r.train_accuracy, r.val_accuracy) for r in manifest.members],
    )


def train_reference(
    cfg: TrainConfig,
    dataset: DatasetHandle,
    arch: Architecture | str = Architecture.lenet_small,
    seed_offset: int = 1000,
) -> TrainedMember:
    """Train the black-box reference model on a seed no ensemble member uses"""
    reference_cfg = cfg.model_copy(update={"arch": Architecture(arch), "tap_id": None})
    return train_main(reference_cfg, dataset, seed=cfg.seed + seed_offset + cfg.ensemble_size)


def mean_pairwise_cosine(models: Sequence[ModelGraph], images: np.ndarray) -> float:
    """Mean over member pairs and samples of |cos| between tapped latents"""
    if len(models) < 2:
        return 0.0
    latents = [m.latent(images).astype(np.float64) for m in models]
    values = []
    for a, b in combinations(latents, 2):
        if a.shape != b.shape:
            raise ValueError(f"latent shapes {a.shape} and {b.shape} differ")
        norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        live = norms > 0
        cos = np.zeros(len(a))
        cos[live] = (a[live] * b[live]).sum(axis=1) / norms[live]
        values.append(np.abs(cos).mean())
    return float(np.mean(values))
