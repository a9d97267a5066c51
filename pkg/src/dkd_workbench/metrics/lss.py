"""Latent space separation

The separation between one member's latent cloud and the clouds of the
other members is the width 2/||w|| of the maximum-margin hyperplane between
them. The hard margin is realized as a linear soft-margin SVM with a very
large C, solved by libsvm through scikit-learn, and then polished on the
support vectors. A cloud pair whose slacks do not all vanish is inseparable
and scores 0.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.svm import SVC

from dkd_workbench.errors import ShapeMismatchError, SolverConvergenceError
from dkd_workbench.models.models import LSSConfig, LSSReport, MemberMargin, TrainingMode
from dkd_workbench.networks.architectures import ModelGraph

logger = logging.getLogger(__name__)

# larger support sets keep the libsvm solution as is
POLISH_MAX_SUPPORT = 500


@dataclass
class LatentCloud:
    """Latent vectors of one model at one tap layer

    Attributes:
        points (np.ndarray): Samples x latent dimension
        source_model (int): Member index the latents come from
        tap_id (Optional[int]): Layer the latents were tapped at
    """

    points: np.ndarray
    source_model: int = 0
    tap_id: Optional[int] = None
    subsampled: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ValueError(f"a latent cloud is a matrix, got shape {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"latent cloud of model {self.source_model} holds non-finite values")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass
class MarginResult:
    """A maximum-margin separator, or the verdict that there is none

    Attributes:
        separable (bool): Every slack is below the tolerance
        w (np.ndarray): Normal of the hyperplane
        b (float): Offset, the hyperplane is w.x + b = 0
        margin (float): 2 / ||w|| when separable, else 0
        lss (float): Same as margin, 0 for inseparable clouds
        min_functional_margin (float): min over points of label * (w.x + b)
        support (np.ndarray): Indices of the support vectors, positives first
    """

    separable: bool
    w: np.ndarray
    b: float
    margin: float
    lss: float
    min_functional_margin: float = 0.0
    support: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _polish(x: np.ndarray, y: np.ndarray, support: np.ndarray) -> Optional[tuple[np.ndarray, float]]:
    """Solve the margin equalities on the support vectors exactly

    Returns None when the active set does not give a valid separator.
    """
    s = len(support)
    if s == 0 or s > POLISH_MAX_SUPPORT:
        return None
    xs, ys = x[support], y[support]
    gram = (xs @ xs.T) * np.outer(ys, ys)
    system = np.zeros((s + 1, s + 1))
    system[:s, :s] = gram
    system[:s, s] = ys
    system[s, :s] = ys
    rhs = np.concatenate([np.ones(s), [0.0]])
    solution = np.linalg.lstsq(system, rhs, rcond=None)[0]
    if not np.allclose(system @ solution, rhs, rtol=0.0, atol=1e-9):
        return None
    alpha, b = solution[:s], float(solution[s])
    if np.any(alpha < -1e-9):
        return None
    w = (alpha * ys) @ xs
    if not np.all(y * (x @ w + b) >= 1.0 - 1e-9):
        return None
    return w, b


def hard_margin_svm(
    pos: LatentCloud | np.ndarray,
    neg: LatentCloud | np.ndarray,
    tol: float = 1e-3,
    c: float = 1e6,
    solver_tol: float = 1e-8,
    max_iter: int = 10_000_000,
) -> MarginResult:
    """Maximum-margin linear separator between two point clouds

    Args:
        pos (LatentCloud | np.ndarray): Points labelled +1
        neg (LatentCloud | np.ndarray): Points labelled -1
        tol (float): Largest slack that still counts as separated
        c (float): Soft-margin penalty standing in for the hard margin
        solver_tol (float): libsvm stopping tolerance
        max_iter (int): libsvm iteration cap, -1 for none

    Returns:
        MarginResult: lss = 2 / ||w|| if separable, else 0 and separable False

    Raises:
        ShapeMismatchError: If the clouds have different dimensions
        ValueError: If a cloud is empty
        SolverConvergenceError: If libsvm stopped at the iteration cap
    """
    pos = pos if isinstance(pos, LatentCloud) else LatentCloud(pos)
    neg = neg if isinstance(neg, LatentCloud) else LatentCloud(neg)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both clouds need at least one point")
    if pos.dim != neg.dim:
        raise ShapeMismatchError("hard_margin_svm", f"latent dimensions {pos.dim} and {neg.dim} differ")
    x = np.concatenate([pos.points, neg.points])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    svc = SVC(kernel="linear", C=c, tol=solver_tol, max_iter=max_iter, shrinking=False)
    svc.fit(x, y)
    # fit_status_ is 1 when libsvm stopped at max_iter
    if svc.fit_status_ != 0 or (max_iter > 0 and np.any(svc.n_iter_ >= max_iter)):
        raise SolverConvergenceError(f"libsvm did not converge in {max_iter} iterations")
    # sklearn orders classes ascending, so its decision function is positive for +1
    w = svc.coef_.ravel().astype(np.float64)
    b = float(svc.intercept_[0])
    support = np.sort(svc.support_)
    polished = _polish(x, y, support)
    if polished is not None:
        w, b = polished
    functional = y * (x @ w + b)
    slack = np.maximum(0.0, 1.0 - functional)
    norm = float(np.linalg.norm(w))
    separable = bool(norm > 0 and slack.max() < tol)
    margin = 2.0 / norm if separable else 0.0
    return MarginResult(
        separable=separable,
        w=w,
        b=b,
        margin=margin,
        lss=margin,
        min_functional_margin=float(functional.min()),
        support=support,
    )


def lss_between(
    a: LatentCloud | np.ndarray, b: LatentCloud | np.ndarray, tol: float = 1e-3, **solver
) -> MarginResult:
    """Separation of two models' latent clouds"""
    return hard_margin_svm(a, b, tol, **solver)


def lss_pairwise(
    a: LatentCloud, others: Sequence[LatentCloud], tol: float = 1e-3, **solver
) -> MarginResult:
    """One-vs-rest separation: a against the union of the other clouds"""
    if not others:
        raise ValueError("lss_pairwise needs at least one other cloud")
    rest = LatentCloud(np.concatenate([o.points for o in others]), source_model=-1, tap_id=a.tap_id)
    return hard_margin_svm(a, rest, tol, **solver)


def lss_ensemble(
    clouds: Sequence[LatentCloud],
    cfg: Optional[LSSConfig] = None,
    workers: int = 1,
    zeta: Optional[float] = None,
    mode: Optional[TrainingMode | str] = None,
) -> LSSReport:
    """Mean one-vs-rest separation over the members of an ensemble

    An inseparable member contributes 0 and is flagged in the report.

    Args:
        clouds (Sequence[LatentCloud]): One cloud per member, same tap
        cfg (Optional[LSSConfig]): Solver settings, defaults if None
        workers (int): Threads for the one-vs-rest problems
        zeta (Optional[float]): Recorded in the report
        mode (Optional[TrainingMode | str]): Recorded in the report

    Returns:
        LSSReport: Per-member margins and their mean
    """
    if len(clouds) < 2:
        raise ValueError(f"lss_ensemble needs at least 2 clouds, got {len(clouds)}")
    cfg = cfg or LSSConfig()
    solver = dict(c=cfg.c, solver_tol=cfg.solver_tol, max_iter=cfg.max_iter)

    def one_vs_rest(index: int) -> MarginResult:
        others = [cloud for k, cloud in enumerate(clouds) if k != index]
        return lss_pairwise(clouds[index], others, cfg.tol, **solver)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_vs_rest, range(len(clouds))))
    else:
        results = [one_vs_rest(i) for i in range(len(clouds))]
    per_member = []
    for index, (cloud, result) in enumerate(zip(clouds, results)):
        if not result.separable:
            logger.warning(f"latent cloud of member {index} is not linearly separable from the rest")
        per_member.append(
            MemberMargin(member=index, lss=result.lss, separable=result.separable, points=len(cloud))
        )
    return LSSReport(
        zeta=zeta,
        mode=mode,
        tap_id=clouds[0].tap_id,
        per_member=per_member,
        ensemble_lss=float(np.mean([r.lss for r in results])),
        subsampled=any(c.subsampled for c in clouds),
    )


def latent_clouds(
    members: Sequence[ModelGraph],
    images: np.ndarray,
    max_points: Optional[int] = None,
    seed: int = 0,
) -> list[LatentCloud]:
    """Tap every member on the same images, cut to at most max_points samples

    The same sample subset is used for every member.
    """
    if max_points is not None and len(images) > max_points:
        keep = np.sort(np.random.default_rng(seed).choice(len(images), max_points, replace=False))
        images = images[keep]
        subsampled = True
    else:
        subsampled = False
    return [
        LatentCloud(m.latent(images), source_model=index, tap_id=m.tap_id, subsampled=subsampled)
        for index, m in enumerate(members)
    ]


def ensemble_lss(
    members: Sequence[ModelGraph],
    images: np.ndarray,
    cfg: Optional[LSSConfig] = None,
    workers: int = 1,
    zeta: Optional[float] = None,
    mode: Optional[TrainingMode | str] = None,
) -> LSSReport:
    cfg = cfg or LSSConfig()
    clouds = latent_clouds(members, images, cfg.max_points_per_model, cfg.seed)
    report = lss_ensemble(clouds, cfg, workers, zeta, mode)
    logger.info(f"Ensemble LSS {report.ensemble_lss:.6f} over {len(members)} members")
    return report
