"""Adversarial example generators

Every attack works on a batch of images (N, C, H, W) in float64 and needs
only a classifier that maps images to logits through the gradient tape.
Adversarials always stay inside the configured pixel box.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import ContextManager, Optional, Protocol, Sequence

import numpy as np

from dkd_workbench.core import tensor as T
from dkd_workbench.core.optim import Adam
from dkd_workbench.core.tensor import Tensor
from dkd_workbench.errors import GradientError, ShapeMismatchError
from dkd_workbench.models.models import AttackConfig, AttackKind
from dkd_workbench.training.losses import cross_entropy

logger = logging.getLogger(__name__)

# C&W keeps tanh away from +-1 so the inverse at the box edges stays finite
TANH_SHRINK = 0.999999
CW_UPPER_BOUND = 1e10


class Classifier(Protocol):
    input_shape: tuple[int, ...]

    def logits(self, x: Tensor | np.ndarray) -> Tensor: ...

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray: ...

    def frozen(self) -> ContextManager: ...


class LinearClassifier:
    """Logits x.W + b on flattened images

    Used for closed-form checks of the attacks and for hand-built ensembles.
    """

    def __init__(self, weights: np.ndarray, bias: np.ndarray, input_shape: tuple[int, int, int]):
        self.weights = Tensor(np.asarray(weights, dtype=np.float64))
        self.bias = Tensor(np.asarray(bias, dtype=np.float64))
        self.input_shape = tuple(input_shape)
        if self.weights.shape != (int(np.prod(input_shape)), self.bias.shape[0]):
            raise ShapeMismatchError(
                "LinearClassifier", f"weights {self.weights.shape} do not fit inputs {input_shape}"
            )

    def logits(self, x: Tensor | np.ndarray) -> Tensor:
        return T.bias_add(T.matmul(T.flatten(x), self.weights), self.bias)

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.logits(x).data

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return T.softmax(self.logits(x)).data

    def frozen(self) -> ContextManager:
        return contextlib.nullcontext(self)


@dataclass
class AttackResult:
    """Adversarials of one batch and how they were obtained

    Attributes:
        adversarial (np.ndarray): Adversarial images, inside the pixel box
        perturbation (np.ndarray): adversarial - clean
        linf (np.ndarray): Per-sample L-infinity norm of the perturbation
        l2 (np.ndarray): Per-sample L2 norm of the perturbation
        source_model (str): Name of the model the attack was crafted on
        success (np.ndarray): The source model misclassifies the adversarial
        iterations (np.ndarray): Inner iterations used per sample
        flagged (np.ndarray): Samples the attack could not handle normally
        success_per_member (Optional[np.ndarray]): (M, N) misclassification
            flags on ensemble members, see protocols.member_success
    """

    adversarial: np.ndarray
    perturbation: np.ndarray
    linf: np.ndarray
    l2: np.ndarray
    source_model: str
    success: np.ndarray
    iterations: np.ndarray
    flagged: np.ndarray
    success_per_member: Optional[np.ndarray] = None
    l2_history: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.adversarial)


def _norms(perturbation: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = perturbation.reshape(len(perturbation), -1)
    if flat.shape[1] == 0:
        return np.zeros(len(flat)), np.zeros(len(flat))
    return np.abs(flat).max(axis=1), np.linalg.norm(flat, axis=1)


def _check_finite(grad: np.ndarray, attack: str) -> np.ndarray:
    if not np.all(np.isfinite(grad)):
        raise GradientError(f"{attack}: non-finite input gradient")
    return grad


def predict(model: Classifier, x: np.ndarray) -> np.ndarray:
    with model.frozen():
        return model.logits(x).data.argmax(axis=1)


def logit_gradients(model: Classifier, x: np.ndarray, classes: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Logits and d logit_k / d x for each requested class k

    Returns:
        tuple[np.ndarray, np.ndarray]: Logits (N, K) and gradients (len(classes), N, C, H, W)
    """
    xt = Tensor(x, requires_grad=True)
    with model.frozen():
        logits = model.logits(xt)
    n = x.shape[0]
    grads = [
        T.grad(T.reduce_sum(T.pick(logits, np.full(n, k))), [xt])[0] for k in classes
    ]
    return logits.data, np.stack(grads)


class Attack:
    """Base class of the attack generators

    Subclasses read their settings in ``parse_params`` and implement
    ``generate`` on one batch.
    """

    kind: AttackKind

    def __init__(self, model: Classifier, cfg: Optional[AttackConfig] = None, source_model: str = "model"):
        self.model = model
        self.source_model = source_model
        self.parse_params(cfg or AttackConfig(kind=self.kind))

    def parse_params(self, cfg: AttackConfig) -> None:
        self.cfg = cfg
        self.clip_min = cfg.clip_min
        self.clip_max = cfg.clip_max

    @property
    def num_classes(self) -> int:
        blank = np.zeros((1,) + tuple(self.model.input_shape))
        with self.model.frozen():
            return int(self.model.logits(blank).shape[1])

    def generate(self, x: np.ndarray, labels: np.ndarray) -> AttackResult:
        raise NotImplementedError("Sub-classes must implement generate")

    def _prepare(self, x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.model.input_shape):
            raise ShapeMismatchError(
                type(self).__name__, f"images {x.shape} do not match input shape {self.model.input_shape}"
            )
        if len(labels) != len(x):
            raise ShapeMismatchError(type(self).__name__, f"{len(labels)} labels for {len(x)} images")
        return x, labels

    def _result(
        self,
        x: np.ndarray,
        adversarial: np.ndarray,
        labels: np.ndarray,
        iterations: np.ndarray,
        flagged: np.ndarray,
        l2_history: Optional[list[np.ndarray]] = None,
    ) -> AttackResult:
        adversarial = np.clip(adversarial, self.clip_min, self.clip_max)
        perturbation = adversarial - x
        linf, l2 = _norms(perturbation)
        success = predict(self.model, adversarial) != labels if len(x) else np.zeros(0, dtype=bool)
        return AttackResult(
            adversarial=adversarial,
            perturbation=perturbation,
            linf=linf,
            l2=l2,
            source_model=self.source_model,
            success=success,
            iterations=iterations,
            flagged=flagged,
            l2_history=l2_history or [],
        )


class FastGradientSign(Attack):
    """x' = clip(x + epsilon * sign(d CE / d x))

    Samples whose gradient vanishes everywhere are returned unchanged and flagged.
    """

    kind = AttackKind.fgsm

    def parse_params(self, cfg: AttackConfig) -> None:
        super().parse_params(cfg)
        self.epsilon = cfg.epsilon

    def generate(self, x: np.ndarray, labels: np.ndarray) -> AttackResult:
        x, labels = self._prepare(x, labels)
        xt = Tensor(x, requires_grad=True)
        with self.model.frozen():
            logits = self.model.logits(xt)
        # summed rather than mean CE, the sign is the same
        loss = T.scale(cross_entropy(T.softmax(logits), labels), float(len(x)))
        grad = _check_finite(T.grad(loss, [xt])[0], "fgsm")
        flagged = ~np.any(grad.reshape(len(x), -1) != 0, axis=1)
        if flagged.any():
            logger.warning(f"fgsm: {int(flagged.sum())} samples with a zero input gradient left unchanged")
        adversarial = x + self.epsilon * np.sign(grad)
        return self._result(x, adversarial, labels, np.ones(len(x), dtype=np.int64), flagged)


class DeepFool(Attack):
    """Iterative step to the nearest linearized class boundary, L2

    Every step moves by |f_l| / ||w_l||^2 * w_l towards the closest class l,
    where f_l and w_l are the logit difference to the true class and its
    gradient. The accumulated step is scaled by (1 + overshoot). Samples the
    model already gets wrong keep a zero perturbation and are flagged, as
    are samples still correct after the iteration budget.
    """

    kind = AttackKind.deepfool

    def parse_params(self, cfg: AttackConfig) -> None:
        super().parse_params(cfg)
        self.overshoot = cfg.deepfool_overshoot
        self.max_iter = cfg.iterations

    def generate(self, x: np.ndarray, labels: np.ndarray) -> AttackResult:
        x, labels = self._prepare(x, labels)
        n = len(x)
        r_total = np.zeros_like(x)
        adversarial = x.copy()
        iterations = np.zeros(n, dtype=np.int64)
        flagged = np.zeros(n, dtype=bool)
        stuck = np.zeros(n, dtype=bool)
        initially_wrong = predict(self.model, x) != labels if n else np.zeros(0, dtype=bool)
        flagged |= initially_wrong
        active = ~initially_wrong
        rows = np.arange(n)
        for _ in range(self.max_iter):
            if not active.any():
                break
            idx = rows[active]
            logits, grads = logit_gradients(self.model, adversarial[idx], range(self.num_classes))
            _check_finite(grads, "deepfool")
            own = labels[idx]
            fooled = logits.argmax(axis=1) != own
            active[idx[fooled]] = False
            keep = ~fooled
            if not keep.any():
                break
            idx, logits, grads, own = idx[keep], logits[keep], grads[:, keep], own[keep]
            local = np.arange(len(idx))
            # (K, n, D) differences to the true class
            flat = grads.reshape(grads.shape[0], len(idx), -1)
            w = flat - flat[own, local][None]
            f = logits.T - logits[local, own][None]
            norms = np.linalg.norm(w, axis=2)
            with np.errstate(divide="ignore", invalid="ignore"):
                distance = np.where(norms > 0, np.abs(f) / norms, np.inf)
            distance[own, local] = np.inf
            closest = distance.argmin(axis=0)
            dead = ~np.isfinite(distance[closest, local])
            if dead.any():
                stuck[idx[dead]] = True
                active[idx[dead]] = False
            live = ~dead
            wl = w[closest, local][live]
            fl = f[closest, local][live]
            step = (np.abs(fl) / np.sum(wl * wl, axis=1))[:, None] * wl
            target = idx[live]
            r_total[target] += step.reshape((len(target),) + x.shape[1:])
            iterations[target] += 1
            adversarial[target] = np.clip(
                x[target] + (1.0 + self.overshoot) * r_total[target], self.clip_min, self.clip_max
            )
        still_correct = (predict(self.model, adversarial) == labels) if n else np.zeros(0, dtype=bool)
        flagged |= (still_correct & ~initially_wrong) | stuck
        adversarial[initially_wrong] = x[initially_wrong]
        return self._result(x, adversarial, labels, iterations, flagged)


class SaliencyMap(Attack):
    """Greedy Jacobian saliency map attack, increasing (theta > 0) or decreasing pixels

    Untargeted runs push towards the most likely wrong class of the clean
    input and stop at the first misclassification.
    Each iteration changes the pixel pair (or single pixel) with the highest
    saliency by theta and removes it from the search domain, so at most two
    pixels per iteration are touched. An all-zero saliency map stops the
    sample and flags it.
    """

    kind = AttackKind.jsma

    def parse_params(self, cfg: AttackConfig) -> None:
        super().parse_params(cfg)
        self.theta = cfg.jsma_theta
        self.max_pixels = cfg.iterations if cfg.jsma_max_pixels is None else cfg.jsma_max_pixels
        self.pairwise = cfg.jsma_pairwise

    def saliency(self, alpha: np.ndarray, beta: np.ndarray, domain: np.ndarray) -> np.ndarray:
        """Saliency of single pixels, 0 where the sign conditions fail"""
        if self.theta >= 0:
            valid = (alpha > 0) & (beta < 0) & domain
        else:
            valid = (alpha < 0) & (beta > 0) & domain
        return np.where(valid, np.abs(alpha) * np.abs(beta), 0.0)

    def _pair(self, alpha: np.ndarray, beta: np.ndarray, domain: np.ndarray) -> Optional[tuple[int, int]]:
        a = alpha[:, None] + alpha[None, :]
        b = beta[:, None] + beta[None, :]
        allowed = domain[:, None] & domain[None, :]
        np.fill_diagonal(allowed, False)
        scores = self.saliency(a, b, allowed)
        if not np.any(scores > 0):
            return None
        p, q = np.unravel_index(np.argmax(scores), scores.shape)
        return int(p), int(q)

    def _single(self, alpha: np.ndarray, beta: np.ndarray, domain: np.ndarray) -> Optional[tuple[int]]:
        scores = self.saliency(alpha, beta, domain)
        if not np.any(scores > 0):
            return None
        return (int(np.argmax(scores)),)

    def generate(
        self, x: np.ndarray, labels: np.ndarray, targets: Optional[np.ndarray] = None
    ) -> AttackResult:
        x, labels = self._prepare(x, labels)
        n = len(x)
        flat_x = x.reshape(n, -1)
        adversarial = flat_x.copy()
        targeted = targets is not None
        if targets is None:
            with self.model.frozen():
                logits = self.model.logits(x).data.copy() if n else np.zeros((0, 1))
            if n:
                logits[np.arange(n), labels] = -np.inf
            targets = logits.argmax(axis=1)
        targets = np.asarray(targets, dtype=np.int64)
        if self.theta >= 0:
            domain = adversarial < self.clip_max
        else:
            domain = adversarial > self.clip_min
        iterations = np.zeros(n, dtype=np.int64)
        flagged = np.zeros(n, dtype=bool)
        active = np.ones(n, dtype=bool)
        choose = self._pair if self.pairwise else self._single
        for _ in range(self.max_pixels):
            idx = np.flatnonzero(active)
            if len(idx) == 0:
                break
            images = adversarial[idx].reshape((len(idx),) + x.shape[1:])
            logits, alpha, beta = self._target_gradients(images, targets[idx])
            _check_finite(alpha, "jsma")
            _check_finite(beta, "jsma")
            predictions = logits.argmax(axis=1)
            done = predictions == targets[idx] if targeted else predictions != labels[idx]
            active[idx[done]] = False
            for local, sample in enumerate(idx):
                if done[local]:
                    continue
                picked = choose(alpha[local], beta[local], domain[sample])
                if picked is None:
                    flagged[sample] = True
                    active[sample] = False
                    continue
                for pixel in picked:
                    adversarial[sample, pixel] = np.clip(
                        adversarial[sample, pixel] + self.theta, self.clip_min, self.clip_max
                    )
                    domain[sample, pixel] = False
                iterations[sample] += 1
        return self._result(x, adversarial.reshape(x.shape), labels, iterations, flagged)

    def _target_gradients(
        self, images: np.ndarray, targets: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Logits, the target logit gradient and the summed gradient of the other logits"""
        xt = Tensor(images, requires_grad=True)
        with self.model.frozen():
            logits = self.model.logits(xt)
        n = len(images)
        alpha = T.grad(T.reduce_sum(T.pick(logits, targets)), [xt])[0].reshape(n, -1)
        total = T.grad(T.reduce_sum(logits), [xt])[0].reshape(n, -1)
        return logits.data, alpha, total - alpha


class CarliniWagnerL2(Attack):
    """Carlini-Wagner L2 attack with a binary search on the constant c

    The adversarial is box_min + box_width * (tanh(w) + 1) / 2, so it can not
    leave the pixel box. Per binary-search step, Adam minimizes
    ||x' - x||^2 + c * max(Z_label - max_other Z, -confidence) over w. A
    success lowers c, a failure raises it. The lowest-L2 success over all
    steps is returned; samples that never succeed keep the last iterate and
    are flagged.
    """

    kind = AttackKind.cw

    def parse_params(self, cfg: AttackConfig) -> None:
        super().parse_params(cfg)
        if cfg.iterations < 1:
            raise ValueError(f"cw needs at least one iteration, got {cfg.iterations}")
        self.initial_constant = cfg.cw_initial_constant
        self.learning_rate = cfg.cw_learning_rate
        self.binary_steps = cfg.cw_binary_steps
        self.confidence = cfg.cw_confidence
        self.iterations = cfg.iterations

    def _to_box(self, w: Tensor) -> Tensor:
        half = 0.5 * (self.clip_max - self.clip_min)
        unit = T.tanh(w)
        return T.add(T.scale(unit, half), Tensor(np.full(w.shape, self.clip_min + half)))

    def _objective(
        self, w: Tensor, x: np.ndarray, labels: np.ndarray, constants: np.ndarray
    ) -> tuple[Tensor, np.ndarray, np.ndarray]:
        n = len(x)
        adversarial = self._to_box(w)
        diff = T.sub(adversarial, Tensor(x))
        distance = T.reduce_sum(T.flatten(T.mul(diff, diff)), axis=1)
        with self.model.frozen():
            logits = self.model.logits(adversarial)
        classes = logits.shape[1]
        onehot = np.eye(classes)[labels]
        real = T.pick(logits, labels)
        # push the true class far down before taking the max over the others
        other = T.reduce_max(T.sub(logits, Tensor(onehot * 1e9)), axis=1)
        margin = T.clamp_min(T.sub(real, other), -self.confidence)
        total = T.reduce_sum(T.add(distance, T.mul(Tensor(constants), margin)))
        return total, distance.data, logits.data

    def generate(self, x: np.ndarray, labels: np.ndarray) -> AttackResult:
        x, labels = self._prepare(x, labels)
        n = len(x)
        half = 0.5 * (self.clip_max - self.clip_min)
        unit = np.clip((x - self.clip_min) / half - 1.0, -1.0, 1.0) * TANH_SHRINK
        w0 = np.arctanh(unit)
        constants = np.full(n, self.initial_constant, dtype=np.float64)
        lower = np.zeros(n)
        upper = np.full(n, CW_UPPER_BOUND)
        best_l2 = np.full(n, np.inf)
        best = x.copy()
        last = x.copy()
        iterations = np.zeros(n, dtype=np.int64)
        history: list[np.ndarray] = []
        for step in range(self.binary_steps):
            w = Tensor(w0.copy(), requires_grad=True)
            optimizer = Adam([w], lr=self.learning_rate)
            succeeded = np.zeros(n, dtype=bool)
            for _ in range(self.iterations):
                loss, distance, logits = self._objective(w, x, labels, constants)
                # logits belong to the iterate before this update
                current = self._to_box(w.detach()).data
                fooled = self._fooled(logits, labels)
                improved = fooled & (distance < best_l2 ** 2)
                best_l2 = np.where(improved, np.sqrt(distance), best_l2)
                best[improved] = current[improved]
                succeeded |= fooled
                # parameters stay out of the leaves, only w gets a gradient
                with self.model.frozen():
                    T.backward(loss)
                optimizer.step()
                iterations += 1
            _, distance, logits = self._objective(w.detach(), x, labels, constants)
            current = self._to_box(w.detach()).data
            fooled = self._fooled(logits, labels)
            improved = fooled & (distance < best_l2 ** 2)
            best_l2 = np.where(improved, np.sqrt(distance), best_l2)
            best[improved] = current[improved]
            succeeded |= fooled
            last = current
            history.append(best_l2.copy())
            upper = np.where(succeeded, np.minimum(upper, constants), upper)
            lower = np.where(succeeded, lower, np.maximum(lower, constants))
            constants = np.where(
                upper < CW_UPPER_BOUND / 10,
                (lower + upper) / 2,
                np.where(succeeded, constants, constants * 10),
            )
            logger.debug(
                f"cw step {step + 1}/{self.binary_steps}: {int(np.isfinite(best_l2).sum())}/{n} fooled"
            )
        found = np.isfinite(best_l2)
        adversarial = np.where(found.reshape((n,) + (1,) * (x.ndim - 1)), best, last)
        return self._result(x, adversarial, labels, iterations, ~found, history)

    def _fooled(self, logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
        if self.confidence == 0:
            return logits.argmax(axis=1) != labels
        rows = np.arange(len(labels))
        others = logits.copy()
        others[rows, labels] = -np.inf
        return others.max(axis=1) - logits[rows, labels] >= self.confidence


ATTACKS: dict[str, type[Attack]] = {
    AttackKind.fgsm.value: FastGradientSign,
    AttackKind.deepfool.value: DeepFool,
    AttackKind.jsma.value: SaliencyMap,
    AttackKind.cw.value: CarliniWagnerL2,
}


def make_attack(model: Classifier, cfg: AttackConfig, source_model: str = "model") -> Attack:
    return ATTACKS[AttackKind(cfg.kind).value](model, cfg, source_model)


def fgsm(model: Classifier, x: np.ndarray, labels: np.ndarray, epsilon: float, **options) -> AttackResult:
    cfg = AttackConfig(kind=AttackKind.fgsm, epsilon=epsilon, **options)
    return FastGradientSign(model, cfg).generate(x, labels)


def deepfool(
    model: Classifier, x: np.ndarray, labels: np.ndarray, max_iter: int = 50, **options
) -> AttackResult:
    cfg = AttackConfig(kind=AttackKind.deepfool, iterations=max_iter, **options)
    return DeepFool(model, cfg).generate(x, labels)


def jsma(
    model: Classifier,
    x: np.ndarray,
    labels: np.ndarray,
    max_pixels: int,
    theta: float = 0.1,
    targets: Optional[np.ndarray] = None,
    **options,
) -> AttackResult:
    """Saliency map attack; untargeted when targets is None"""
    cfg = AttackConfig(kind=AttackKind.jsma, jsma_max_pixels=max_pixels, jsma_theta=theta, **options)
    return SaliencyMap(model, cfg).generate(x, labels, targets)


def cw_l2(
    model: Classifier,
    x: np.ndarray,
    labels: np.ndarray,
    initial_c: float = 10.0,
    iterations: int = 200,
    **options,
) -> AttackResult:
    cfg = AttackConfig(kind=AttackKind.cw, cw_initial_constant=initial_c, iterations=iterations, **options)
    return CarliniWagnerL2(model, cfg).generate(x, labels)
