import numpy as np
import pytest

from dkd_workbench.core import tensor as T
from dkd_workbench.core.optim import Adam
from dkd_workbench.core.tensor import Tensor
from dkd_workbench.models.models import DiversityLossConfig
from dkd_workbench.training.losses import (
    DegenerateLatentCounter,
    cosine_similarity_loss,
    cross_entropy,
    dkd_loss,
    dkd_loss_terms,
    kd_baseline_loss,
    soft_targets,
)
from tests.testing_tools import numeric_gradient, relative_error

INSTANCES = 20


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ============================================================================
# 1. CROSS-ENTROPY
# ============================================================================


class TestCrossEntropy:
    def test_uniform_prediction(self):
        probs = Tensor(np.full((4, 10), 0.1))
        assert cross_entropy(probs, [0, 1, 2, 3]).item() == pytest.approx(np.log(10))

    def test_confident_correct_prediction_is_near_zero(self):
        probs = np.full((2, 10), 1e-9)
        probs[0, 3] = probs[1, 7] = 1 - 9e-9
        assert cross_entropy(Tensor(probs), [3, 7]).item() < 1e-6

    def test_zero_probability_is_finite(self):
        probs = np.zeros((1, 10))
        probs[0, 0] = 1.0
        assert np.isfinite(cross_entropy(Tensor(probs), [1]).item())

    def test_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.full((2, 10), 0.2)), [0, 1])

    def test_labels_must_be_classes(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.full((2, 10), 0.1)), [0, 10])
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.full((2, 10), 0.1)), [0])

    def test_gradient_through_softmax(self):
        for seed in range(INSTANCES):
            rng = np.random.default_rng(seed)
            z = rng.normal(size=(5, 10))
            labels = rng.integers(0, 10, 5)
            leaf = Tensor(z, requires_grad=True)
            (analytic,) = T.grad(cross_entropy(T.softmax(leaf), labels), [leaf])
            numeric = numeric_gradient(lambda v: cross_entropy(T.softmax(Tensor(v)), labels).item(), z)
            assert relative_error(analytic, numeric) < 1e-4
            # d CE / d z = (softmax(z) - onehot) / N
            expected = _softmax(z)
            expected[np.arange(5), labels] -= 1
            np.testing.assert_allclose(analytic, expected / 5, atol=1e-12)


# ============================================================================
# 2. COSINE SIMILARITY
# ============================================================================


class TestCosineSimilarity:
    def test_reference_values(self):
        a = np.array([[1.0, 0.0], [1.0, 2.0], [0.0, 3.0]])
        assert cosine_similarity_loss(a, a).item() == pytest.approx(1.0)
        assert cosine_similarity_loss(a, -a).item() == pytest.approx(-1.0)
        orthogonal = np.array([[0.0, 1.0], [2.0, -1.0], [3.0, 0.0]])
        assert cosine_similarity_loss(a, orthogonal).item() == pytest.approx(0.0)

    def test_scale_invariant(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        assert cosine_similarity_loss(3 * a, 0.5 * b).item() == pytest.approx(cosine_similarity_loss(a, b).item())

    def test_zero_norm_rows_are_counted_and_ignored(self):
        a = np.array([[0.0, 0.0], [1.0, 1.0]])
        b = np.array([[1.0, 0.0], [1.0, 1.0]])
        counter = DegenerateLatentCounter()
        value = cosine_similarity_loss(Tensor(a, requires_grad=True), b, counter)
        assert value.item() == pytest.approx(0.5)
        assert counter.count == 1
        leaf = Tensor(a, requires_grad=True)
        (g,) = T.grad(cosine_similarity_loss(leaf, b), [leaf])
        assert np.all(np.isfinite(g)) and np.all(g[0] == 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cosine_similarity_loss(np.ones((2, 3)), np.ones((2, 4)))

    def test_gradient(self):
        for seed in range(INSTANCES):
            rng = np.random.default_rng(seed)
            a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
            leaf = Tensor(a, requires_grad=True)
            (analytic,) = T.grad(cosine_similarity_loss(leaf, b), [leaf])
            numeric = numeric_gradient(lambda v: cosine_similarity_loss(v, b).item(), a)
            assert relative_error(analytic, numeric) < 1e-4

    def test_descent_on_frozen_latent_is_monotone(self):
        frozen = np.array([[1.0, 0.0]])
        a = Tensor(np.array([[0.6, 0.8]]), requires_grad=True)
        history = []
        for _ in range(100):
            loss = cosine_similarity_loss(a, frozen)
            history.append(loss.item())
            (g,) = T.grad(loss, [a])
            a.data -= 0.2 * g
        history.append(cosine_similarity_loss(a, frozen).item())
        assert np.all(np.diff(history) <= 1e-12)
        assert history[-1] == pytest.approx(-1.0, abs=1e-3)

    def test_adam_reaches_opposite_direction(self):
        frozen = np.array([[1.0, 0.0]])
        a = Tensor(np.array([[-0.5, 1.0]]), requires_grad=True)
        opt = Adam([a], lr=0.05)
        first = cosine_similarity_loss(a, frozen).item()
        for _ in range(100):
            cosine_similarity_loss(a, frozen).backward()
            opt.step()
        last = cosine_similarity_loss(a, frozen).item()
        assert last < first
        assert last < -0.98


# ============================================================================
# 3. DKD OBJECTIVE
# ============================================================================


class TestDKDLoss:
    @pytest.fixture
    def batch(self):
        rng = np.random.default_rng(7)
        return (
            rng.normal(size=(6, 10)),
            rng.integers(0, 10, 6),
            rng.normal(size=(6, 8)),
            [rng.normal(size=(6, 8)), rng.normal(size=(6, 8))],
        )

    def test_terms_recompose(self, batch):
        z, labels, own, frozen = batch
        terms = dkd_loss_terms(T.softmax(Tensor(z)), labels, Tensor(own), frozen, DiversityLossConfig(zeta=0.9))
        assert terms.total.item() == pytest.approx(terms.recomposed, rel=1e-12)
        assert len(terms.similarities) == 2
        expected = 0.1 * terms.cross_entropy + 0.45 * sum(terms.similarities)
        assert terms.total.item() == pytest.approx(expected, rel=1e-12)

    def test_zero_zeta_is_cross_entropy(self, batch):
        z, labels, own, frozen = batch
        loss = dkd_loss(T.softmax(Tensor(z)), labels, Tensor(own), frozen, DiversityLossConfig(zeta=0.0))
        assert loss.item() == pytest.approx(cross_entropy(T.softmax(Tensor(z)), labels).item())

    def test_needs_a_predecessor(self, batch):
        z, labels, own, _ = batch
        with pytest.raises(ValueError):
            dkd_loss(T.softmax(Tensor(z)), labels, Tensor(own), [], DiversityLossConfig())

    def test_no_gradient_reaches_predecessors(self, batch):
        z, labels, own, frozen = batch
        frozen_leaf = Tensor(frozen[0], requires_grad=True)
        own_leaf = Tensor(own, requires_grad=True)
        loss = dkd_loss(T.softmax(Tensor(z)), labels, own_leaf, [frozen_leaf], DiversityLossConfig(zeta=0.5))
        g_frozen, g_own = T.grad(loss, [frozen_leaf, own_leaf])
        np.testing.assert_array_equal(g_frozen, np.zeros_like(frozen[0]))
        assert np.abs(g_own).max() > 0

    def test_gradient(self):
        cfg = DiversityLossConfig(zeta=0.7)
        for seed in range(INSTANCES):
            rng = np.random.default_rng(seed)
            z, own = rng.normal(size=(4, 10)), rng.normal(size=(4, 5))
            labels = rng.integers(0, 10, 4)
            frozen = [rng.normal(size=(4, 5)) for _ in range(3)]

            def loss(zv, ov):
                return dkd_loss(T.softmax(zv), labels, ov, frozen, cfg)

            zl, ol = Tensor(z, requires_grad=True), Tensor(own, requires_grad=True)
            gz, go = T.grad(loss(zl, ol), [zl, ol])
            nz = numeric_gradient(lambda v: loss(Tensor(v), Tensor(own)).item(), z)
            no = numeric_gradient(lambda v: loss(Tensor(z), Tensor(v)).item(), own)
            assert relative_error(gz, nz) < 1e-4
            assert relative_error(go, no) < 1e-4


# ============================================================================
# 4. KD BASELINE
# ============================================================================


class TestKDBaseline:
    def test_soft_targets_average_teachers(self):
        a, b = np.zeros((1, 10)), np.zeros((1, 10))
        b[0, 0] = 100.0
        targets = soft_targets([a, b], temperature=1.0)
        np.testing.assert_allclose(targets.sum(axis=1), 1.0)
        assert targets[0, 0] == pytest.approx(0.5 * 0.1 + 0.5 * 1.0, abs=1e-9)

    def test_temperature_flattens(self):
        z = np.array([[3.0, 1.0, 0.0, 0, 0, 0, 0, 0, 0, 0]])
        assert soft_targets(z, 10.0).max() < soft_targets(z, 1.0).max()

    def test_identical_teacher_leaves_cross_entropy(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(5, 10))
        labels = rng.integers(0, 10, 5)
        cfg = DiversityLossConfig(zeta=0.6, kd_temperature=4.0)
        loss = kd_baseline_loss(Tensor(z), z, labels, cfg).item()
        ce = cross_entropy(T.softmax(Tensor(z)), labels).item()
        assert loss == pytest.approx(0.4 * ce, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kd_baseline_loss(Tensor(np.zeros((2, 10))), np.zeros((3, 10)), [0, 1], DiversityLossConfig())

    def test_gradient(self):
        cfg = DiversityLossConfig(zeta=0.8, kd_temperature=3.0)
        for seed in range(INSTANCES):
            rng = np.random.default_rng(seed)
            z = rng.normal(size=(4, 10))
            teachers = [rng.normal(size=(4, 10)) for _ in range(2)]
            labels = rng.integers(0, 10, 4)
            leaf = Tensor(z, requires_grad=True)
            (analytic,) = T.grad(kd_baseline_loss(leaf, teachers, labels, cfg), [leaf])
            numeric = numeric_gradient(lambda v: kd_baseline_loss(Tensor(v), teachers, labels, cfg).item(), z)
            assert relative_error(analytic, numeric) < 1e-4
