import logging

import numpy as np
import pytest

from dkd_workbench.attacks.attacks import (
    ATTACKS,
    CarliniWagnerL2,
    DeepFool,
    FastGradientSign,
    LinearClassifier,
    SaliencyMap,
    cw_l2,
    deepfool,
    fgsm,
    jsma,
    make_attack,
    predict,
)
from dkd_workbench.errors import ShapeMismatchError
from dkd_workbench.models.models import AttackConfig
from dkd_workbench.networks.architectures import build_model

SHAPE = (1, 1, 6)
CLASSES = 3


def _linear(seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return LinearClassifier(rng.normal(size=(6, CLASSES)) * scale, rng.normal(size=CLASSES), SHAPE)


def _inputs(seed, count=8):
    return np.random.default_rng(seed + 100).uniform(0.3, 0.7, size=(count,) + SHAPE)


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ============================================================================
# 1. FGSM
# ============================================================================


class TestFGSM:
    @pytest.mark.parametrize("epsilon", [0.0, 0.05, 0.3])
    def test_budget_and_box(self, epsilon):
        model = _linear(0)
        x = _inputs(0)
        result = fgsm(model, x, predict(model, x), epsilon)
        assert np.all(result.linf <= epsilon + 1e-12)
        assert result.adversarial.min() >= 0.0 and result.adversarial.max() <= 1.0
        np.testing.assert_allclose(result.perturbation, result.adversarial - x)

    def test_closed_form_on_linear_model(self):
        model = _linear(1)
        x = _inputs(1)
        labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
        flat = x.reshape(len(x), -1)
        probs = _softmax(flat @ model.weights.data + model.bias.data)
        probs[np.arange(len(x)), labels] -= 1
        expected = np.clip(x + 0.1 * np.sign(probs @ model.weights.data.T).reshape(x.shape), 0, 1)
        np.testing.assert_allclose(fgsm(model, x, labels, 0.1).adversarial, expected, atol=1e-12)

    def test_zero_gradient_is_flagged(self, caplog):
        model = LinearClassifier(np.zeros((6, CLASSES)), np.zeros(CLASSES), SHAPE)
        x = _inputs(2, 3)
        with caplog.at_level(logging.WARNING):
            result = fgsm(model, x, np.zeros(3, dtype=int), 0.2)
        assert result.flagged.all()
        np.testing.assert_array_equal(result.adversarial, x)
        assert "zero input gradient" in caplog.text

    def test_on_a_network(self):
        model = build_model("toy", seed=0)
        x = np.random.default_rng(0).uniform(size=(5, 1, 8, 8))
        result = fgsm(model, x, predict(model, x), 0.1)
        assert result.adversarial.shape == x.shape
        assert np.all(result.linf <= 0.1 + 1e-9)

    def test_wrong_shapes(self):
        model = _linear(0)
        with pytest.raises(ShapeMismatchError):
            fgsm(model, np.zeros((2, 1, 1, 5)), [0, 1], 0.1)
        with pytest.raises(ShapeMismatchError):
            fgsm(model, np.zeros((2,) + SHAPE), [0], 0.1)


# ============================================================================
# 2. DEEPFOOL
# ============================================================================


class TestDeepFool:
    @pytest.mark.parametrize("seed", range(5))
    def test_affine_closed_form(self, seed):
        model = _linear(seed, scale=10.0)
        x = _inputs(seed)
        labels = predict(model, x)
        w, b = model.weights.data, model.bias.data
        flat = x.reshape(len(x), -1)
        logits = flat @ w + b
        expected = np.empty_like(flat)
        for i, k in enumerate(labels):
            diff_w = w.T - w[:, k]
            diff_f = logits[i] - logits[i, k]
            distance = np.abs(diff_f) / np.linalg.norm(diff_w, axis=1)
            distance[k] = np.inf
            l = distance.argmin()
            expected[i] = 1.02 * np.abs(diff_f[l]) / (diff_w[l] @ diff_w[l]) * diff_w[l]
        result = deepfool(model, x, labels, clip_min=-10.0, clip_max=10.0)
        np.testing.assert_allclose(result.perturbation.reshape(len(x), -1), expected, atol=1e-6)
        assert result.success.all()
        assert np.all(result.iterations == 1)
        assert not result.flagged.any()

    def test_misclassified_samples_are_left_alone(self):
        model = _linear(3)
        x = _inputs(3, 4)
        wrong = (predict(model, x) + 1) % CLASSES
        result = deepfool(model, x, wrong)
        assert result.flagged.all()
        np.testing.assert_array_equal(result.adversarial, x)

    def test_box(self):
        model = _linear(4)
        x = _inputs(4)
        result = deepfool(model, x, predict(model, x), deepfool_overshoot=0.5)
        assert result.adversarial.min() >= 0.0 and result.adversarial.max() <= 1.0


# ============================================================================
# 3. JSMA
# ============================================================================


class TestSaliencyMap:
    @pytest.mark.parametrize("pairwise", [True, False])
    def test_pixel_budget(self, pairwise):
        model = _linear(5)
        x = _inputs(5)
        result = jsma(model, x, predict(model, x), max_pixels=2, theta=0.2, jsma_pairwise=pairwise)
        changed = np.count_nonzero(result.perturbation.reshape(len(x), -1), axis=1)
        assert np.all(changed <= (4 if pairwise else 2))
        assert np.all(result.iterations <= 2)
        assert result.adversarial.min() >= 0.0 and result.adversarial.max() <= 1.0

    def test_decreasing_pixels(self):
        model = _linear(6)
        x = _inputs(6)
        result = jsma(model, x, predict(model, x), max_pixels=3, theta=-0.2)
        assert np.all(result.perturbation <= 0)

    def test_targeted_run_stops_at_target(self):
        model = _linear(7, scale=5.0)
        x = _inputs(7)
        labels = predict(model, x)
        targets = (labels + 1) % CLASSES
        result = jsma(model, x, labels, max_pixels=6, theta=1.0, targets=targets)
        reached = predict(model, result.adversarial) == targets
        assert np.all(reached | (result.iterations == 6) | result.flagged)

    def test_flat_saliency_is_flagged(self):
        model = LinearClassifier(np.zeros((6, CLASSES)), np.zeros(CLASSES), SHAPE)
        result = jsma(model, _inputs(8, 2), np.zeros(2, dtype=int), max_pixels=4)
        assert result.flagged.all()
        assert np.all(result.iterations == 0)

    def test_saliency_sign_conditions(self):
        attack = SaliencyMap(_linear(0), AttackConfig(kind="jsma", jsma_theta=0.1))
        alpha = np.array([1.0, 1.0, -1.0])
        beta = np.array([-2.0, 2.0, -2.0])
        np.testing.assert_array_equal(attack.saliency(alpha, beta, np.ones(3, bool)), [2.0, 0.0, 0.0])


# ============================================================================
# 4. CARLINI-WAGNER L2
# ============================================================================


class TestCarliniWagner:
    @pytest.fixture(scope="class")
    def result(self):
        model = _linear(9, scale=3.0)
        x = _inputs(9, 6)
        labels = predict(model, x)
        return model, x, labels, cw_l2(
            model, x, labels, initial_c=1.0, iterations=60, cw_binary_steps=4, cw_learning_rate=0.05
        )

    def test_best_distance_never_grows(self, result):
        *_, res = result
        assert len(res.l2_history) == 4
        for before, after in zip(res.l2_history, res.l2_history[1:]):
            assert np.all(after <= before)

    def test_adversarials_stay_in_box(self, result):
        *_, res = result
        assert res.adversarial.min() >= 0.0 and res.adversarial.max() <= 1.0

    def test_found_adversarials_fool_the_model(self, result):
        model, x, labels, res = result
        found = ~res.flagged
        assert found.any()
        assert res.success[found].all()
        np.testing.assert_allclose(res.l2[found], res.l2_history[-1][found], rtol=1e-9)
        assert np.all(res.iterations == 4 * 60)


# ============================================================================
# 5. ATTACKS ON A NETWORK
# ============================================================================


class TestOnToyNetwork:
    @pytest.fixture
    def network(self):
        model = build_model("toy", seed=4)
        x = np.random.default_rng(4).uniform(0.3, 0.7, size=(4, 1, 8, 8))
        return model, x, predict(model, x)

    @staticmethod
    def _untouched(model, checksum):
        assert model.checksum() == checksum
        assert all(p.requires_grad and p.grad is None for p in model.params)

    def test_deepfool(self, network):
        model, x, labels = network
        checksum = model.checksum()
        result = deepfool(model, x, labels, max_iter=50)
        self._untouched(model, checksum)
        assert result.adversarial.shape == x.shape
        assert result.adversarial.min() >= 0.0 and result.adversarial.max() <= 1.0
        assert result.success.any()
        assert result.success[~result.flagged].all()
        np.testing.assert_array_equal(result.success, predict(model, result.adversarial) != labels)

    @pytest.mark.parametrize("pairwise", [True, False])
    def test_jsma(self, network, pairwise):
        model, x, labels = network
        checksum = model.checksum()
        result = jsma(model, x, labels, max_pixels=8, theta=1.0, jsma_pairwise=pairwise)
        self._untouched(model, checksum)
        changed = np.count_nonzero(result.perturbation.reshape(len(x), -1), axis=1)
        assert np.all(changed <= (2 if pairwise else 1) * result.iterations)
        assert np.all(result.iterations <= 8)
        assert result.adversarial.min() >= 0.0 and result.adversarial.max() <= 1.0
        np.testing.assert_array_equal(result.success, predict(model, result.adversarial) != labels)

    def test_cw(self, network):
        model, x, labels = network
        checksum = model.checksum()
        result = cw_l2(model, x, labels, initial_c=10.0, iterations=40, cw_binary_steps=2, cw_learning_rate=0.05)
        self._untouched(model, checksum)
        assert len(result.l2_history) == 2
        assert np.all(result.l2_history[1] <= result.l2_history[0])
        assert result.adversarial.min() >= 0.0 and result.adversarial.max() <= 1.0
        found = ~result.flagged
        assert found.any()
        assert result.success[found].all()


def test_make_attack_picks_the_generator():
    model = _linear(0)
    assert set(ATTACKS) == {"fgsm", "deepfool", "jsma", "cw"}
    expected = {"fgsm": FastGradientSign, "deepfool": DeepFool, "jsma": SaliencyMap, "cw": CarliniWagnerL2}
    for kind, cls in expected.items():
        attack = make_attack(model, AttackConfig(kind=kind), "reference")
        assert type(attack) is cls
        assert attack.source_model == "reference"
        assert attack.num_classes == CLASSES


def test_empty_pixel_box_is_refused():
    with pytest.raises(ValueError):
        AttackConfig(clip_min=1.0, clip_max=1.0)
