import numpy as np
import pytest

from conftest import linear_model
from qaalab.core import FULL, QUANTIZED, WEIGHTS_ONLY, BatchNorm, build_model
from qaalab.diagnostics import (SharpnessConfig, UndefinedDiagnostic, bn_stats_export, cosine, distance_matrix,
                                divergence_from_features, feature_divergence, gradient_similarity,
                                sharpness_feature, sharpness_weight)
from qaalab.training import calibrate_model


def mean_logit_head(z, y):
    return float(z.mean()), np.full_like(z, 1.0 / z.size)


def constant_head(z, y):
    return 0.7, np.zeros_like(z)


def calibrated(arch, bits, seed, rng):
    return calibrate_model(build_model(arch, bits=bits, seed=seed), rng.uniform(0, 1, (16, 1, 8, 8)), "minmax")


def direction_model(v):
    """Two-class linear model whose CE input gradient at label 0 is a positive multiple of ``v``."""
    return linear_model(np.vstack([np.zeros(len(v)), v]))


class TestDivergence:
    def test_identical_inputs(self, rng):
        m = build_model("convnet_a", seed=1)
        x = rng.uniform(0, 1, (4, 1, 8, 8))
        assert feature_divergence(m, x, x, 0) == 0.0

    def test_doubled_features(self, rng):
        f = rng.uniform(0.1, 1, (3, 10))
        np.testing.assert_allclose(divergence_from_features(f, 2 * f), 1.0, rtol=1e-15)

    def test_hand_example(self):
        assert divergence_from_features(np.array([[3.0, 4.0]]), np.array([[0.0, 0.0]]))[0] == 1.0

    def test_scale_property(self, rng):
        f, d = rng.standard_normal((5, 8)), rng.standard_normal((5, 8))
        base = divergence_from_features(f, f + d)
        np.testing.assert_allclose(divergence_from_features(f, f + 3 * d), 3 * base, rtol=1e-12)

    def test_zero_clean_feature(self):
        m = linear_model(np.eye(2))
        m.taps = [0]
        with pytest.raises(UndefinedDiagnostic):
            feature_divergence(m, np.zeros((1, 2)), np.ones((1, 2)), 0)

    def test_skip_undefined(self):
        m = linear_model(np.eye(2))
        m.taps = [0]
        x = np.array([[0.0, 0.0], [3.0, 4.0]])
        xa = np.array([[1.0, 1.0], [0.0, 0.0]])
        assert feature_divergence(m, x, xa, 0, skip_undefined=True) == 1.0

    def test_tap_out_of_range(self, rng):
        with pytest.raises(IndexError):
            feature_divergence(build_model("mlp3"), np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)), 5)


class TestSimilarity:
    x = np.array([[0.3, 0.6]])
    y = np.array([0])

    def test_self_similarity(self, rng):
        m = build_model("convnet_a", seed=2)
        x = rng.uniform(0, 1, (4, 1, 8, 8))
        assert gradient_similarity(m, m, x, np.arange(4)) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        a, b = direction_model([1.0, 0.0]), direction_model([0.0, 1.0])
        assert gradient_similarity(a, b, self.x, self.y) == pytest.approx(0.0, abs=1e-15)

    def test_hand_cosine(self):
        a, b = direction_model([1.0, 0.0]), direction_model([1.0, 1.0])
        assert gradient_similarity(a, b, self.x, self.y) == pytest.approx(1 / np.sqrt(2), abs=1e-12)

    def test_positive_rescale_invariant(self, rng):
        v, w = rng.standard_normal(2), rng.standard_normal(2)
        base = gradient_similarity(direction_model(v), direction_model(w), self.x, self.y)
        # scaling the weights rescales the gradient by a positive factor only if the softmax
        # weight also stays positive, which holds for any finite logits
        scaled = gradient_similarity(direction_model(v), direction_model(3 * w), self.x, self.y)
        assert scaled == pytest.approx(base, abs=1e-12)
        assert -1.0 <= base <= 1.0

    def test_cosine_zero_vector(self):
        with pytest.raises(UndefinedDiagnostic):
            cosine(np.zeros(3), np.ones(3))

    def test_state_list_averages_gradients(self, rng):
        m = calibrated("convnet_a", 2, 3, rng)
        x = rng.uniform(0, 1, (3, 1, 8, 8))
        s = gradient_similarity(m, m, x, np.arange(3), QUANTIZED, [WEIGHTS_ONLY, QUANTIZED])
        assert -1.0 <= s <= 1.0


class TestDistanceMatrix:
    def test_hand_entry(self):
        x, y = np.array([[0.3, 0.6]]), np.array([0])
        labels, d = distance_matrix([("a", direction_model([1.0, 0.0])), ("b", direction_model([1.0, 1.0]))], x, y)
        assert labels == ["a", "b"]
        assert d[0, 1] == pytest.approx(1 - 1 / np.sqrt(2), abs=1e-12)

    def test_symmetric_zero_diagonal(self, rng):
        models = [(f"m{s}", calibrated(a, b, s, rng))
                  for s, (a, b) in enumerate([("convnet_a", 32), ("convnet_b", 2), ("mlp3", 4)])]
        x = rng.uniform(0, 1, (5, 1, 8, 8))
        _, d = distance_matrix(models, x, np.arange(5))
        assert np.array_equal(d, d.T)
        assert np.all(np.diag(d) == 0)
        assert np.all((d >= 0) & (d <= 2))

    def test_needs_two(self):
        with pytest.raises(ValueError):
            distance_matrix([("a", build_model("mlp3"))], np.zeros((1, 1, 8, 8)), np.array([0]))


class TestSharpness:
    def test_flat_loss(self, rng):
        m = linear_model(np.zeros((1, 4)))
        x = rng.uniform(0, 1, (3, 4))
        cfg = SharpnessConfig(1e-3)
        assert sharpness_weight(m, x, None, cfg, FULL, head=constant_head).value == 0.0
        assert sharpness_feature(m, x, None, cfg, FULL, head=constant_head).value == 0.0

    @pytest.mark.parametrize("eps", [5e-4, 1e-3])
    def test_weight_closed_form(self, eps, rng):
        w = rng.uniform(0, 1, (1, 5))
        x = rng.uniform(0, 1, (1, 5))
        m = linear_model(w)
        res = sharpness_weight(m, x, None, SharpnessConfig(eps), FULL, head=mean_logit_head)
        loss = float((w @ x[0])[0])
        # the bias is a weight too and contributes eps * 1
        expected = 100 * eps * (np.abs(x).sum() + 1) / (1 + loss)
        assert res.value == pytest.approx(expected, rel=1e-9)

    @pytest.mark.parametrize("eps", [5e-4, 1e-3])
    def test_feature_closed_form(self, eps, rng):
        w = rng.standard_normal((1, 5))
        x = rng.uniform(0.2, 0.8, (1, 5))
        m = linear_model(w, bias=[2.0])
        res = sharpness_feature(m, x, None, SharpnessConfig(eps), FULL, head=mean_logit_head)
        loss, g1 = float((w @ x[0])[0]) + 2.0, np.abs(w).sum()
        assert res.value == pytest.approx(100 * eps * g1 / (1 + loss - eps * g1), rel=1e-9)

    def test_nonnegative_and_monotone(self, rng):
        x = rng.uniform(0, 1, (8, 1, 8, 8))
        y = np.arange(8)
        for seed, bits in enumerate([32, 2]):
            m = calibrated("convnet_a", bits, seed, rng)
            for eps in (5e-4, 1e-3):
                cfg = SharpnessConfig(eps)
                w = sharpness_weight(m, x, y, cfg)
                f = sharpness_feature(m, x, y, cfg)
                assert w.value >= 0 and f.value >= 0
                assert np.all(np.diff(w.trace) >= 0) and np.all(np.diff(f.trace) <= 0)
                assert len(w.trace) == 21

    def test_state_average(self, rng):
        m = calibrated("convnet_a", 2, 4, rng)
        x = rng.uniform(0, 1, (4, 1, 8, 8))
        r = sharpness_weight(m, x, np.arange(4), SharpnessConfig(1e-3), [WEIGHTS_ONLY, QUANTIZED])
        assert r.value >= 0

    def test_does_not_modify_model(self, rng):
        m = build_model("mlp3", seed=1)
        before = {k: v.copy() for k, v in m.named_parameters()}
        sharpness_weight(m, rng.uniform(0, 1, (2, 1, 8, 8)), np.array([0, 1]), SharpnessConfig(1e-3))
        assert all(np.array_equal(v, before[k]) for k, v in m.named_parameters())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SharpnessConfig(0.0)
        with pytest.raises(ValueError):
            SharpnessConfig(1e-3, iterations=0)


class TestBNStats:
    def test_fresh_model(self):
        rows = bn_stats_export(build_model("convnet_a", width=4), 1)
        assert len(rows) == 4
        assert all(mean == 0.0 and var == 1.0 for _, mean, var in rows)

    def test_ema_fixed_point(self):
        m = build_model("convnet_a", width=4)
        x = np.full((4, 1, 8, 8), 0.5, np.float32)
        for _ in range(150):
            m.forward(x, FULL, train=True)
        pre = m.layers[0].forward(x, FULL, False)[0]
        rows = bn_stats_export(m, 1)
        np.testing.assert_allclose([r[1] for r in rows], pre.mean(axis=(0, 2, 3)), rtol=1e-4, atol=1e-6)

    def test_non_bn_layer(self):
        with pytest.raises(ValueError):
            bn_stats_export(build_model("convnet_a"), 0)


def test_batchnorm_layer_kind():
    assert BatchNorm(2).kind == "batchnorm"
