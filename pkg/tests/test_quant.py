import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qaalab.quant import (QuantParamError, QuantParams, calibrate_minmax, calibrate_mse, fake_quantize,
                          quantization_mse, quantize, round_half_away, ste_backward)

U2 = QuantParams(2, 0.5, 0.0, signed=False)


class TestQuantParams:
    def test_grid_unsigned_and_signed(self):
        assert QuantParams(3, 1.0, 0.0, signed=False).grid == (0, 7)
        assert QuantParams(3, 1.0, 0.0, signed=True).grid == (-4, 3)

    @pytest.mark.parametrize("bits", [0, 9, 16, 33])
    def test_rejects_bad_bitwidth(self, bits):
        with pytest.raises(QuantParamError):
            QuantParams(bits, 1.0, 0.0)

    def test_rejects_nonfinite(self):
        with pytest.raises(QuantParamError):
            QuantParams(4, float("nan"), 0.0)

    def test_dict_round_trip(self):
        p = QuantParams(5, 0.123456789, -0.75, signed=True)
        assert QuantParams.from_dict(p.to_dict()) == p


class TestQuantize:
    def test_reference_point(self):
        assert quantize(np.array(0.9), U2) == 2

    def test_zero_maps_to_origin(self):
        assert quantize(np.array(0.0), U2) == 0

    def test_clamps_at_top(self):
        assert quantize(np.array(10.0), U2) == 3

    def test_ties_round_away_from_zero(self):
        v = np.array([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5])
        np.testing.assert_array_equal(round_half_away(v), [-3, -2, -1, 1, 2, 3])

    def test_sentinel_is_identity(self):
        x = np.array([0.123, -7.0], np.float32)
        assert quantize(x, QuantParams(32, 1.0, 0.0)) is x


class TestFakeQuantize:
    def test_reference_point(self):
        assert fake_quantize(np.array(0.9), U2) == 1.0

    def test_grid_point_unchanged(self):
        assert fake_quantize(np.array(0.5), U2) == 0.5

    def test_clamp_to_lower_bound(self):
        assert fake_quantize(np.array(-0.2), U2) == 0.0

    def test_keeps_float32(self):
        assert fake_quantize(np.ones(3, np.float32), U2).dtype == np.float32


class TestSTE:
    def test_identity_inside(self):
        gx, _, _ = ste_backward(np.array(1.0), np.array(0.9), U2)
        assert gx == 1.0

    def test_zero_when_clamped(self):
        gx, gs, gb = ste_backward(np.array(1.0), np.array(10.0), U2)
        assert gx == 0.0 and gs == 3.0 and gb == 1.0

    def test_scale_surrogate(self):
        _, gs, gb = ste_backward(np.array(1.0), np.array(0.9), U2)
        assert gs == round_half_away(np.array(1.8)) - 1.8
        assert gb == 0.0

    def test_below_range(self):
        p = QuantParams(2, 0.5, 0.0, signed=True)
        gx, gs, gb = ste_backward(np.array(2.0), np.array(-5.0), p)
        assert (gx, gs, gb) == (0.0, 2.0 * -2, 2.0)


class TestCalibration:
    def test_minmax_unit_range(self):
        p = calibrate_minmax(np.linspace(0, 1, 50), 2, signed=False)
        assert p.scale == pytest.approx(1 / 3, abs=1e-15) and p.bias == 0.0

    def test_minmax_constant_hits_floor(self):
        p = calibrate_minmax(np.full(10, 0.7), 4, signed=False)
        assert p.scale == 1e-8 and p.bias == 0.7

    def test_minmax_affine_span(self):
        p = calibrate_minmax(np.linspace(-1, 1, 20), 3, signed=False)
        assert p.scale == pytest.approx(2 / 7, abs=1e-15) and p.bias == -1.0

    def test_minmax_empty(self):
        with pytest.raises(QuantParamError):
            calibrate_minmax(np.array([]), 4, False)

    def test_mse_exact_grid(self):
        samples = 0.25 * np.arange(8) + 0.5
        p = calibrate_mse(samples, 3, signed=False)
        assert quantization_mse(samples, p) == 0.0

    def test_mse_two_points_one_bit(self):
        p = calibrate_mse(np.array([0.0, 1.0]), 1, signed=False)
        assert (p.scale, p.bias) == (1.0, 0.0)
        assert quantization_mse(np.array([0.0, 1.0]), p) == 0.0

    def test_mse_outlier_shrinks_scale(self, rng):
        samples = np.r_[rng.uniform(0, 1, 99), 10.0]
        p = calibrate_mse(samples, 3, signed=False)
        base = calibrate_minmax(samples, 3, signed=False)
        assert p.scale < base.scale
        # brute force over the same candidate grid
        errs = [quantization_mse(samples, QuantParams(3, max(r * base.scale, 1e-8), b, False))
                for r in np.linspace(0.2, 1.2, 11) for b in np.linspace(samples.min(), samples.max(), 11)]
        assert quantization_mse(samples, p) == pytest.approx(min(errs), rel=1e-12)

    def test_mse_never_worse_than_minmax(self, rng):
        for bits in (2, 3, 4, 8):
            x = rng.standard_normal(500)
            for signed in (True, False):
                assert quantization_mse(x, calibrate_mse(x, bits, signed)) <= \
                    quantization_mse(x, calibrate_minmax(x, bits, signed))


params = st.builds(
    QuantParams,
    bits=st.integers(1, 8),
    scale=st.floats(1e-3, 10.0),
    bias=st.floats(-5.0, 5.0),
    signed=st.booleans(),
)
values = st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=32)


class TestProperties:
    @settings(max_examples=300, deadline=None)
    @given(p=params, xs=values)
    def test_grid_membership(self, p, xs):
        k = quantize(np.array(xs), p)
        lo, hi = p.grid
        assert k.dtype == np.int32 and np.all((k >= lo) & (k <= hi))

    @settings(max_examples=300, deadline=None)
    @given(p=params, xs=values)
    def test_idempotent(self, p, xs):
        once = fake_quantize(np.array(xs), p)
        np.testing.assert_array_equal(fake_quantize(once, p), once)

    @settings(max_examples=300, deadline=None)
    @given(p=params, xs=values)
    def test_monotone(self, p, xs):
        x = np.sort(np.array(xs))
        assert np.all(np.diff(fake_quantize(x, p)) >= 0)

    @settings(max_examples=300, deadline=None)
    @given(p=params, xs=values)
    def test_error_bounded_in_range(self, p, xs):
        x = np.array(xs)
        lo, hi = p.grid
        inside = (x >= p.scale * lo + p.bias) & (x <= p.scale * hi + p.bias)
        err = np.abs(fake_quantize(x, p) - x)[inside]
        assert np.all(err <= p.scale / 2 + 1e-12 * np.maximum(1, np.abs(x[inside])))
