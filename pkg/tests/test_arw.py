"""ARW against an independent scalar transliteration."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import slimfuse.nd as nd
from slimfuse.arw import AdaptiveRadarWeighting
from slimfuse.nd.tensor import Tensor

GELU_FLOOR = 0.17005


def scalar_gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def arw_scalar_oracle(f_r, w_proj, b_proj, w_sp, b_sp):
    """Pure-python step-by-step recomputation of channel+spatial weighting."""
    c, h, w = f_r.shape
    f_hat = np.zeros_like(f_r)
    for co in range(c):
        for i in range(h):
            for j in range(w):
                acc = b_proj[co]
                for ci in range(c):
                    acc += f_r[ci, i, j] * w_proj[co, ci, 0, 0]
                f_hat[co, i, j] = scalar_gelu(acc)
    pooled = [f_hat[ci].mean() for ci in range(c)]
    z = sum(math.exp(p) for p in pooled)
    w_ca = np.array([math.exp(p) / z for p in pooled])
    f_cw = f_hat * w_ca[:, None, None]
    w_sa = np.zeros((1, h, w))
    for i in range(h):
        for j in range(w):
            acc = b_sp[0]
            for ci in range(c):
                acc += f_cw[ci, i, j] * w_sp[0, ci, 0, 0]
            w_sa[0, i, j] = scalar_gelu(acc)
    return f_cw * w_sa, w_ca, w_sa


class TestArwForward:
    def test_zero_input_zero_bias(self):
        rng = np.random.default_rng(0)
        arw = AdaptiveRadarWeighting(4, rng)
        res = arw(Tensor(np.zeros((4, 5, 5))))
        np.testing.assert_array_equal(res.output.data, 0.0)
        np.testing.assert_allclose(res.w_ca.data, np.full(4, 0.25), atol=1e-15)

    def test_single_channel_weight_is_one(self):
        rng = np.random.default_rng(1)
        arw = AdaptiveRadarWeighting(1, rng)
        res = arw(Tensor(rng.standard_normal((1, 3, 3))))
        np.testing.assert_allclose(res.w_ca.data, [1.0], atol=0)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        arw = AdaptiveRadarWeighting(2, rng)
        arw.proj.bias.data[:] = rng.standard_normal(2)
        arw.spatial.weight.data[:] = rng.standard_normal((1, 2, 1, 1))  # open the gate
        arw.spatial.bias.data[:] = rng.standard_normal(1)
        x = rng.standard_normal((2, 3, 3))
        res = arw(Tensor(x))
        out, w_ca, w_sa = arw_scalar_oracle(
            x, arw.proj.weight.data, arw.proj.bias.data,
            arw.spatial.weight.data, arw.spatial.bias.data,
        )
        np.testing.assert_allclose(res.output.data, out, atol=1e-10)
        np.testing.assert_allclose(res.w_ca.data, w_ca, atol=1e-10)
        np.testing.assert_allclose(res.w_sa.data, w_sa, atol=1e-10)

    def test_channel_weights_normalized(self):
        rng = np.random.default_rng(3)
        arw = AdaptiveRadarWeighting(6, rng)
        res = arw(Tensor(rng.standard_normal((6, 4, 4)) * 3))
        assert abs(res.w_ca.data.sum() - 1.0) <= 1e-10
        assert np.all(res.w_ca.data > 0) and np.all(res.w_ca.data < 1)

    @given(st.integers(1, 8), st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
    @settings(max_examples=20, deadline=None)
    def test_output_shape_equals_input_shape(self, c, h, w, seed):
        rng = np.random.default_rng(seed)
        arw = AdaptiveRadarWeighting(c, rng)
        x = rng.standard_normal((c, h, w))
        res = arw(Tensor(x))
        assert res.output.shape == (c, h, w)
        assert res.w_ca.shape == (c,)
        assert res.w_sa.shape == (1, h, w)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(4)
        arw = AdaptiveRadarWeighting(3, rng)
        x = rng.standard_normal((2, 3, 4, 4))
        batched = arw(Tensor(x))
        for i in range(2):
            single = arw(Tensor(x[i]))
            np.testing.assert_allclose(batched.output.data[i], single.output.data, atol=1e-12)

    def test_gate_lower_bound_and_attenuation(self):
        rng = np.random.default_rng(5)
        arw = AdaptiveRadarWeighting(4, rng)
        arw.spatial.weight.data[:] = rng.standard_normal((1, 4, 1, 1))
        x = rng.standard_normal((4, 8, 8)) * 4
        res = arw(Tensor(x))
        w_sa = res.w_sa.data
        assert w_sa.min() >= -GELU_FLOOR
        f_cw = res.output.data / np.where(w_sa == 0, 1.0, w_sa)  # recover pre-gate feature
        small = np.abs(w_sa[0]) <= GELU_FLOOR
        if small.any():
            bound = GELU_FLOOR * np.abs(f_cw).max()
            assert np.abs(res.output.data[:, small]).max() <= bound + 1e-12

    def test_channel_mismatch_rejected(self):
        rng = np.random.default_rng(6)
        arw = AdaptiveRadarWeighting(4, rng)
        with pytest.raises(nd.ShapeError, match="channels"):
            arw(Tensor(np.zeros((3, 5, 5))))

    def test_grad_check_whole_module(self):
        rng = np.random.default_rng(7)
        arw = AdaptiveRadarWeighting(3, rng)
        arw.spatial.weight.data[:] = rng.standard_normal((1, 3, 1, 1))
        x = Tensor(rng.standard_normal((3, 4, 4)))

        def fn(x, wp, bp, ws, bs):
            arw.proj.weight, arw.proj.bias = wp, bp
            arw.spatial.weight, arw.spatial.bias = ws, bs
            return arw(x).output

        err = nd.grad_check(
            fn, [x, arw.proj.weight, arw.proj.bias, arw.spatial.weight, arw.spatial.bias]
        )
        assert err <= 1e-4
