import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ffkd.autodiff import Tensor, default_dtype, functional as F, grad_check
from ffkd.nn import (
    BatchNorm2d,
    Conv2d,
    MBConv,
    SeparableConvBlock,
    SqueezeExcite,
    dense_param_count,
    depthwise_separable_conv,
    separable_param_count,
)


def weighted_sum(module, x, seed=99):
    c = np.random.default_rng(seed).normal(size=module(x).shape)
    return lambda: F.sum(F.mul(module(x), c))


class TestDepthwiseSeparable:
    def test_identity_kernels_pass_input_through(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 6, 6)))
        dw = np.zeros((3, 3, 3))
        dw[:, 1, 1] = 1
        pw = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_allclose(depthwise_separable_conv(x, dw, pw).data, x.data, atol=1e-6)

    def test_stride_two_halves_spatial(self):
        x = Tensor(np.zeros((1, 4, 8, 8)))
        rng = np.random.default_rng(0)
        y = depthwise_separable_conv(x, rng.normal(size=(4, 3, 3)), rng.normal(size=(5, 4, 1, 1)), stride=2)
        assert y.shape == (1, 5, 4, 4)

    def test_odd_size_uses_ceil(self):
        x = Tensor(np.zeros((1, 2, 7, 7)))
        y = depthwise_separable_conv(x, np.zeros((2, 3, 3)), np.zeros((2, 2, 1, 1)), stride=2)
        assert y.shape[2:] == (4, 4)

    def test_channel_mismatch_raises(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        with pytest.raises(ValueError, match="channel mismatch"):
            depthwise_separable_conv(x, np.zeros((2, 3, 3)), np.zeros((2, 2, 1, 1)))

    @pytest.mark.parametrize("seed", range(5))
    def test_equals_composed_dense_convolution(self, seed):
        """The dense kernel W[o, c] = P[o, c] * D[c] is the same linear map."""
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 3, 7, 7)))
        dw = rng.normal(size=(3, 3, 3))
        pw = rng.normal(size=(4, 3, 1, 1))
        dense = pw[:, :, 0, 0][:, :, None, None] * dw[None]
        got = depthwise_separable_conv(x, dw, pw).data
        want = F.conv2d(x, dense).data
        np.testing.assert_allclose(got, want, atol=1e-5)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 64), st.integers(2, 64), st.sampled_from([3, 5, 7]))
    def test_fewer_parameters_than_dense(self, cin, cout, k):
        assert separable_param_count(cin, cout, k) < dense_param_count(cin, cout, k)


class TestSqueezeExcite:
    def test_saturated_open_gate_is_identity(self):
        se = SqueezeExcite(8)
        se.b2.data[:] = 40.0
        x = Tensor(np.random.default_rng(0).normal(size=(2, 8, 4, 4)))
        np.testing.assert_allclose(se(x).data, x.data, rtol=1e-6)

    def test_saturated_closed_gate_zeroes(self):
        se = SqueezeExcite(8)
        se.b2.data[:] = -40.0
        x = Tensor(np.random.default_rng(0).normal(size=(2, 8, 4, 4)))
        assert np.abs(se(x).data).max() < 1e-6

    def test_gate_matches_hand_rolled_mlp(self):
        rng = np.random.default_rng(1)
        se = SqueezeExcite(8, rng=rng)
        for p in (se.b1, se.b2):
            p.data[:] = rng.normal(size=p.shape)
        means = rng.normal(size=(2, 8))
        x = Tensor(np.broadcast_to(means[:, :, None, None], (2, 8, 3, 3)).copy())
        hidden = np.maximum(means @ se.w1.data + se.b1.data, 0)
        gate = 1 / (1 + np.exp(-(hidden @ se.w2.data + se.b2.data)))
        np.testing.assert_allclose(se.gate(x).data, gate, rtol=1e-5)
        np.testing.assert_allclose(se(x).data, x.data * gate[:, :, None, None], rtol=1e-5)

    def test_gate_in_open_unit_interval(self):
        se = SqueezeExcite(8, rng=np.random.default_rng(2))
        g = se.gate(Tensor(np.random.default_rng(3).normal(size=(3, 8, 4, 4)))).data
        assert ((g > 0) & (g < 1)).all()

    def test_invalid_reduction_width(self):
        with pytest.raises(ValueError):
            SqueezeExcite(8, width=0)
        with pytest.raises(ValueError):
            SqueezeExcite(8, width=9)

    def test_gradient_check_4x8x8(self):
        with default_dtype(np.float64):
            rng = np.random.default_rng(0)
            se = SqueezeExcite(4, width=2, rng=rng)
            x = Tensor(rng.normal(size=(1, 4, 8, 8)), requires_grad=True)
            rep = grad_check(weighted_sum(se, x), [x] + se.parameters())
        assert rep.passed, rep


class TestMBConv:
    def test_zero_weights_reduce_to_skip(self):
        blk = MBConv(4, 4, expand=2, stride=1)
        for p in blk.parameters():
            p.data[:] = 0
        x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 6, 6)))
        np.testing.assert_allclose(blk(x).data, x.data)

    def test_stride_two_has_no_skip_and_halves(self):
        blk = MBConv(4, 4, expand=2, stride=2)
        assert not blk.use_skip
        assert blk(Tensor(np.zeros((1, 4, 8, 8)))).shape == (1, 4, 4, 4)

    def test_channel_change_has_no_skip(self):
        assert not MBConv(4, 8, stride=1).use_skip

    def test_invalid_stride(self):
        with pytest.raises(ValueError):
            MBConv(4, 4, stride=3)

    def test_gradient_check(self):
        with default_dtype(np.float64):
            rng = np.random.default_rng(0)
            blk = MBConv(3, 3, expand=2, stride=1, rng=rng)
            x = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
            rep = grad_check(weighted_sum(blk, x), [x] + blk.parameters())
        assert rep.passed, rep


class TestBatchNormAndConv:
    def test_gradient_checks(self):
        with default_dtype(np.float64):
            rng = np.random.default_rng(1)
            x = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
            for mod in (BatchNorm2d(2), Conv2d(2, 3, 3, stride=2, rng=rng),
                        SeparableConvBlock(2, 3, rng=rng)):
                rep = grad_check(weighted_sum(mod, x), [x] + mod.parameters())
                assert rep.passed, (type(mod).__name__, rep)

    def test_batch_norm_eval_uses_running_stats(self):
        bn = BatchNorm2d(2)
        x = Tensor(np.random.default_rng(0).normal(3.0, 2.0, size=(8, 2, 4, 4)))
        for _ in range(60):
            bn(x)
        bn.eval()
        y = bn(x).data
        assert abs(y.mean()) < 0.05 and abs(y.std() - 1) < 0.05

    def test_eval_forward_is_batch_size_independent(self):
        rng = np.random.default_rng(4)
        blk = MBConv(4, 4, expand=2, rng=rng)
        blk.train()
        blk(Tensor(rng.normal(size=(4, 4, 6, 6))))
        blk.eval()
        x = rng.normal(size=(3, 4, 6, 6))
        full = blk(Tensor(x)).data
        single = blk(Tensor(x[1:2])).data
        np.testing.assert_allclose(full[1:2], single, atol=1e-6)

    def test_he_uniform_init_and_zero_bias(self):
        conv = Conv2d(4, 8, 3, rng=np.random.default_rng(0))
        bound = np.sqrt(6 / (4 * 9))
        assert np.abs(conv.weight.data).max() <= bound
        assert np.array_equal(conv.bias.data, np.zeros(8))
