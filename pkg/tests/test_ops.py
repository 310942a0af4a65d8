"""
Convolution, pooling, dense, concat and loss ops.

The *_oracle functions are direct nested-loop implementations, kept
independent of the vectorised kernels in vcnet.core.ops.
"""
import math

import numpy as np
import pytest

from vcnet.core.errors import LabelError, ShapeError
from vcnet.core.gradcheck import check_gradients
from vcnet.core.ops import (ConvSpec, channel_reduce, concat_channels, conv2d, dense, depthwise_separable,
                            depthwise_separable_parameter_count, pool, softmax_cross_entropy,
                            upsample_nearest)
from vcnet.core.tensor import Tape, Tensor, mul, sum_all

ORACLE_CASES = 200


# =============================================================================
# Oracles
# =============================================================================

def conv2d_oracle(x, w, b, stride, pad, groups):
    n, c, h, wd = x.shape
    k, cg, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    kg = k // groups
    out = np.zeros((n, k, oh, ow))
    for ni in range(n):
        for ki in range(k):
            g = ki // kg
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0 if b is None else b[ki]
                    for ci in range(cg):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[ni, g * cg + ci, oy * stride + i, ox * stride + j] * w[ki, ci, i, j]
                    out[ni, ki, oy, ox] = acc
    return out


def pool_oracle(x, kind, window, stride):
    n, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for ni in range(n):
        for ci in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    vals = [x[ni, ci, oy * stride + i, ox * stride + j]
                            for i in range(window) for j in range(window)]
                    out[ni, ci, oy, ox] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def random_conv_case(rng):
    groups = int(rng.integers(1, 4))
    cg = int(rng.integers(1, 3))
    kg = int(rng.integers(1, 3))
    kh, kw = (int(v) for v in rng.choice([1, 2, 3, 5], size=2))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 3))
    h = int(rng.integers(max(1, kh - 2 * pad), 8))
    w = int(rng.integers(max(1, kw - 2 * pad), 8))
    x = rng.normal(size=(int(rng.integers(1, 3)), groups * cg, h, w))
    weight = rng.normal(size=(groups * kg, cg, kh, kw))
    bias = rng.normal(size=groups * kg) if rng.random() < 0.5 else None
    return x, weight, bias, ConvSpec(kh, kw, stride=stride, padding=pad, groups=groups)


# =============================================================================
# conv2d
# =============================================================================

class TestConv2d:

    def test_sum_of_nine_ones(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), ConvSpec(3, 3))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_zero_kernel_gives_bias(self, rng):
        out = conv2d(Tensor(rng.normal(size=(2, 3, 5, 5))), Tensor(np.zeros((4, 3, 3, 3))),
                     Tensor([1.0, 2.0, 3.0, 4.0]), ConvSpec(3, 3, padding=1))
        for k in range(4):
            np.testing.assert_array_equal(out.data[:, k], np.full((2, 5, 5), k + 1.0))

    def test_strided_padded_matches_oracle(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), None, ConvSpec(3, 3, stride=2, padding=1))
        np.testing.assert_allclose(out.data, conv2d_oracle(x, w, None, 2, 1, 1), atol=1e-12, rtol=0)

    def test_random_shapes_match_oracle(self, rng):
        for _ in range(ORACLE_CASES):
            x, w, b, spec = random_conv_case(rng)
            out = conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b), spec)
            expected = conv2d_oracle(x, w, b, spec.stride, spec.padding, spec.groups)
            assert out.shape == expected.shape
            np.testing.assert_allclose(out.data, expected, atol=1e-12, rtol=0)

    @pytest.mark.parametrize("kernel", [1, 3, 5, 7])
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("pad", [0, 1, 2, 3])
    def test_output_shape_formula(self, kernel, stride, pad):
        out = conv2d(Tensor(np.zeros((1, 1, 9, 10))), Tensor(np.zeros((2, 1, kernel, kernel))), None,
                     ConvSpec.square(kernel, stride=stride, padding=pad))
        assert out.shape == (1, 2, (9 + 2 * pad - kernel) // stride + 1, (10 + 2 * pad - kernel) // stride + 1)

    def test_linearity(self, rng):
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        spec = ConvSpec(3, 3, padding=1)
        x, y = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(2, 2, 6, 6))
        lhs = conv2d(Tensor(2.5 * x - 0.7 * y), w, None, spec).data
        rhs = 2.5 * conv2d(Tensor(x), w, None, spec).data - 0.7 * conv2d(Tensor(y), w, None, spec).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10, rtol=0)

    def test_gradients(self, rng):
        values = {"x": rng.normal(size=(2, 4, 6, 5)), "w": rng.normal(size=(4, 2, 3, 2)), "b": rng.normal(size=4)}
        weights = Tensor(rng.normal(size=(2, 4, 3, 3)))
        spec = ConvSpec(3, 2, stride=2, padding=1, groups=2)
        report = check_gradients("conv2d", lambda p: sum_all(mul(conv2d(p["x"], p["w"], p["b"], spec), weights)),
                                 values, rng)
        assert report.passed, report

    def test_groups_must_divide_channels(self, rng):
        with pytest.raises(ShapeError, match="input channels"):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))), None, ConvSpec(3, 3, groups=2))

    def test_weight_dimension_named(self):
        with pytest.raises(ShapeError, match="input-channel dimension"):
            conv2d(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((2, 3, 3, 3))), None, ConvSpec(3, 3))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError, match="height"):
            conv2d(Tensor(np.zeros((1, 1, 2, 5))), Tensor(np.zeros((1, 1, 3, 3))), None, ConvSpec(3, 3))

    def test_invalid_spec(self):
        with pytest.raises(ShapeError):
            ConvSpec(3, 3, stride=0)
        with pytest.raises(ShapeError):
            ConvSpec(3, 3, padding=-1)


class TestDepthwiseSeparable:

    def test_identity_kernels_reproduce_input(self, rng):
        x = rng.normal(size=(1, 1, 5, 5))
        dw = np.zeros((1, 1, 3, 3))
        dw[0, 0, 1, 1] = 1.0
        out = depthwise_separable(Tensor(x), Tensor(dw), Tensor(np.ones((1, 1, 1, 1))), spec=ConvSpec(3, 3, groups=1))
        np.testing.assert_array_equal(out.data, x[:, :, 1:-1, 1:-1])

    def test_parameter_count(self):
        assert depthwise_separable_parameter_count(8, 16, 3, 3) == 200
        assert depthwise_separable_parameter_count(8, 16, 3, 3, bias=True) == 224

    def test_random_shapes_match_composed_oracle(self, rng):
        for _ in range(ORACLE_CASES):
            c = int(rng.integers(1, 4))
            k = int(rng.integers(1, 4))
            kernel = int(rng.choice([1, 3, 5]))
            pad = int(rng.integers(0, kernel // 2 + 1))
            stride = int(rng.integers(1, 3))
            h, w = (int(v) for v in rng.integers(kernel, 8, size=2))
            x = rng.normal(size=(int(rng.integers(1, 3)), c, h, w))
            dw, pw = rng.normal(size=(c, 1, kernel, kernel)), rng.normal(size=(k, c, 1, 1))
            db, pb = rng.normal(size=c), rng.normal(size=k)
            out = depthwise_separable(Tensor(x), Tensor(dw), Tensor(pw), (Tensor(db), Tensor(pb)),
                                      ConvSpec.square(kernel, stride=stride, padding=pad, groups=c))
            hidden = conv2d_oracle(x, dw, db, stride, pad, c)
            np.testing.assert_allclose(out.data, conv2d_oracle(hidden, pw, pb, 1, 0, 1), atol=1e-12, rtol=0)

    def test_depthwise_stage_needs_groups_equal_channels(self, rng):
        with pytest.raises(ShapeError, match="groups == channels"):
            depthwise_separable(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))),
                                Tensor(np.zeros((1, 2, 1, 1))), spec=ConvSpec(3, 3, groups=1))

    def test_pointwise_must_be_1x1(self):
        with pytest.raises(ShapeError, match="pointwise"):
            depthwise_separable(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))),
                                Tensor(np.zeros((1, 2, 3, 3))), spec=ConvSpec(3, 3, groups=2))


# =============================================================================
# Pooling
# =============================================================================

class TestPool:

    def test_global_avg_of_constant(self):
        out = pool(Tensor(np.full((2, 3, 4, 5), 1.75)), "global_avg")
        assert out.shape == (2, 3, 1, 1)
        np.testing.assert_allclose(out.data, 1.75)

    def test_global_max(self):
        assert pool(Tensor([[[[1.0, 5.0], [3.0, 2.0]]]]), "global_max").item() == 5.0

    def test_random_shapes_match_oracle(self, rng):
        for _ in range(ORACLE_CASES):
            kind = "max" if rng.random() < 0.5 else "avg"
            window = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            h, w = (int(v) for v in rng.integers(window, 8, size=2))
            x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 4)), h, w))
            np.testing.assert_allclose(pool(Tensor(x), kind, window, stride).data,
                                       pool_oracle(x, kind, window, stride), atol=1e-12, rtol=0)

    def test_global_pools_match_numpy(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        np.testing.assert_allclose(pool(Tensor(x), "global_avg").data[..., 0, 0], x.mean(axis=(2, 3)), atol=1e-12)
        np.testing.assert_array_equal(pool(Tensor(x), "global_max").data[..., 0, 0], x.max(axis=(2, 3)))

    def test_avg_pool_gradient_is_one_over_window(self):
        with Tape() as tape:
            x = tape.watch(np.arange(16.0).reshape(1, 1, 4, 4))
            tape.backward(sum_all(pool(x, "avg", 2, 2)))
        np.testing.assert_allclose(tape.gradient(x).data, np.full((1, 1, 4, 4), 0.25))

    def test_max_pool_gradient_routes_to_argmax(self):
        with Tape() as tape:
            x = tape.watch([[[[1.0, 5.0], [3.0, 2.0]]]])
            tape.backward(sum_all(pool(x, "max", 2, 2)))
        np.testing.assert_array_equal(tape.gradient(x).data, [[[[0.0, 1.0], [0.0, 0.0]]]])

    def test_pool_gradients(self, rng):
        values = {"x": rng.normal(size=(2, 2, 5, 5))}
        for kind, window, stride in (("avg", 3, 2), ("max", 2, 1), ("global_avg", None, None), ("global_max", None, None)):
            weights = Tensor(rng.normal(size=pool(Tensor(values["x"]), kind, window, stride).shape))
            report = check_gradients(kind, lambda p: sum_all(mul(pool(p["x"], kind, window, stride), weights)),
                                     values, rng)
            assert report.passed, report

    def test_empty_window_rejected(self):
        with pytest.raises(ShapeError, match="empty"):
            pool(Tensor(np.zeros((1, 1, 4, 4))), "max", 0)

    def test_window_larger_than_extent_rejected(self):
        with pytest.raises(ShapeError, match="exceeds"):
            pool(Tensor(np.zeros((1, 1, 2, 2))), "avg", 3)

    def test_unknown_kind(self):
        with pytest.raises(ShapeError):
            pool(Tensor(np.zeros((1, 1, 2, 2))), "median", 2)


class TestResampling:

    def test_channel_reduce(self, rng):
        x = rng.normal(size=(2, 4, 3, 3))
        np.testing.assert_allclose(channel_reduce(Tensor(x), "mean").data, x.mean(axis=1, keepdims=True))
        np.testing.assert_array_equal(channel_reduce(Tensor(x), "max").data, x.max(axis=1, keepdims=True))

    def test_upsample_nearest_replicates(self):
        x = np.arange(4.0).reshape(1, 1, 2, 2)
        out = upsample_nearest(Tensor(x), (4, 4)).data
        np.testing.assert_array_equal(out[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])

    def test_upsample_source_index_is_floor(self):
        out = upsample_nearest(Tensor(np.arange(3.0).reshape(1, 1, 1, 3)), (1, 5)).data
        np.testing.assert_array_equal(out[0, 0, 0], [0, 0, 1, 1, 2])

    def test_upsample_gradient_counts_copies(self):
        with Tape() as tape:
            x = tape.watch(np.ones((1, 1, 2, 2)))
            tape.backward(sum_all(upsample_nearest(x, (4, 6))))
        np.testing.assert_array_equal(tape.gradient(x).data, np.full((1, 1, 2, 2), 6.0))


# =============================================================================
# Dense, concat, loss
# =============================================================================

class TestDense:

    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)

    def test_small_example(self):
        assert dense(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([0.5])).item() == 3.5

    def test_gradients(self, rng):
        values = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 2)), "b": rng.normal(size=2)}
        weights = Tensor(rng.normal(size=(3, 2)))
        report = check_gradients("dense", lambda p: sum_all(mul(dense(p["x"], p["w"], p["b"]), weights)),
                                 values, rng, tolerance=1e-7)
        assert report.passed, report

    def test_inner_dimension_mismatch(self):
        with pytest.raises(ShapeError, match="inner dimension"):
            dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestConcat:

    def test_single_input_is_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        np.testing.assert_array_equal(concat_channels([Tensor(x)]).data, x)

    def test_channel_extent(self):
        out = concat_channels([Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.zeros((2, 5, 4, 4)))])
        assert out.shape == (2, 8, 4, 4)

    def test_backward_of_sum_gives_ones(self):
        with Tape() as tape:
            a = tape.watch(np.zeros((1, 2, 3, 3)))
            b = tape.watch(np.zeros((1, 1, 3, 3)))
            tape.backward(sum_all(concat_channels([a, b])))
        np.testing.assert_array_equal(tape.gradient(a).data, np.ones((1, 2, 3, 3)))
        np.testing.assert_array_equal(tape.gradient(b).data, np.ones((1, 1, 3, 3)))

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError, match="spatial"):
            concat_channels([Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 3, 4)))])


class TestSoftmaxCrossEntropy:

    def test_uniform_logits(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((4, 10))), [0, 3, 5, 9])
        assert loss.shape == ()
        assert loss.item() == pytest.approx(math.log(10), abs=1e-12)

    def test_large_margin_goes_to_zero(self):
        logits = np.zeros((1, 3))
        logits[0, 1] = 1000.0
        assert softmax_cross_entropy(Tensor(logits), [1]).item() == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.filterwarnings("error::DeprecationWarning")
    def test_gradient_is_softmax_minus_onehot(self, rng):
        logits = rng.normal(size=(3, 4))
        labels = np.array([0, 2, 3])
        with Tape() as tape:
            x = tape.watch(logits)
            tape.backward(softmax_cross_entropy(x, labels))
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(3), labels] -= 1.0
        np.testing.assert_allclose(tape.gradient(x).data, p / 3, atol=1e-12)

    def test_finite_differences(self, rng):
        labels = np.array([1, 0])
        report = check_gradients("ce", lambda p: softmax_cross_entropy(p["z"], labels),
                                 {"z": rng.normal(size=(2, 5))}, rng)
        assert report.passed

    def test_out_of_range_label(self):
        with pytest.raises(LabelError, match="label 10"):
            softmax_cross_entropy(Tensor(np.zeros((2, 10))), [1, 10])
