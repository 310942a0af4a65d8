"""Tape, Tensor and the elementwise / reduction ops."""
import numpy as np
import pytest

from vcnet.core.errors import ShapeError, VCNetError
from vcnet.core.gradcheck import check_gradients
from vcnet.core.tensor import (BACKWARD_RULES, Tape, Tensor, add, backward, elementwise, mean, mul, relu,
                               reshape, scale, sigmoid, softmax, sum_all)


class TestTensor:

    def test_data_is_float64_and_read_only(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.shape == (2, 2) and t.size == 4
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0

    def test_constructor_copies_input(self):
        src = np.ones(3)
        t = Tensor(src)
        src[0] = 7.0
        assert t.data[0] == 1.0

    def test_operators(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
        np.testing.assert_array_equal((a + b).data, [4.0, 7.0])
        np.testing.assert_array_equal((b - a).data, [2.0, 3.0])
        np.testing.assert_array_equal((a * b).data, [3.0, 10.0])
        np.testing.assert_array_equal((2 * a).data, [2.0, 4.0])
        np.testing.assert_array_equal((-a).data, [-1.0, -2.0])


class TestElementwise:

    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_relu_gradient_is_zero_at_zero(self):
        with Tape() as tape:
            x = tape.watch([-1.0, 0.0, 2.0])
            tape.backward(sum_all(relu(x)))
        np.testing.assert_array_equal(tape.gradient(x).data, [0.0, 0.0, 1.0])

    def test_sigmoid(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5
        big = sigmoid(Tensor([-800.0, 800.0])).data
        assert np.all(np.isfinite(big))
        np.testing.assert_allclose(big, [0.0, 1.0], atol=1e-300)

    def test_broadcast_add_gradient_sums_over_broadcast_axes(self):
        with Tape() as tape:
            a = tape.watch(np.ones((2, 3)))
            b = tape.watch(np.ones(3))
            tape.backward(sum_all(add(a, b)))
        np.testing.assert_array_equal(tape.gradient(b).data, [2.0, 2.0, 2.0])
        np.testing.assert_array_equal(tape.gradient(a).data, np.ones((2, 3)))

    def test_non_broadcastable_shapes_rejected(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2,\)"):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_mul_gradient_matches_finite_differences(self, rng):
        values = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 3))}
        report = check_gradients("mul", lambda p: sum_all(mul(p["a"], p["b"])), values, rng, tolerance=1e-7)
        assert report.passed
        assert report.checked == 12

    def test_sigmoid_gradient(self, rng):
        values = {"x": rng.normal(size=(4,))}
        assert check_gradients("sigmoid", lambda p: sum_all(sigmoid(p["x"])), values, rng).passed

    def test_elementwise_dispatch(self):
        a, b = Tensor([2.0]), Tensor([3.0])
        assert elementwise("add", a, b).item() == 5.0
        assert elementwise("sub", a, b).item() == -1.0
        assert elementwise("mul", a, b).item() == 6.0
        assert elementwise("relu", Tensor([-2.0])).item() == 0.0
        assert elementwise("scale", a, factor=0.5).item() == 1.0

    def test_elementwise_rejects_bad_arity_and_unknown_ops(self):
        with pytest.raises(ShapeError):
            elementwise("add", Tensor([1.0]))
        with pytest.raises(ShapeError):
            elementwise("scale", Tensor([1.0]))
        with pytest.raises(VCNetError):
            elementwise("tanh", Tensor([1.0]))


class TestReductions:

    def test_softmax_rows_sum_to_one(self, rng):
        y = softmax(Tensor(rng.normal(size=(3, 5)) * 50), axis=1).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0)

    def test_softmax_gradient(self, rng):
        values = {"x": rng.normal(size=(2, 4))}
        weights = Tensor(rng.normal(size=(2, 4)))
        report = check_gradients("softmax", lambda p: sum_all(mul(softmax(p["x"], axis=1), weights)), values, rng)
        assert report.passed

    def test_mean_and_reshape(self):
        with Tape() as tape:
            x = tape.watch(np.arange(6.0))
            loss = mean(reshape(x, (2, 3)))
            tape.backward(loss)
        assert loss.shape == ()
        assert loss.item() == 2.5
        np.testing.assert_allclose(tape.gradient(x).data, np.full(6, 1 / 6))

    @pytest.mark.filterwarnings("error::DeprecationWarning")
    def test_scalar_results_stay_zero_dimensional(self, rng):
        with Tape() as tape:
            x = tape.watch(rng.normal(size=(2, 3)))
            total = sum_all(x)
            loss = scale(add(total, mean(x)), 2.0)
            tape.backward(loss)
        assert total.shape == () and loss.shape == ()
        assert tape.gradient(total).shape == ()
        np.testing.assert_allclose(tape.gradient(x).data, np.full((2, 3), 2.0 + 2.0 / 6))

    def test_reshape_size_mismatch(self):
        with pytest.raises(ShapeError):
            reshape(Tensor(np.ones(6)), (4, 2))


class TestTape:

    def test_identity_loss_gradient_is_one(self):
        with Tape() as tape:
            x = tape.watch(3.0)
            tape.backward(x)
        assert tape.gradient(x).item() == 1.0

    def test_fan_out_accumulates(self):
        with Tape() as tape:
            x = tape.watch(3.0)
            tape.backward(add(x, x))
        assert tape.gradient(x).item() == 2.0

    def test_module_level_backward(self):
        with Tape() as tape:
            x = tape.watch(2.0)
            backward(scale(x, 4.0))
        assert tape.gradient(x).item() == 4.0

    def test_non_scalar_loss_rejected(self):
        with Tape() as tape:
            x = tape.watch(np.ones(3))
            with pytest.raises(ShapeError, match="scalar"):
                tape.backward(scale(x, 2.0))

    def test_loss_from_another_tape_rejected(self):
        with Tape() as first:
            loss = sum_all(first.watch(np.ones(2)))
        with Tape() as second:
            with pytest.raises(VCNetError):
                second.backward(loss)

    def test_untracked_operations_record_nothing(self):
        with Tape() as tape:
            sum_all(relu(Tensor(np.ones(3))))
        assert tape.nodes == []

    def test_unreached_tensor_has_zero_gradient(self):
        with Tape() as tape:
            x = tape.watch(np.ones(2))
            y = tape.watch(np.ones((2, 2)))
            tape.backward(sum_all(x))
        np.testing.assert_array_equal(tape.gradient(y).data, np.zeros((2, 2)))

    def test_gradient_shapes_match_values(self, rng):
        with Tape() as tape:
            a = tape.watch(rng.normal(size=(2, 3)))
            b = tape.watch(rng.normal(size=(3,)))
            tape.backward(sum_all(mul(a, b)))
        assert tape.gradient(a).shape == (2, 3)
        assert tape.gradient(b).shape == (3,)

    def test_nodes_follow_inputs(self, rng):
        with Tape() as tape:
            x = tape.watch(rng.normal(size=3))
            sum_all(relu(scale(x, 2.0)))
        produced = set()
        watched = {x.grad_id}
        for node in tape.nodes:
            assert all(h is None or h in produced | watched for h in node.inputs)
            produced.add(node.output)

    def test_deterministic_gradients(self, rng):
        values = rng.normal(size=(4, 4))

        def run():
            with Tape() as tape:
                x = tape.watch(values)
                tape.backward(sum_all(sigmoid(mul(x, x))))
            return tape.gradient(x).data.tobytes()
        assert run() == run()

    def test_branch_signature_tracks_relu_masks(self):
        def signature(v):
            with Tape() as tape:
                relu(Tensor(v))
            return tape.branch_signature()
        assert signature([1.0, -1.0]) == signature([2.0, -3.0])
        assert signature([1.0, -1.0]) != signature([-1.0, 1.0])

    def test_every_op_has_a_backward_rule(self):
        for op in ("add", "sub", "mul", "scale", "relu", "sigmoid", "reshape", "sum_all", "mean",
                   "softmax", "conv2d", "global_avg", "global_max", "avg_pool", "max_pool",
                   "channel_mean", "channel_max", "upsample_nearest", "dense", "concat_channels",
                   "softmax_cross_entropy"):
            assert op in BACKWARD_RULES
