import numpy as np
import pytest

from oracles import finite_difference, max_rel_error, naive_conv2d
from sortconv import ConfigurationError, ContractError, Parameter, ShapeError, Tensor
from sortconv._config import deterministic, no_grad
from sortconv.tensor import (
    add, avgpool2d, conv2d_strided, forward_op, global_avgpool, global_maxpool, matmul,
    maxpool2d, mul, mul_scalar, relu, reshape, softmax_cross_entropy, tensor_sum,
)


def _loss_fn(build, arrays, weights):
    def fn():
        out = build(*[Tensor(a) for a in arrays])
        return float((out.data * weights).sum())
    return fn


def grad_check(build, arrays, rng, step=1e-5):
    """Analytic gradient of sum(build(*arrays) * G) against central differences."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    weights = rng.normal(size=out.shape)
    tensor_sum(mul(out, Tensor(weights))).backward()
    numeric = finite_difference(_loss_fn(build, arrays, weights), arrays, step)
    return max(max_rel_error(t.grad, g) for t, g in zip(tensors, numeric))


class TestForward:
    def test_add(self):
        np.testing.assert_array_equal(forward_op("add", Tensor([1, 2]), Tensor([3, 4])).data,
                                      [4, 6])

    def test_relu(self):
        np.testing.assert_array_equal(forward_op("relu", Tensor([-1, 0, 2])).data, [0, 0, 2])

    def test_matmul_ones(self):
        out = forward_op("matmul", Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
        np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError, match="unknown op kind"):
            forward_op("conv3d", Tensor([1.0]))

    def test_matmul_shape_mismatch_names_dims(self):
        with pytest.raises(ShapeError, match="3"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_add_broadcast_mismatch(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_mul_scalar_and_reshape(self):
        x = Tensor(np.arange(6.0))
        np.testing.assert_array_equal(reshape(mul_scalar(x, 2.0), (2, 3)).data,
                                      np.arange(6.0).reshape(2, 3) * 2)

    def test_reshape_bad_size(self):
        with pytest.raises(ShapeError):
            reshape(Tensor(np.ones(6)), (4, 2))


class TestConv:
    def test_identity_diagonal(self):
        x = Tensor(np.eye(3)[None, None])
        out = conv2d_strided(x, Parameter(np.ones((1, 1, 3, 3))), Parameter(np.zeros(1)))
        np.testing.assert_array_equal(out.data, [[[[3.0]]]])

    def test_constant_input(self, rng):
        w = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=2)
        out = conv2d_strided(Tensor(np.full((1, 3, 6, 6), 0.7)), Parameter(w), Parameter(b))
        expect = 0.7 * w.sum(axis=(1, 2, 3)) + b
        np.testing.assert_allclose(out.data, np.broadcast_to(expect[None, :, None, None],
                                                             out.shape), atol=1e-13)

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 2, 5), (3, 0, 3)])
    def test_naive_loop_oracle(self, rng, stride, padding, k):
        x = rng.normal(size=(2, 3, 5, 7))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        out = conv2d_strided(Tensor(x), Parameter(w), Parameter(b), stride, padding)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, padding),
                                   rtol=0, atol=1e-12)

    def test_deterministic_path_matches(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        with deterministic():
            out = conv2d_strided(Tensor(x), Parameter(w), padding=1)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, None, 1, 1), atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError, match="odd"):
            conv2d_strided(Tensor(np.ones((1, 1, 4, 4))), Parameter(np.ones((1, 1, 2, 2))))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d_strided(Tensor(np.ones((1, 2, 4, 4))), Parameter(np.ones((1, 3, 3, 3))))

    def test_inexact_stride_contract(self):
        with pytest.raises(ContractError, match="tile"):
            conv2d_strided(Tensor(np.ones((1, 1, 8, 8))), Parameter(np.ones((1, 1, 3, 3))),
                           stride=3, exact=True)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            conv2d_strided(Tensor(np.ones((1, 1, 2, 2))), Parameter(np.ones((1, 1, 3, 3))))


class TestPooling:
    def test_global_avgpool(self):
        out = global_avgpool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 2.5

    def test_global_avgpool_rot90(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        with deterministic():
            a = global_avgpool(Tensor(x)).data
            b = global_avgpool(Tensor(np.rot90(x, 1, axes=(2, 3)).copy())).data
        np.testing.assert_array_equal(a, b)

    def test_global_maxpool(self):
        out = global_maxpool(Tensor(np.array([[[[1.0, 5.0], [3.0, 4.0]]]])))
        assert out.data.item() == 5.0

    def test_maxpool_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(maxpool2d(Tensor(x)).data, [[[[5, 7], [13, 15]]]])

    def test_maxpool_first_argmax_gets_gradient(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        tensor_sum(maxpool2d(x)).backward()
        np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])

    def test_avgpool_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(avgpool2d(Tensor(x)).data, [[[[2.5, 4.5], [10.5, 12.5]]]])


class TestBackward:
    def test_square_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        tensor_sum(mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2, 4, 6])

    def test_relu_subgradient(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        tensor_sum(relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0, 1])

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError, match="scalar"):
            mul(x, x).backward()

    def test_shared_subexpression_accumulates(self, rng):
        a = rng.normal(size=(3, 4))

        def build(t):
            h = relu(t)
            return add(mul(h, h), mul_scalar(h, 3.0))

        assert grad_check(build, [np.abs(a) + 0.1], rng) < 1e-4

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert y._backward is None and not y.requires_grad

    def test_each_node_visited_once(self):
        x = Tensor([2.0], requires_grad=True)
        y = mul(x, x)
        z = add(y, y)
        tensor_sum(add(z, z)).backward()
        np.testing.assert_array_equal(x.grad, [16.0])

    def test_conv_gradient_spec_example(self, rng):
        # 1x1x6x6 input, 3x3 kernel, step 1e-4.
        x = rng.normal(size=(1, 1, 6, 6))
        w = rng.normal(size=(1, 1, 3, 3))
        err = grad_check(lambda a, b: conv2d_strided(a, b, padding=1), [x, w], rng, step=1e-4)
        assert err < 1e-5


@pytest.mark.parametrize("rep", range(20))
class TestGradients:
    def test_conv2d(self, rep):
        rng = np.random.default_rng(rep)
        x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        stride, pad = (1, 1) if rep % 2 else (2, 0)
        err = grad_check(lambda a, k, c: conv2d_strided(a, k, c, stride, pad), [x, w, b], rng)
        assert err < 1e-4

    def test_pooling(self, rep):
        rng = np.random.default_rng(100 + rep)
        # Distinct values keep max pooling away from ties.
        x = rng.permutation(64).reshape(1, 1, 8, 8) / 7.0 + rng.uniform(0, 1e-3, (1, 1, 8, 8))
        assert grad_check(lambda a: maxpool2d(a), [x], rng) < 1e-4
        assert grad_check(lambda a: avgpool2d(a), [x], rng) < 1e-4
        assert grad_check(lambda a: global_avgpool(a), [x], rng) < 1e-4

    def test_loss(self, rep):
        rng = np.random.default_rng(200 + rep)
        logits = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, 5)
        assert grad_check(lambda z: softmax_cross_entropy(z, labels), [logits], rng) < 1e-4

    def test_dense(self, rep):
        rng = np.random.default_rng(300 + rep)
        a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        assert grad_check(lambda x, y, z: add(matmul(x, y), z), [a, b, c], rng) < 1e-4
        pos = np.abs(a) + 0.05
        assert grad_check(lambda x: relu(reshape(x, (12,))), [pos * np.sign(a)], rng) < 1e-4
