"""Autodiff core: forward values, finite-difference gradients, tape rules."""

import numpy as np
import pytest

from magup import tensor as T
from magup.errors import ContractError, NumericsError, ShapeError
from magup.tensor import Tape, Tensor

from reference import finite_diff, naive_conv2d, naive_matmul

RNG = np.random.default_rng(2024)


def grad_of(build, arrays, index):
    """AD gradient of scalar build(*tensors) w.r.t. arrays[index]."""
    tensors = [Tensor(a) for a in arrays]
    with Tape() as tape:
        loss = build(*tensors)
        grads = tape.backward(loss)
    return grads[tensors[index]]


def check_op(build, arrays, tol=1e-4):
    """Compare AD and central-difference gradients for every input."""

    def scalar(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    for i in range(len(arrays)):
        ad = grad_of(build, arrays, i)
        fd = finite_diff(scalar, arrays, i)
        scale = max(1.0, np.abs(fd).max())
        assert np.abs(ad - fd).max() / scale < tol, f"input {i}"


def weighted_sum(x):
    # fixed random weights turn any output into a scalar with rich gradients
    w = np.cos(np.arange(x.size, dtype=np.float64)).reshape(x.shape)
    return T.reduce(T.mul(x, Tensor(w)), "sum")


class TestForwardValues:
    def test_add_broadcast(self):
        a, b = RNG.normal(size=(3, 4)), RNG.normal(size=(4,))
        assert np.array_equal(T.add(Tensor(a), Tensor(b)).data, a + b)

    def test_matmul_matches_naive(self):
        a, b = RNG.normal(size=(5, 3)), RNG.normal(size=(3, 4))
        got = T.matmul(Tensor(a), Tensor(b)).data
        assert np.abs(got - naive_matmul(a, b)).max() < 1e-12

    def test_conv2d_matches_naive(self):
        x = RNG.normal(size=(6, 5, 3))
        w = RNG.normal(size=(3, 3, 3, 4))
        got = T.conv2d(Tensor(x), Tensor(w)).data
        assert np.abs(got - naive_conv2d(x, w)).max() < 1e-12

    def test_softmax_rows_sum_to_one(self):
        x = RNG.normal(size=(4, 7)) * 50
        out = T.softmax(Tensor(x), axis=-1).data
        assert np.allclose(out.sum(axis=-1), 1.0)

    def test_clamp_values(self):
        x = np.array([-2.0, 0.3, 9.0])
        assert np.array_equal(T.clamp(Tensor(x), 0.0, 1.0).data, [0.0, 0.3, 1.0])

    def test_take_slice_getitem(self):
        x = RNG.normal(size=(5, 4))
        assert np.array_equal(Tensor(x)[1:3, 2:].data, x[1:3, 2:])

    def test_resize_nearest_identity(self):
        x = RNG.normal(size=(4, 4, 2))
        assert np.array_equal(T.resize_nearest(Tensor(x), (4, 4)).data, x)

    def test_operator_sugar(self):
        a, b = RNG.normal(size=(3,)), RNG.normal(size=(3,))
        ta, tb = Tensor(a), Tensor(b)
        assert np.allclose((ta + tb * 2 - tb / 2).data, a + b * 2 - b / 2)
        assert np.allclose((-ta).data, -a)
        assert np.allclose((ta**3).data, a**3)


class TestGradients:
    """Central-difference agreement for every differentiable op."""

    def test_add(self):
        check_op(lambda a, b: weighted_sum(T.add(a, b)),
                 [RNG.normal(size=(3, 4)), RNG.normal(size=(4,))])

    def test_sub(self):
        check_op(lambda a, b: weighted_sum(T.sub(a, b)),
                 [RNG.normal(size=(3, 4)), RNG.normal(size=(3, 1))])

    def test_mul(self):
        check_op(lambda a, b: weighted_sum(T.mul(a, b)),
                 [RNG.normal(size=(2, 5)), RNG.normal(size=(5,))])

    def test_div(self):
        check_op(lambda a, b: weighted_sum(T.div(a, b)),
                 [RNG.normal(size=(4,)), RNG.uniform(0.5, 2.0, (4,))])

    def test_neg(self):
        check_op(lambda a: weighted_sum(T.neg(a)), [RNG.normal(size=(6,))])

    def test_exp(self):
        check_op(lambda a: weighted_sum(T.exp(a)), [RNG.normal(size=(5,))])

    def test_log(self):
        check_op(lambda a: weighted_sum(T.log(a)), [RNG.uniform(0.2, 3.0, (5,))])

    def test_sqrt(self):
        check_op(lambda a: weighted_sum(T.sqrt(a)), [RNG.uniform(0.5, 4.0, (5,))])

    def test_power(self):
        check_op(lambda a: weighted_sum(T.power(a, 3.0)),
                 [RNG.uniform(0.5, 2.0, (5,))])

    def test_sigmoid(self):
        check_op(lambda a: weighted_sum(T.sigmoid(a)), [RNG.normal(size=(7,))])

    def test_tanh(self):
        check_op(lambda a: weighted_sum(T.tanh(a)), [RNG.normal(size=(7,))])

    def test_silu(self):
        check_op(lambda a: weighted_sum(T.silu(a)), [RNG.normal(size=(7,))])

    def test_softplus(self):
        check_op(lambda a: weighted_sum(T.softplus(a)), [RNG.normal(size=(7,))])

    def test_clamp_interior(self):
        # keep samples away from the clip edges: the kink has no derivative
        x = RNG.uniform(-0.8, 0.8, (6,))
        check_op(lambda a: weighted_sum(T.clamp(a, -1.0, 1.0)), [x])

    def test_clamp_blocks_outside(self):
        x = np.array([-3.0, 0.0, 3.0])
        g = grad_of(lambda a: T.reduce(T.clamp(a, -1.0, 1.0), "sum"), [x], 0)
        assert np.array_equal(g, [0.0, 1.0, 0.0])

    def test_matmul_2d(self):
        check_op(lambda a, b: weighted_sum(T.matmul(a, b)),
                 [RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))])

    def test_matmul_3d(self):
        check_op(lambda a, b: weighted_sum(T.matmul(a, b)),
                 [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(2, 4, 2))])

    def test_conv2d(self):
        check_op(
            lambda x, w, b: weighted_sum(T.conv2d(x, w, b)),
            [RNG.normal(size=(5, 4, 2)), RNG.normal(size=(3, 3, 2, 3)),
             RNG.normal(size=(3,))],
        )

    def test_softmax(self):
        check_op(lambda a: weighted_sum(T.softmax(a, axis=-1)),
                 [RNG.normal(size=(3, 5))])

    def test_reduce_sum_axis(self):
        check_op(lambda a: weighted_sum(T.reduce(a, "sum", axis=0)),
                 [RNG.normal(size=(3, 4))])

    def test_reduce_mean_keepdims(self):
        check_op(
            lambda a: weighted_sum(T.reduce(a, "mean", axis=(0, 2), keepdims=True)),
            [RNG.normal(size=(2, 3, 4))],
        )

    def test_reshape(self):
        check_op(lambda a: weighted_sum(T.reshape(a, (6, 2))),
                 [RNG.normal(size=(3, 4))])

    def test_transpose(self):
        check_op(lambda a: weighted_sum(T.transpose(a, (2, 0, 1))),
                 [RNG.normal(size=(2, 3, 4))])

    def test_concat(self):
        check_op(
            lambda a, b: weighted_sum(T.concat([a, b], axis=1)),
            [RNG.normal(size=(3, 2)), RNG.normal(size=(3, 4))],
        )

    def test_pad(self):
        check_op(lambda a: weighted_sum(T.pad(a, ((1, 2), (0, 1)))),
                 [RNG.normal(size=(3, 4))])

    def test_take_slice(self):
        check_op(lambda a: weighted_sum(a[1:4, 1:]), [RNG.normal(size=(5, 3))])

    def test_take_slice_int_row(self):
        check_op(lambda a: weighted_sum(a[2]), [RNG.normal(size=(5, 3))])

    def test_flip(self):
        check_op(lambda a: weighted_sum(T.flip(a, 0)), [RNG.normal(size=(4, 3))])

    def test_take_rows(self):
        idx = np.array([3, 0, 0, 2])
        check_op(lambda a: weighted_sum(T.take_rows(a, idx)),
                 [RNG.normal(size=(5, 3))])

    def test_scatter_add_rows(self):
        idx = np.array([1, 1, 4])
        check_op(
            lambda x, r: weighted_sum(T.scatter_add_rows(x, idx, r)),
            [RNG.normal(size=(5, 3)), RNG.normal(size=(3, 3))],
        )

    def test_resize_bilinear(self):
        check_op(lambda a: weighted_sum(T.resize_bilinear(a, (7, 5))),
                 [RNG.normal(size=(4, 3, 2))])

    def test_resize_nearest(self):
        check_op(lambda a: weighted_sum(T.resize_nearest(a, (6, 7))),
                 [RNG.normal(size=(3, 4))])


class TestTapeSemantics:
    def test_fanout_accumulates(self):
        x = Tensor(np.array([2.0, 3.0]))
        with Tape() as tape:
            y = T.reduce(T.add(T.mul(x, x), x), "sum")  # d/dx = 2x + 1
            g = tape.backward(y)
        assert np.allclose(g[x], [5.0, 7.0])

    def test_unreached_leaf_reads_zero(self):
        x, z = Tensor(np.ones(3)), Tensor(np.ones(4))
        with Tape() as tape:
            y = T.reduce(x, "sum")
            g = tape.backward(y)
        assert np.array_equal(g[z], np.zeros(4))
        assert z not in g

    def test_no_tape_records_nothing(self):
        x = Tensor(np.ones(3))
        y = T.mul(x, x)
        assert y.node is None

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3))
        with Tape() as tape:
            y = T.mul(x, x)
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_backward_requires_recorded_loss(self):
        x = Tensor(np.ones(3))
        y = T.reduce(x, "sum")  # built outside any tape
        with Tape() as tape:
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_detach_stops_gradient(self):
        x = Tensor(np.array([1.5, -0.5]))
        with Tape() as tape:
            y = T.reduce(T.mul(x.detach(), x), "sum")
            g = tape.backward(y)
        assert np.allclose(g[x], x.data)  # only the undetached factor

    def test_nested_tapes_are_independent(self):
        x = Tensor(np.array([2.0]))
        with Tape() as outer:
            a = T.mul(x, x)
            with Tape() as inner:
                b = T.reduce(T.mul(a, a), "sum")
                gi = inner.backward(b)
            # the inner graph extended both tapes; the outer one still works
            go = outer.backward(T.reduce(T.mul(a, Tensor(np.array([3.0]))), "sum"))
        assert np.allclose(gi[a], 2.0 * a.data)
        assert np.allclose(go[x], 2.0 * x.data * 3.0)


class TestErrorPaths:
    def test_nonfinite_creation_rejected(self):
        with pytest.raises(NumericsError):
            Tensor([1.0, np.inf])

    def test_nonfinite_op_output_rejected(self):
        big = Tensor(np.array([800.0]))
        with pytest.raises(NumericsError):
            T.exp(big)

    def test_log_of_negative_rejected(self):
        with pytest.raises(NumericsError):
            T.log(Tensor(np.array([-1.0])))

    def test_division_by_zero_rejected(self):
        with pytest.raises(NumericsError):
            T.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))

    def test_bad_broadcast_rejected(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((3, 2))), Tensor(np.ones((4,))))

    def test_bad_matmul_rejected(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 2))))

    def test_bad_reshape_rejected(self):
        with pytest.raises(ShapeError):
            T.reshape(Tensor(np.ones(5)), (2, 3))

    def test_even_conv_kernel_rejected(self):
        from magup.errors import ConfigError

        with pytest.raises(ConfigError):
            T.conv2d(Tensor(np.ones((4, 4, 1))), Tensor(np.ones((2, 2, 1, 1))))

    def test_strided_slice_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((4, 4)))[::2]

    def test_item_requires_scalar(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)).item()
