import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pairmae import tensor as T

from helpers import check_grad, finite_diff, rel_err


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestMatmul:
    def test_identity(self):
        a = T.tensor(np.eye(2))
        b = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_hand_arithmetic(self):
        out = T.matmul(T.tensor([[1.0, 2.0]]), T.tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_triple_loop_oracle(self):
        a, b = rand((5, 7), 1), rand((7, 3), 2)
        want = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(7):
                    want[i, j] += a[i, k] * b[k, j]
        got = T.matmul(T.tensor(a), T.tensor(b)).data
        assert np.max(np.abs(got - want)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(T.tensor(rand((2, 3))), T.tensor(rand((4, 2))))

    def test_batched_matches_loop(self):
        a, b = rand((3, 4, 5), 3), rand((3, 5, 2), 4)
        got = T.matmul(T.tensor(a), T.tensor(b)).data
        for i in range(3):
            assert np.allclose(got[i], a[i] @ b[i])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_associative(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (T.tensor(rng.standard_normal((4, 4))) for _ in range(3))
        left = T.matmul(T.matmul(a, b), c).data
        right = T.matmul(a, T.matmul(b, c)).data
        assert np.max(np.abs(left - right)) < 1e-9


class TestSoftmaxRows:
    def test_uniform(self):
        out = T.softmax_rows(T.tensor([[0.0, 0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, 0.25)

    def test_closed_form(self):
        out = T.softmax_rows(T.tensor([[0.0, math.log(2.0)]]))
        assert rel_err(out.data, [[1 / 3, 2 / 3]]) < 1e-12

    def test_neg_inf_suppression(self):
        out = T.softmax_rows(T.tensor([[5.0, -np.inf, 5.0]]))
        assert out.data[0, 1] == 0.0
        assert np.allclose(out.data, [[0.5, 0.0, 0.5]])

    def test_degenerate_row(self):
        with pytest.raises(T.DegenerateRowError):
            T.softmax_rows(T.tensor([[-np.inf, -np.inf]]))

    @given(
        hnp.arrays(np.float64, (3, 5), elements=st.floats(-30, 30)),
        st.floats(-50, 50),
    )
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, a, c):
        base = T.softmax_rows(T.tensor(a)).data
        shifted = T.softmax_rows(T.tensor(a + c)).data
        assert np.max(np.abs(base - shifted)) < 1e-9

    @given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-30, 30)))
    @settings(max_examples=50, deadline=None)
    def test_rows_stochastic(self, a):
        out = T.softmax_rows(T.tensor(a)).data
        assert np.all(out >= 0)
        assert np.max(np.abs(out.sum(axis=-1) - 1.0)) < 1e-9


class TestBackward:
    def test_square(self):
        x = T.tensor(3.0, requires_grad=True)
        y = T.mul(x, x)
        y.backward()
        assert x.grad == pytest.approx(6.0)

    def test_softmax_sum_finite_difference(self):
        a = rand((3, 4), 7)

        def loss(t):
            s = T.softmax_rows(t)
            return T.tsum(T.mul(s, T.tensor(rand((3, 4), 8))))

        leaf = T.Tensor(a, requires_grad=True)
        loss(leaf).backward()
        want = finite_diff(lambda x: loss(T.Tensor(x)).item(), a, eps=1e-5)
        assert rel_err(leaf.grad, want, floor=1e-6) < 1e-6

    def test_unreachable_parameter(self):
        x = T.tensor(2.0, requires_grad=True)
        unused = T.tensor(5.0, requires_grad=True)
        T.mul(x, x).backward()
        assert unused.grad is None

    def test_accumulation_without_reset(self):
        x = T.tensor(3.0, requires_grad=True)
        T.mul(x, x).backward()
        T.mul(x, x).backward()
        assert x.grad == pytest.approx(12.0)

    def test_non_scalar_rejected(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(T.ShapeError):
            T.add(x, 1.0).backward()


class TestGradChecks:
    """Central finite differences vs reverse-mode for every differentiable op."""

    def test_matmul_weights(self):
        b = rand((4, 3), 11)
        check_grad(lambda a: T.tsum(T.mul(m := T.matmul(a, T.tensor(b)), m)), rand((5, 4), 10))

    def test_matmul_batched(self):
        b = rand((2, 4, 3), 12)
        check_grad(
            lambda a: T.tsum(T.mul(m := T.matmul(a, T.tensor(b)), m)),
            rand((2, 5, 4), 13),
        )

    def test_gelu(self):
        check_grad(lambda a: T.tsum(T.gelu(a)), rand((6,) * 2, 14) * 2)

    def test_layer_norm(self):
        g = T.tensor(rand(5, 15) * 0.1 + 1.0)
        b = T.tensor(rand(5, 16) * 0.1)
        check_grad(lambda a: T.tsum(T.mul(o := T.layer_norm(a, g, b), o)), rand((3, 5), 17))

    def test_layer_norm_gain_bias(self):
        x = rand((3, 5), 18)
        check_grad(
            lambda g: T.tsum(T.mul(o := T.layer_norm(T.tensor(x), g, T.tensor(np.zeros(5))), o)),
            np.ones(5) + rand(5, 19) * 0.1,
        )
        check_grad(
            lambda b: T.tsum(T.mul(o := T.layer_norm(T.tensor(x), T.tensor(np.ones(5)), b), o)),
            rand(5, 20),
        )

    def test_bias_add(self):
        a = rand((4, 3), 21)
        check_grad(lambda b: T.tsum(T.mul(o := T.add(T.tensor(a), b), o)), rand(3, 22))

    def test_gather_scatter_expand(self):
        idx = np.array([[0, 2], [3, 1]])
        base = rand((2, 4, 3), 23)

        def loss(rows):
            out = T.scatter_rows(T.tensor(base), idx, rows)
            picked = T.gather_rows(out, np.array([[1, 2], [0, 3]]))
            return T.tsum(T.mul(picked, picked))

        check_grad(loss, rand((2, 2, 3), 24))
        check_grad(lambda v: T.tsum(T.mul(e := T.expand(v, (2, 3, 4)), e)), rand(4, 25))

    def test_suppress(self):
        mask = np.zeros((3, 4), dtype=bool)
        mask[0, 1] = mask[2, 3] = True
        check_grad(
            lambda a: T.tsum(T.softmax_rows(T.suppress(a, mask))), rand((3, 4), 26)
        )

    def test_mean_and_reshape_and_swap(self):
        check_grad(
            lambda a: T.tmean(T.mul(r := T.reshape(T.swapaxes(a, 0, 1), (12,)), r)),
            rand((3, 4), 27),
        )

    def test_index_axis(self):
        check_grad(
            lambda a: T.tsum(T.mul(i := T.index_axis(a, 1, 2), i)), rand((2, 4, 3), 28)
        )


class TestInvariants:
    def test_finite_check(self):
        T.set_check_finite(True)
        try:
            with pytest.raises(T.NumericError):
                T.mul(T.tensor([1e308]), T.tensor([1e308]))
        finally:
            T.set_check_finite(False)

    def test_add_shape_policing(self):
        with pytest.raises(T.ShapeError):
            T.add(T.tensor(rand((2, 3))), T.tensor(rand((3, 2))))
        with pytest.raises(T.ShapeError):
            T.mul(T.tensor(rand((2, 3))), T.tensor(rand((2, 1))))

    def test_no_grad_blocks_recording(self):
        x = T.tensor(2.0, requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert y._parents == ()
