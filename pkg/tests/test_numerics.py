import numpy as np
import pytest

from delta_ctr import numerics as nm
from delta_ctr.numerics import (
    DimensionError,
    GraphError,
    ParameterError,
    Rng,
    Tensor,
)


def matmul_oracle(a, b):
    """Brute-force triple loop."""
    m, k = a.shape
    k2, p = b.shape
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        b = np.arange(6.0).reshape(2, 3)
        out = nm.matmul(Tensor(np.eye(2)), Tensor(b))
        assert np.array_equal(out.value, b)

    def test_hand_example(self):
        out = nm.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert np.array_equal(out.value, [[17.0], [39.0]])

    def test_against_triple_loop(self):
        rng = Rng(11)
        a = rng.normal((3, 4))
        b = rng.normal((4, 2))
        out = nm.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.value, matmul_oracle(a, b), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\)"):
            nm.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_backward_formula(self):
        a = Tensor(Rng(1).normal((3, 4)))
        b = Tensor(Rng(2).normal((4, 2)))
        out = nm.tsum(nm.matmul(a, b))
        out.backward()
        g = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, g @ b.value.T)
        np.testing.assert_allclose(b.grad, a.value.T @ g)


class TestSoftmaxRows:
    def test_uniform_row(self):
        out = nm.softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.value, [[1 / 3, 1 / 3, 1 / 3]])

    def test_shift_invariance(self):
        x = Rng(5).normal((4, 6))
        a = nm.softmax_rows(Tensor(x)).value
        b = nm.softmax_rows(Tensor(x + 123.456)).value
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_direct_formula(self):
        x = np.array([[1.0, 2.0, 3.0]])
        expected = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(nm.softmax_rows(Tensor(x)).value, expected, rtol=1e-15)

    def test_rows_sum_to_one(self):
        for seed in range(20):
            x = Rng(seed).normal((5, 7), scale=10)
            out = nm.softmax_rows(Tensor(x)).value
            np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
            assert np.all(out > 0) and np.all(out <= 1)


class TestSigmoid:
    def test_zero(self):
        assert nm.sigmoid(Tensor([0.0])).value[0] == 0.5

    def test_symmetry(self):
        x = Rng(3).normal((10,))
        s = nm.sigmoid(Tensor(x)).value + nm.sigmoid(Tensor(-x)).value
        np.testing.assert_allclose(s, 1.0, atol=1e-14)

    def test_direct_formula(self):
        np.testing.assert_allclose(
            nm.sigmoid(Tensor([2.0])).value[0], 1.0 / (1.0 + np.exp(-2.0)), rtol=1e-15
        )

    def test_open_interval(self):
        out = nm.sigmoid(Tensor([-500.0, 500.0])).value
        assert np.all(out > 0) and np.all(out < 1)


class TestRelu:
    def test_values(self):
        out = nm.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.value, [0.0, 0.0, 2.0])

    def test_nonnegative_identity(self):
        x = np.abs(Rng(4).normal((8,)))
        assert np.array_equal(nm.relu(Tensor(x)).value, x)

    def test_gradient(self):
        x = Tensor([3.0, -3.0, 0.0])
        nm.tsum(nm.relu(x)).backward()
        assert np.array_equal(x.grad, [1.0, 0.0, 0.0])


class TestDropout:
    def test_rate_zero_identity(self):
        x = Rng(6).normal((100,))
        out = nm.dropout(Tensor(x), 0.0, Rng(0), training=True)
        assert np.array_equal(out.value, x)

    def test_inference_identity(self):
        x = Rng(6).normal((100,))
        out = nm.dropout(Tensor(x), 0.9, Rng(0), training=False)
        assert np.array_equal(out.value, x)

    def test_statistics(self):
        x = np.ones(10**6)
        out = nm.dropout(Tensor(x), 0.5, Rng(123), training=True).value
        survivors = np.count_nonzero(out) / x.size
        assert abs(survivors - 0.5) < 0.01
        assert abs(out.mean() - 1.0) < 0.01  # inverted scaling preserves the mean

    def test_bad_rate(self):
        with pytest.raises(ParameterError):
            nm.dropout(Tensor([1.0]), 1.0, Rng(0), training=True)


class TestGradOf:
    def test_square(self):
        x = Tensor([3.0])
        (g,) = nm.grad_of(lambda: nm.tsum(nm.mul(x, x)), [x])
        np.testing.assert_allclose(g, [6.0])

    def test_softmax_sum_constant(self):
        m = Tensor(Rng(8).normal((3, 5)))
        (g,) = nm.grad_of(lambda: nm.tsum(nm.softmax_rows(m)), [m])
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_three_layer_composition_fd(self):
        rng = Rng(9)
        w1 = Tensor(rng.normal((4, 5)))
        w2 = Tensor(rng.normal((5, 3)))
        w3 = Tensor(rng.normal((3, 1)))
        x = rng.normal((2, 4))

        def f():
            h = nm.relu(nm.matmul(Tensor(x, requires_grad=False), w1))
            h = nm.sigmoid(nm.matmul(h, w2))
            return nm.tsum(nm.matmul(h, w3))

        analytic = nm.grad_of(f, [w1, w2, w3])
        numeric = nm.finite_difference_grad(f, [w1, w2, w3])
        assert nm.max_relative_error(analytic, numeric) < 1e-4

    def test_non_tensor_rejected(self):
        with pytest.raises(GraphError):
            nm.grad_of(lambda: 3.0, [Tensor([1.0])])
        with pytest.raises(GraphError):
            nm.grad_of(lambda: Tensor([1.0]), [np.zeros(2)])


@pytest.mark.parametrize("seed", range(100))
def test_backward_matches_finite_differences(seed):
    """Property: analytic backward agrees with central differences within
    1e-4 relative error over random shapes and seeds."""
    rng = Rng(seed).split("prop")
    m = int(rng.integers(1, 5))
    k = int(rng.integers(1, 5))
    p = int(rng.integers(1, 4))
    a = Tensor(rng.normal((m, k)))
    b = Tensor(rng.normal((k, p)))
    weights = rng.normal((m, p))

    def f():
        h = nm.matmul(a, b)
        h = nm.softmax_rows(nm.add(h, nm.relu(h)))
        return nm.tsum(nm.mul(nm.sigmoid(h), weights))

    analytic = nm.grad_of(f, [a, b])
    numeric = nm.finite_difference_grad(f, [a, b])
    assert nm.max_relative_error(analytic, numeric) < 1e-4


class TestRng:
    def test_same_seed_same_stream(self):
        a = Rng(42).split("x").normal((10,))
        b = Rng(42).split("x").normal((10,))
        assert np.array_equal(a, b)

    def test_different_paths_differ(self):
        a = Rng(42).split("x").normal((10,))
        b = Rng(42).split("y").normal((10,))
        assert not np.array_equal(a, b)


def test_topk_mask_bad_k():
    with pytest.raises(ParameterError):
        nm.topk_mask(np.ones((2, 3)), 4)
    with pytest.raises(ParameterError):
        nm.topk_mask(np.ones((2, 3)), 0)
