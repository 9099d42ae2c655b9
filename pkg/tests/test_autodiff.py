import zlib

import numpy as np
import pytest

from balora import autodiff as ad
from balora.errors import DomainError, NotDistribution, NotScalarLoss, ShapeMismatch


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestForward:
    def test_softmax_symmetric(self):
        t = ad.Tape()
        np.testing.assert_array_equal(ad.softmax_rows(t.constant([[0.0, 0.0]])).value, [[0.5, 0.5]])

    def test_kl_self_is_zero(self):
        p = softmax(rand((4, 5)))
        assert np.all(ad.kl_rows(ad.Tape().constant(p), p).value == 0.0)

    def test_svd_values_diagonal(self):
        t = ad.Tape()
        np.testing.assert_array_equal(ad.svd_values(t.constant(np.diag([3.0, 2.0, 1.0]))).value, [3.0, 2.0, 1.0])

    def test_log_softmax_matches_log_of_softmax(self):
        t = ad.Tape()
        x = t.constant(rand((3, 4)))
        np.testing.assert_allclose(ad.log_softmax_rows(x).value, np.log(ad.softmax_rows(x).value), atol=1e-14)

    def test_cross_entropy_uniform(self):
        t = ad.Tape()
        loss = ad.cross_entropy(t.constant(np.zeros((2, 4))), [1, 3])
        assert abs(float(loss.value) - np.log(4)) < 1e-15

    def test_matmul_shape_mismatch(self):
        t = ad.Tape()
        with pytest.raises(ShapeMismatch):
            ad.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))

    def test_add_shape_mismatch(self):
        t = ad.Tape()
        with pytest.raises(ShapeMismatch):
            t.constant(np.ones((2, 3))) + t.constant(np.ones((3, 2)))

    def test_kl_rejects_non_distribution(self):
        t = ad.Tape()
        with pytest.raises(NotDistribution):
            ad.kl_rows(t.constant([[0.5, 0.6]]), [[0.5, 0.5]])

    def test_entropy_rejects_negative(self):
        with pytest.raises(DomainError):
            ad.entropy_rows(ad.Tape().constant([[1.5, -0.5]]))

    def test_entropy_one_hot_is_finite_zero(self):
        assert float(ad.entropy_rows(ad.Tape().constant([[0.0, 1.0, 0.0]])).value[0]) == 0.0

    def test_node_records_topological_inputs(self):
        t = ad.Tape()
        a = t.parameter(rand((2, 2)))
        b = ad.relu(a @ a)
        assert all(i < b.id for i in b.inputs)
        assert [n.id for n in t.nodes] == list(range(len(t.nodes)))


class TestBackward:
    def test_sum_gives_ones(self):
        t = ad.Tape()
        m = t.parameter(rand((3, 4)))
        g = ad.backward(t, ad.sum_(m))
        np.testing.assert_array_equal(g[m.id], np.ones((3, 4)))

    def test_top_singular_value_gradient(self):
        t = ad.Tape()
        m = t.parameter(np.diag([3.0, 2.0, 1.0]))
        g = ad.backward(t, ad.svd_values(m)[0])
        expected = np.zeros((3, 3))
        expected[0, 0] = 1.0
        np.testing.assert_allclose(g[m.id], expected, atol=1e-15)

    def test_not_scalar(self):
        t = ad.Tape()
        m = t.parameter(rand((2, 2)))
        with pytest.raises(NotScalarLoss):
            ad.backward(t, m @ m)

    def test_grad_shapes_match_values(self):
        t = ad.Tape()
        w = t.parameter(rand((4, 3)))
        b = t.parameter(rand((3,), 1))
        x = t.constant(rand((5, 4), 2))
        loss = ad.mean(ad.relu(x @ w + b))
        ad.backward(t, loss)
        for node in t.nodes:
            if node.grad is not None:
                assert node.grad.shape == node.value.shape

    def test_linearity(self):
        x0 = rand((6, 4), 3)
        labels = np.array([0, 1, 2, 3, 0, 1])

        def grads(which):
            t = ad.Tape()
            x = t.parameter(x0)
            l1 = ad.cross_entropy(x, labels)
            l2 = ad.offdiag_sq_sum(ad.covariance(x))
            loss = {"1": l1, "2": l2, "sum": l1 + l2}[which]
            return ad.backward(t, loss)[x.id]

        np.testing.assert_allclose(grads("sum"), grads("1") + grads("2"), atol=1e-12)

    def test_unreached_parameter_gets_zero(self):
        t = ad.Tape()
        a = t.parameter(rand((2, 2)))
        b = t.parameter(rand((2, 2), 1))
        g = ad.backward(t, ad.sum_(a))
        np.testing.assert_array_equal(g[b.id], np.zeros((2, 2)))

    def test_gap_diagnostic(self):
        t = ad.Tape()
        ad.svd_values(t.parameter(np.eye(3)))
        assert any("gap" in d for d in t.diagnostics)


SMOOTH = {
    "matmul": lambda t, x: ad.sum_sq(x @ t.constant(rand((5, 3), 9))),
    "add_broadcast": lambda t, x: ad.sum_sq(x + t.constant(rand((5,), 8))),
    "mul_div": lambda t, x: ad.sum_(ad.div(ad.mul(x, x), t.constant(2.0 + rand((4, 5), 7) ** 2))),
    "scale": lambda t, x: ad.sum_sq(ad.scale(x, -2.5)),
    "softmax_rows": lambda t, x: ad.sum_sq(ad.softmax_rows(x)),
    "log_softmax_rows": lambda t, x: ad.sum_sq(ad.log_softmax_rows(x)),
    "cross_entropy": lambda t, x: ad.cross_entropy(x, [0, 2, 4, 1]),
    "mse": lambda t, x: ad.mse(x, t.constant(rand((4, 5), 6))),
    "kl_rows_q": lambda t, x: ad.mean(ad.kl_rows(softmax(rand((4, 5), 5)), ad.softmax_rows(x))),
    "kl_rows_p": lambda t, x: ad.mean(ad.kl_rows(ad.softmax_rows(x), softmax(rand((4, 5), 5)))),
    "entropy_rows": lambda t, x: ad.mean(ad.entropy_rows(ad.softmax_rows(x))),
    "l2_normalize_rows": lambda t, x: ad.sum_(ad.mul(ad.l2_normalize_rows(x), t.constant(rand((4, 5), 4)))),
    "covariance": lambda t, x: ad.sum_(ad.mul(ad.covariance(x), t.constant(rand((5, 5), 3)))),
    "offdiag_sq_sum": lambda t, x: ad.offdiag_sq_sum(ad.covariance(x)),
    "variance": lambda t, x: ad.variance(x),
    "take": lambda t, x: ad.sum_sq(x[1:3]),
}


@pytest.mark.parametrize("name", sorted(SMOOTH))
def test_smooth_primitives_grad_check(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(ad.grad_check(SMOOTH[name], rng.standard_normal((4, 5))) for _ in range(10))
    assert worst < 1e-6, f"{name}: {worst:.3e}"


def test_relu_grad_check_away_from_kink():
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.standard_normal((4, 5))
        x[np.abs(x) < 1e-2] = 0.5
        assert ad.grad_check(lambda t, v: ad.sum_sq(ad.relu(v)), x) < 1e-6


def test_svd_values_grad_check():
    rng = np.random.default_rng(1)
    w = rng.standard_normal(4)
    checked = 0
    while checked < 10:
        x = rng.standard_normal((6, 4))
        if ad.min_singular_gap(x) < 1e-2:
            continue
        assert ad.grad_check(lambda t, v: ad.sum_(ad.mul(ad.svd_values(v), t.constant(w))), x) < 1e-4
        checked += 1


def test_mse_grad_check_4x4():
    assert ad.grad_check(lambda t, x: ad.mse(x, np.eye(4)), rand((4, 4))) < 1e-6


def test_grad_check_step_range():
    with pytest.raises(ValueError):
        ad.grad_check(lambda t, x: ad.sum_(x), np.ones((2, 2)), step=1e-2)
