import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsslab import autodiff as ad
from rsslab.errors import GraphCycle, NotPositiveDefinite, ShapeMismatch

from oracles import assert_grad_close, central_diff_grad, jacobi_eigenvalues


def random_spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T) + np.eye(n)


class TestCholesky:
    def test_identity(self):
        low = ad.cholesky_spd(np.eye(3))
        assert np.allclose(low, np.eye(3))

    def test_diagonal(self):
        low = ad.cholesky_spd(np.diag([4.0, 9.0]))
        assert np.allclose(low, np.diag([2.0, 3.0]))

    def test_roundtrip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            a = rng.standard_normal((5, 5))
            m = a @ a.T + np.eye(5)
            low = ad.cholesky_spd(m)
            err = np.linalg.norm(low @ low.T - m) / np.linalg.norm(m)
            assert err < 1e-9
            assert np.allclose(np.triu(low, 1), 0.0)

    def test_tiny_pivot_rejected(self):
        with pytest.raises(NotPositiveDefinite):
            ad.cholesky_spd(np.diag([1.0, 1e-13]))

    def test_indefinite_rejected(self):
        with pytest.raises(NotPositiveDefinite):
            ad.cholesky_spd(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_asymmetric_rejected(self):
        m = np.eye(3)
        m[0, 1] = 1e-3
        with pytest.raises(ValueError):
            ad.cholesky_spd(m)


class TestLogdet:
    def test_identity_is_zero(self):
        assert ad.logdet_spd(np.eye(4)) == pytest.approx(0.0, abs=1e-12)

    def test_diagonal(self):
        assert ad.logdet_spd(np.diag([2.0, 3.0])) == pytest.approx(np.log(6.0), abs=1e-12)

    def test_matches_jacobi_eigenvalue_sum(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            m = random_spd(rng, 6)
            expected = np.log(jacobi_eigenvalues(m)).sum()
            assert abs(ad.logdet_spd(m) - expected) < 1e-9

    def test_scaling_identity(self):
        # logdet(c m) = n log c + logdet(m)
        rng = np.random.default_rng(2)
        for c in (0.3, 1.7, 12.0):
            m = random_spd(rng, 5)
            lhs = ad.logdet_spd(c * m)
            rhs = 5 * np.log(c) + ad.logdet_spd(m)
            assert abs(lhs - rhs) < 1e-9

    def test_gradient_is_symmetrized_inverse(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            m = random_spd(rng, 4)
            x = ad.leaf(m)
            grads = ad.backward(ad.logdet_spd(x))
            assert np.allclose(grads[x], np.linalg.inv(m), atol=1e-8)
            numeric = central_diff_grad(
                lambda v: ad.logdet_spd(0.5 * (v + v.T)), m)
            assert_grad_close(grads[x], numeric)


class TestBackward:
    def test_trace_quadratic(self):
        rng = np.random.default_rng(4)
        x_val = rng.standard_normal((3, 4))
        x = ad.leaf(x_val)
        root = ad.trace(ad.matmul(ad.transpose(x), x))
        grads = ad.backward(root)
        assert np.allclose(grads[x], 2.0 * x_val)

    def test_logdet_of_gram_matches_fd(self):
        rng = np.random.default_rng(5)
        x_val = rng.standard_normal((4, 6))
        x = ad.leaf(x_val)
        root = ad.logdet_spd(ad.constant(np.eye(4)) + ad.matmul(x, ad.transpose(x)))
        grads = ad.backward(root)
        numeric = central_diff_grad(
            lambda v: ad.logdet_spd(np.eye(4) + v @ v.T), x_val)
        assert_grad_close(grads[x], numeric)

    def test_constant_root_gives_zero(self):
        x = ad.leaf(np.ones((2, 2)))
        root = ad.constant(3.0)
        grads = ad.backward(root, leaves=[x])
        assert np.allclose(grads[x], 0.0)

    def test_repeated_parent_accumulates(self):
        x = ad.leaf(np.array([[2.0]]))
        root = ad.sum_all(ad.mul(x, x))
        grads = ad.backward(root)
        assert grads[x][0, 0] == pytest.approx(4.0)

    def test_linearity(self):
        rng = np.random.default_rng(6)
        x_val = rng.standard_normal((3, 3))
        a, b = 2.5, -1.25

        def grad_of(builder):
            x = ad.leaf(x_val)
            return ad.backward(builder(x))[x], x

        gf, _ = grad_of(lambda x: ad.sum_all(ad.mul(x, x)))
        gg, _ = grad_of(lambda x: ad.trace(ad.matmul(x, ad.transpose(x))))
        x = ad.leaf(x_val)
        combined = ad.scale(ad.sum_all(ad.mul(x, x)), a) + ad.scale(
            ad.trace(ad.matmul(x, ad.transpose(x))), b)
        gc = ad.backward(combined)[x]
        assert np.allclose(gc, a * gf + b * gg, atol=1e-12)

    def test_cycle_detected(self):
        x = ad.leaf(np.ones((1, 1)))
        y = ad.scale(x, 2.0)
        y.parents = (y,)  # forge a self-loop
        with pytest.raises(GraphCycle):
            ad.backward(y)

    def test_non_scalar_root_rejected(self):
        x = ad.leaf(np.ones((2, 2)))
        with pytest.raises(ShapeMismatch):
            ad.backward(x)

    def test_nonfinite_leaf_rejected(self):
        with pytest.raises(ValueError):
            ad.leaf(np.array([[np.nan]]))


class TestOps:
    def test_mixed_expression_matches_fd(self):
        rng = np.random.default_rng(7)
        x_val = rng.standard_normal((3, 5))
        w_val = rng.standard_normal((4, 3))

        def build(xv, wv):
            x, w = ad.leaf(xv), ad.leaf(wv)
            h = ad.tanh(ad.matmul(w, x))
            z = ad.normalize_cols(ad.relu(h + ad.constant(0.1 * np.ones((4, 1)))))
            root = ad.sum_all(ad.mul(z, z)) + ad.mean_all(h)
            return root, x, w

        root, x, w = build(x_val, w_val)
        grads = ad.backward(root)
        for leaf_node, val, other in ((x, x_val, w_val), (w, w_val, x_val)):
            if leaf_node is x:
                numeric = central_diff_grad(lambda v: build(v, w_val)[0].item(), val)
            else:
                numeric = central_diff_grad(lambda v: build(x_val, v)[0].item(), val)
            assert_grad_close(grads[leaf_node], numeric)

    def test_broadcast_add_bias(self):
        x = ad.leaf(np.ones((3, 4)))
        b = ad.leaf(np.arange(3.0).reshape(3, 1))
        root = ad.sum_all(x + b)
        grads = ad.backward(root)
        assert grads[b].shape == (3, 1)
        assert np.allclose(grads[b], 4.0)

    def test_logsumexp_cols_stable_and_correct(self):
        vals = np.array([[1000.0, -1000.0], [1000.0, -1000.0]])
        x = ad.leaf(vals)
        out = ad.logsumexp_cols(x)
        expected = np.array([[1000.0 + np.log(2.0), -1000.0 + np.log(2.0)]])
        assert np.allclose(out.value, expected)

    def test_logsumexp_offdiag_excludes_self(self):
        s = np.array([[9.0, 0.0, 0.0],
                      [0.0, 9.0, 0.0],
                      [0.0, 0.0, 9.0]])
        out = ad.logsumexp_rows_offdiag(ad.constant(s))
        assert np.allclose(out.value, np.log(2.0))

    def test_logsumexp_offdiag_gradient(self):
        rng = np.random.default_rng(8)
        s_val = rng.standard_normal((4, 4))
        s = ad.leaf(s_val)
        root = ad.sum_all(ad.logsumexp_rows_offdiag(s))

        def f(v):
            m = v.copy()
            np.fill_diagonal(m, -np.inf)
            return float(np.log(np.exp(m).sum(axis=1)).sum())

        assert_grad_close(ad.backward(root)[s], central_diff_grad(f, s_val))

    def test_normalize_guard_substitutes_basis_vector(self):
        x = ad.leaf(np.zeros((3, 2)))
        z = ad.normalize_cols(x)
        assert np.allclose(z.value, np.array([[1.0, 1.0], [0, 0], [0, 0]]))
        grads = ad.backward(ad.sum_all(z))
        assert np.allclose(grads[x], 0.0)

    def test_column_gather_forward_and_gradient(self):
        rng = np.random.default_rng(9)
        x_val = rng.uniform(size=(6, 3))
        # two output rows, each a weighted pair of source rows, per column
        index = rng.integers(0, 6, size=(3, 2, 2))
        weight = rng.uniform(size=(3, 2, 2))
        x = ad.leaf(x_val)
        out = ad.column_gather(x, index, weight)
        for j in range(3):
            for p in range(2):
                expect = (weight[j, p] * x_val[index[j, p], j]).sum()
                assert out.value[p, j] == pytest.approx(expect)
        root = ad.sum_all(ad.mul(out, out))

        def f(v):
            n = v.shape[1]
            g = np.stack([(v[:, j][index[j]] * weight[j]).sum(axis=1) for j in range(n)], axis=1)
            return float((g * g).sum())

        assert_grad_close(ad.backward(root)[x], central_diff_grad(f, x_val))


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=0.05, max_value=50.0),
       st.integers(min_value=2, max_value=6),
       st.integers(min_value=0, max_value=2**31 - 1))
def test_logdet_scaling_property(c, n, seed):
    rng = np.random.default_rng(seed)
    m = random_spd(rng, n)
    lhs = ad.logdet_spd(c * m)
    rhs = n * np.log(c) + ad.logdet_spd(m)
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(rhs))
