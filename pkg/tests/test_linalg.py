import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowrank.linalg import (fold, mode_n_product, qr_pivoted, relative_error,
                            svd, unfold)

rng = np.random.default_rng(0)


def gram_svd_oracle(a):
    """Independent SVD via eigendecomposition of the Gram matrix."""
    m, n = a.shape
    if m <= n:
        vals, vecs = np.linalg.eigh(a @ a.T)
        order = np.argsort(vals)[::-1]
        vals, u = np.maximum(vals[order], 0.0), vecs[:, order]
        s = np.sqrt(vals)
        v = a.T @ u / np.where(s > 1e-12, s, 1.0)
        return u, s, v
    v, s, u = gram_svd_oracle(a.T)
    return u, s, v


class TestSvd:
    def test_reconstructs(self):
        a = rng.standard_normal((9, 6))
        u, s, v = svd(a)
        assert np.allclose(u * s @ v.T, a, atol=1e-10)

    def test_matches_gram_oracle_spectrum(self):
        a = rng.standard_normal((8, 12))
        _, s, _ = svd(a)
        _, s_oracle, _ = gram_svd_oracle(a)
        assert np.allclose(s, s_oracle[: len(s)], atol=1e-8)

    def test_truncation_is_best_rank_k(self):
        # Eckart-Young: no rank-k matrix is closer in Frobenius norm
        a = rng.standard_normal((10, 7))
        for k in (1, 3, 5):
            u, s, v = svd(a, rank=k)
            approx = u * s @ v.T
            _, s_full, _ = svd(a)
            best = np.sqrt(np.sum(s_full[k:] ** 2))
            assert np.linalg.norm(a - approx) == pytest.approx(best, abs=1e-9)

    def test_orthonormal_columns(self):
        a = rng.standard_normal((11, 5))
        u, s, v = svd(a)
        assert np.allclose(u.T @ u, np.eye(u.shape[1]), atol=1e-10)
        assert np.allclose(v.T @ v, np.eye(v.shape[1]), atol=1e-10)
        assert np.all(s[:-1] >= s[1:])


class TestQr:
    def test_reconstructs(self):
        a = rng.standard_normal((9, 6))
        q, r = qr_pivoted(a)
        assert np.allclose(q @ r, a, atol=1e-10)

    def test_orthonormal_q(self):
        a = rng.standard_normal((10, 4))
        q, r = qr_pivoted(a)
        assert np.allclose(q.T @ q, np.eye(q.shape[1]), atol=1e-10)

    def test_truncation_error_decreases(self):
        a = rng.standard_normal((12, 12))
        errs = [relative_error((lambda qr: qr[0] @ qr[1])(qr_pivoted(a, rank=k)), a)
                for k in (2, 5, 9, 12)]
        assert all(x >= y - 1e-12 for x, y in zip(errs, errs[1:]))
        assert errs[-1] < 1e-10


class TestUnfold:
    def test_matches_index_walk(self):
        t = rng.standard_normal((3, 4, 5))
        m = unfold(t, 1)
        assert m.shape == (4, 15)
        for j in range(4):
            # row j must hold every element with middle index j
            assert np.allclose(np.sort(m[j]), np.sort(t[:, j, :].ravel()))

    def test_fold_roundtrip_bit_exact(self):
        t = rng.standard_normal((2, 3, 4, 5))
        for mode in range(4):
            again = fold(unfold(t, mode), mode, t.shape)
            assert np.array_equal(again, t)

    @given(st.integers(0, 2))
    @settings(max_examples=10, deadline=None)
    def test_fold_roundtrip_property(self, mode):
        t = np.arange(24.0).reshape(2, 3, 4)
        assert np.array_equal(fold(unfold(t, mode), mode, t.shape), t)


class TestModeNProduct:
    def test_matches_loop_oracle(self):
        t = rng.standard_normal((3, 4, 5))
        m = rng.standard_normal((6, 4))
        got = mode_n_product(t, m, 1)
        want = np.zeros((3, 6, 5))
        for i in range(3):
            for j in range(6):
                for k in range(5):
                    want[i, j, k] = np.dot(m[j], t[i, :, k])
        assert np.allclose(got, want, atol=1e-12)

    def test_identity_leaves_tensor(self):
        t = rng.standard_normal((4, 3, 2))
        assert np.allclose(mode_n_product(t, np.eye(3), 1), t)


class TestRelativeError:
    def test_zero_for_equal(self):
        a = rng.standard_normal((5, 5))
        assert relative_error(a, a) == 0.0

    def test_scale(self):
        a = np.ones((4, 4))
        assert relative_error(np.zeros((4, 4)), a) == pytest.approx(1.0)
