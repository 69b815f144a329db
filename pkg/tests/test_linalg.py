import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abba.errors import ParameterError, ShapeError
from abba.linalg import (
    format_matrix_csv,
    frobenius_norm,
    hadamard,
    jacobi_svd,
    khatri_rao_rows,
    matmul,
    numerical_rank,
    parse_matrix_csv,
    read_matrix_csv,
    truncated_svd,
    write_matrix_csv,
)

from conftest import lapack_singular_values


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((2, 2))
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_hand_example(self):
        assert np.array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), [[17], [39]])

    def test_against_triple_loop(self, rng):
        a, b = rng.standard_normal((7, 3)), rng.standard_normal((3, 5))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=1e-13, atol=1e-14)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestHadamard:
    def test_ones_and_zeros(self, rng):
        m = rng.standard_normal((3, 4))
        assert np.array_equal(hadamard(m, np.ones((3, 4))), m)
        assert np.array_equal(hadamard(m, np.zeros((3, 4))), np.zeros((3, 4)))

    def test_hand_example(self):
        assert np.array_equal(hadamard([[1, 2], [3, 4]], [[2, 0], [1, 3]]), [[2, 0], [3, 12]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            hadamard(np.ones((2, 2)), np.ones((2, 3)))

    @given(st.integers(0, 10_000))
    def test_algebra(self, seed):
        r = np.random.default_rng(seed)
        a, b, c = (r.standard_normal((4, 5)) for _ in range(3))
        assert np.array_equal(hadamard(a, b), hadamard(b, a))
        np.testing.assert_allclose(hadamard(hadamard(a, b), c), hadamard(a, hadamard(b, c)), rtol=1e-14)
        np.testing.assert_allclose(hadamard(a, b + c), hadamard(a, b) + hadamard(a, c), rtol=1e-12, atol=1e-14)


class TestKhatriRao:
    def test_single_column_collapse(self, rng):
        u, v = rng.standard_normal((6, 1)), rng.standard_normal((6, 1))
        assert np.array_equal(khatri_rao_rows(u, v), u * v)

    def test_single_row(self):
        assert np.array_equal(khatri_rao_rows([[1, 2]], [[3, 4]]), [[3, 4, 6, 8]])

    def test_row_mismatch(self):
        with pytest.raises(ShapeError):
            khatri_rao_rows(np.ones((3, 2)), np.ones((4, 2)))

    def test_entrywise_definition(self, rng):
        u, v = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
        kr = khatri_rao_rows(u, v)
        for i in range(5):
            for p in range(3):
                for q in range(2):
                    assert kr[i, p * 2 + q] == u[i, p] * v[i, q]

    def test_hadamard_of_products(self, rng):
        b1, a1 = rng.standard_normal((5, 3)), rng.standard_normal((3, 4))
        b2, a2 = rng.standard_normal((5, 2)), rng.standard_normal((2, 4))
        naive = (b1 @ a1) * (b2 @ a2)
        factored = khatri_rao_rows(b1, b2) @ khatri_rao_rows(a1.T, a2.T).T
        assert np.linalg.norm(factored - naive) <= 1e-12 * np.linalg.norm(naive)

    @settings(max_examples=100, deadline=None)
    @given(
        st.integers(1, 64), st.integers(1, 64), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31)
    )
    def test_exactness_property(self, m, n, r1, r2, seed):
        r = np.random.default_rng(seed)
        b1, a1 = r.standard_normal((m, r1)), r.standard_normal((r1, n))
        b2, a2 = r.standard_normal((m, r2)), r.standard_normal((r2, n))
        naive = (b1 @ a1) * (b2 @ a2)
        factored = khatri_rao_rows(b1, b2) @ khatri_rao_rows(a1.T, a2.T).T
        assert np.linalg.norm(factored - naive) <= 1e-12 * (1 + np.linalg.norm(naive))


class TestFrobenius:
    def test_simple(self):
        assert frobenius_norm(np.zeros((3, 3))) == 0.0
        assert frobenius_norm([[3, 4]]) == 5.0

    def test_trace_oracle(self, rng):
        m = rng.standard_normal((9, 6))
        expected = np.sqrt(np.trace(m.T @ m))
        assert abs(frobenius_norm(m) - expected) <= 1e-12 * expected

    def test_no_overflow(self):
        assert np.isfinite(frobenius_norm(np.full((2, 2), 1e200)))


def assert_orthonormal_columns(q, tol=1e-10):
    k = q.shape[1]
    assert np.linalg.norm(q.T @ q - np.eye(k)) <= tol


class TestJacobi:
    @pytest.mark.parametrize("shape", [(7, 3), (3, 7), (20, 20), (64, 48), (1, 5), (5, 1)])
    def test_matches_lapack(self, rng, shape):
        a = rng.standard_normal(shape)
        res = jacobi_svd(a)
        s = lapack_singular_values(a)
        np.testing.assert_allclose(res.sigma, s, rtol=1e-12, atol=1e-13 * s[0])
        np.testing.assert_allclose(res.reconstruct(), a, atol=1e-12 * s[0])
        assert_orthonormal_columns(res.u)
        assert_orthonormal_columns(res.vt.T)

    def test_rank_deficient_still_orthonormal(self, rng):
        a = rng.standard_normal((8, 2)) @ rng.standard_normal((2, 6))
        res = jacobi_svd(a)
        assert_orthonormal_columns(res.u)
        assert_orthonormal_columns(res.vt.T)
        np.testing.assert_allclose(res.reconstruct(), a, atol=1e-12)

    def test_zero_matrix(self):
        res = jacobi_svd(np.zeros((4, 3)))
        assert np.array_equal(res.sigma, np.zeros(3))
        assert_orthonormal_columns(res.u)


class TestTruncatedSvd:
    def test_diagonal(self):
        res = truncated_svd(np.diag([3.0, 2.0, 1.0]), 2)
        np.testing.assert_allclose(res.sigma, [3.0, 2.0], rtol=1e-14)
        assert abs(np.linalg.norm(np.diag([3.0, 2.0, 1.0]) - res.reconstruct()) - 1.0) < 1e-12

    def test_rank_one_exact(self, rng):
        a = np.outer(rng.standard_normal(10), rng.standard_normal(7))
        res = truncated_svd(a, 1)
        assert np.linalg.norm(a - res.reconstruct()) <= 1e-10

    def test_randomized_path_matches_full_oracle(self, rng):
        a = rng.standard_normal((64, 48))
        res = truncated_svd(a, 8, seed=3)
        s = lapack_singular_values(a)
        np.testing.assert_allclose(res.sigma, s[:8], rtol=1e-8)
        tail = np.sqrt(np.sum(s[8:] ** 2))
        assert abs(np.linalg.norm(a - res.reconstruct()) - tail) <= 1e-8 * np.linalg.norm(a)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 40), st.integers(2, 40), st.integers(0, 2**31), st.data())
    def test_eym_optimality(self, m, n, seed, data):
        k = data.draw(st.integers(1, min(m, n)))
        a = np.random.default_rng(seed).standard_normal((m, n))
        res = truncated_svd(a, k, seed=seed)
        s = lapack_singular_values(a)
        tail = np.sqrt(np.sum(s[k:] ** 2))
        assert abs(np.linalg.norm(a - res.reconstruct()) - tail) <= 1e-8 * np.linalg.norm(a)
        assert np.all(np.diff(res.sigma) <= 0) and np.all(res.sigma >= 0)
        assert_orthonormal_columns(res.u)
        assert_orthonormal_columns(res.vt.T)

    def test_sign_convention(self, rng):
        res = truncated_svd(rng.standard_normal((30, 20)), 5, seed=1)
        for j in range(5):
            col = res.u[:, j]
            assert col[np.argmax(np.abs(col))] >= 0

    def test_deterministic(self, rng):
        a = rng.standard_normal((50, 40))
        r1, r2 = truncated_svd(a, 6, seed=9), truncated_svd(a, 6, seed=9)
        assert np.array_equal(r1.u, r2.u) and np.array_equal(r1.sigma, r2.sigma) and np.array_equal(r1.vt, r2.vt)

    @pytest.mark.parametrize("k", [0, 4, -1, 2.5])
    def test_k_out_of_range(self, k):
        with pytest.raises(ParameterError):
            truncated_svd(np.ones((3, 5)), k)


class TestNumericalRank:
    def test_basic(self):
        assert numerical_rank(np.zeros((4, 4))) == 0
        assert numerical_rank(np.eye(4), 1e-10) == 4

    def test_hadamard_rank_bound(self, rng):
        b1, a1 = rng.standard_normal((32, 3)), rng.standard_normal((3, 32))
        b2, a2 = rng.standard_normal((32, 3)), rng.standard_normal((3, 32))
        assert numerical_rank((b1 @ a1) * (b2 @ a2), 1e-10) <= 9

    def test_bad_tol(self):
        with pytest.raises(ParameterError):
            numerical_rank(np.eye(2), 0.0)


class TestCsv:
    def test_round_trip_exact(self, rng, tmp_path):
        m = rng.standard_normal((5, 3)) * 10.0 ** rng.integers(-20, 20, size=(5, 3))
        path = tmp_path / "m.csv"
        write_matrix_csv(path, m)
        assert np.array_equal(read_matrix_csv(path), m)

    def test_layout(self):
        text = format_matrix_csv([[1.0, 0.1], [-2.5, 3e-30]])
        assert text == "1.0,0.1\n-2.5,3e-30\n"
        assert "\r" not in text

    def test_ragged(self):
        with pytest.raises(ShapeError):
            parse_matrix_csv("1,2\n3\n")
