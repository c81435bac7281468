import numpy as np
import pytest

from ddacspam.decorrelate import (
    apply_f,
    compute_f,
    local_gram,
    pair_from_flat,
    quasi_correlation,
    quasi_correlation_study,
)
from ddacspam.errors import NonFiniteEigenvalue, ShapeMismatch, ZeroBlock


def random_psd(n, rank, rng):
    a = rng.standard_normal((n, rank))
    return a @ a.T


class TestComputeF:
    def test_whitens(self):
        rng = np.random.default_rng(0)
        for n, rank in [(10, 10), (30, 12), (50, 80)]:
            g = random_psd(n, rank, rng)
            op = compute_f(g, r=1.0)
            target = op.f_matrix @ (g + np.eye(n)) @ op.f_matrix
            np.testing.assert_allclose(target, np.eye(n), atol=1e-10)

    def test_zero_gram(self):
        op = compute_f(np.zeros((6, 6)), r=4.0)
        np.testing.assert_allclose(op.f_matrix, np.eye(6) / 2.0, atol=1e-12)
        assert op.eigen_floor == pytest.approx(4.0)

    def test_symmetric_output(self):
        rng = np.random.default_rng(2)
        g = random_psd(25, 30, rng)
        op = compute_f(g, r=0.5)
        np.testing.assert_allclose(op.f_matrix, op.f_matrix.T, atol=0)

    def test_rejects_bad_ridge(self):
        with pytest.raises(ValueError):
            compute_f(np.eye(3), r=0.0)

    def test_non_finite(self):
        g = np.eye(4)
        g[2, 2] = np.inf
        with pytest.raises(NonFiniteEigenvalue):
            compute_f(g, r=1.0)


def test_local_gram():
    rng = np.random.default_rng(1)
    psi = rng.standard_normal((12, 5))
    np.testing.assert_allclose(local_gram(psi), psi @ psi.T, atol=0)
    assert local_gram(np.empty((7, 0))).shape == (7, 7)
    with pytest.raises(ShapeMismatch):
        local_gram(rng.standard_normal(9))


def test_apply_f_shape_check():
    op = compute_f(np.eye(5), r=1.0)
    with pytest.raises(ShapeMismatch):
        apply_f(op, np.zeros((6, 2)))


class TestQuasiCorrelation:
    def test_identical_blocks(self):
        a = np.eye(3)
        assert quasi_correlation(a, a) == pytest.approx(1.0)

    def test_orthogonal_blocks(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        b = np.array([[1.0, 0.0], [0.0, -1.0]])
        assert quasi_correlation(a, b) == pytest.approx(0.0)

    def test_zero_block(self):
        with pytest.raises(ZeroBlock):
            quasi_correlation(np.zeros((3, 2)), np.eye(3, 2))


def test_pair_from_flat_exhaustive():
    for p in (2, 3, 5, 17):
        total = p * (p - 1) // 2
        ii, jj = pair_from_flat(np.arange(total), p)
        pairs = list(zip(ii.tolist(), jj.tolist()))
        want = [(i, j) for i in range(p) for j in range(i + 1, p)]
        assert pairs == want


class TestStudy:
    def test_decorrelation_shrinks_correlation(self):
        s = quasi_correlation_study(n=100, p=40, rho=0.7, d_n=4, seed=0)
        assert s.median_abs_after < s.median_abs_before
        assert s.median_abs_after < 0.05
        assert s.n_pairs == 40 * 39 // 2

    def test_pair_subsampling(self):
        s = quasi_correlation_study(n=80, p=30, rho=0.5, d_n=3, seed=1, max_pairs=100)
        assert s.n_pairs == 100

    def test_deterministic(self):
        a = quasi_correlation_study(n=60, p=20, rho=0.4, d_n=3, seed=5)
        b = quasi_correlation_study(n=60, p=20, rho=0.4, d_n=3, seed=5)
        assert a == b

    def test_rho_bounds(self):
        with pytest.raises(ValueError):
            quasi_correlation_study(n=50, p=10, rho=1.0, d_n=3, seed=0)
        with pytest.raises(ValueError):
            quasi_correlation_study(n=50, p=10, rho=-0.1, d_n=3, seed=0)
