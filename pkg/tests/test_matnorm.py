import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from resdr.exceptions import DomainError
from resdr.grassmann import Subspace, TangentVector, random_semi_orthogonal, tangent_project
from resdr.matnorm import (
    CovStructure,
    MatrixNormalParams,
    SingularMatrixNormal,
    _logpdf_singular_general,
    build_row_covariance,
    logpdf_matrix_normal,
    logpdf_singular_mn,
    sample_singular_mn,
)

E1 = Subspace(np.array([[1.0], [0.0], [0.0]]))


class TestBuildRowCovariance:
    def test_zero_structure_gives_zero(self):
        sigma = build_row_covariance(CovStructure.diagonal(0.0), E1)
        assert np.max(np.abs(sigma)) == 0.0

    def test_axis_aligned_projection(self):
        sigma = build_row_covariance(CovStructure.isotropic(0.3), E1)
        assert np.allclose(sigma, np.diag([0.0, 0.3, 0.3]), atol=1e-15)

    def test_exchangeable_annihilates_base(self):
        rng = np.random.default_rng(0)
        base = random_semi_orthogonal(3, 1, rng)
        sigma = build_row_covariance(CovStructure.exchangeable(0.5, 0.20), base)
        assert np.linalg.norm(sigma @ base.basis) < 1e-10

    def test_matches_direct_projection(self):
        rng = np.random.default_rng(1)
        base = random_semi_orthogonal(5, 2, rng)
        struct = CovStructure.ar1(0.3, 0.5)
        k = np.eye(5) - base.basis @ base.basis.T
        expected = k @ struct.realize(5) @ k
        assert np.allclose(build_row_covariance(struct, base), expected, atol=1e-12)

    def test_non_psd_rejected(self):
        bad = CovStructure.unstructured(np.array([[1.0, 2.0], [2.0, 1.0]]) * -1)
        base = Subspace(np.array([[1.0], [0.0], [0.0]]))
        with pytest.raises(DomainError):
            build_row_covariance(CovStructure.unstructured(-np.eye(3)), base)
        del bad


class TestSingularSampling:
    def test_zero_covariance_gives_zero_draws(self):
        dist = SingularMatrixNormal(E1, np.zeros((3, 3)))
        tv = sample_singular_mn(dist, np.random.default_rng(0))
        assert np.max(np.abs(tv.mat)) == 0.0

    def test_sample_covariance_matches(self):
        rng = np.random.default_rng(7)
        sigma = build_row_covariance(CovStructure.isotropic(0.4), E1)
        dist = SingularMatrixNormal(E1, sigma)
        draws = sample_singular_mn(dist, rng, size=10**5)
        emp = np.einsum("tpd,tqd->pq", draws, draws) / draws.shape[0]
        rel = np.linalg.norm(emp - sigma) / np.linalg.norm(sigma)
        assert rel < 0.05

    def test_draws_are_tangent(self):
        rng = np.random.default_rng(8)
        base = random_semi_orthogonal(5, 2, rng)
        sigma = build_row_covariance(CovStructure.ar1(0.3, 0.5), base)
        dist = SingularMatrixNormal(base, sigma)
        draws = sample_singular_mn(dist, rng, size=200)
        viol = np.einsum("pd,tpe->tde", base.basis, draws)
        assert np.max(np.abs(viol)) < 1e-10

    def test_mean_is_zero_at_clt_rate(self):
        rng = np.random.default_rng(9)
        sigma = build_row_covariance(CovStructure.isotropic(0.5), E1)
        dist = SingularMatrixNormal(E1, sigma)
        draws = sample_singular_mn(dist, rng, size=10**5)
        bound = 4.0 * np.sqrt(np.trace(sigma) / 10**5)
        assert np.linalg.norm(draws.mean(axis=0)) < bound


class TestSingularLogpdf:
    def test_zero_point_value(self):
        sigma = build_row_covariance(CovStructure.isotropic(1.0), E1)
        dist = SingularMatrixNormal(E1, sigma)
        tv = tangent_project(E1, np.zeros((3, 1)))
        got = logpdf_singular_mn(dist, tv)
        expected = -0.5 * 2 * np.log(2 * np.pi) - 0.5 * np.sum(np.log(dist.eigvals))
        assert abs(got - expected) < 1e-12

    def test_matches_eigenbasis_gaussian(self):
        rng = np.random.default_rng(10)
        base = random_semi_orthogonal(6, 2, rng)
        sigma = build_row_covariance(CovStructure.ar1(0.4, 0.3), base)
        dist = SingularMatrixNormal(base, sigma)
        oracle = multivariate_normal(mean=np.zeros(dist.rank), cov=np.diag(dist.eigvals))
        for _ in range(20):
            tv = sample_singular_mn(dist, rng)
            coords = dist.eigvecs.T @ tv.mat
            expected = sum(oracle.logpdf(coords[:, j]) for j in range(base.d))
            assert abs(logpdf_singular_mn(dist, tv) - expected) < 1e-10

    def test_off_support_rejected(self):
        sigma = build_row_covariance(CovStructure.isotropic(0.5), E1)
        dist = SingularMatrixNormal(E1, sigma)
        off = TangentVector(np.array([[0.0], [0.0], [0.0]]), E1)
        ok = logpdf_singular_mn(dist, off)  # zero is on the support
        assert np.isfinite(ok)
        base5 = random_semi_orthogonal(5, 1, np.random.default_rng(3))
        # rank-1 row covariance: anything outside its range is off support
        k = base5.complement_projector()
        direction = k @ np.eye(5)[:, [1]]
        direction /= np.linalg.norm(direction)
        rank1 = 0.3 * direction @ direction.T
        dist5 = SingularMatrixNormal(base5, rank1)
        other = tangent_project(base5, np.eye(5)[:, [2]])
        with pytest.raises(DomainError):
            logpdf_singular_mn(dist5, other)

    def test_monte_carlo_normalization(self):
        # Importance-sample the density over its 2-d support; the integral
        # of exp(logpdf) should be 1.
        rng = np.random.default_rng(11)
        sigma = build_row_covariance(CovStructure.isotropic(0.3), E1)
        dist = SingularMatrixNormal(E1, sigma)
        n = 10**5
        scale = 1.2
        coords = rng.standard_normal((n, dist.rank)) * scale
        logq = multivariate_normal(
            mean=np.zeros(dist.rank), cov=scale**2 * np.eye(dist.rank)
        ).logpdf(coords)
        mats = coords @ dist.eigvecs.T  # n x p
        logp = np.array(
            [
                logpdf_singular_mn(dist, TangentVector(m[:, None], E1))
                for m in mats
            ]
        )
        integral = np.mean(np.exp(logp - logq))
        assert abs(integral - 1.0) < 0.02

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=15, deadline=None)
    def test_rotation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        base = random_semi_orthogonal(5, 2, rng)
        sigma = build_row_covariance(CovStructure.isotropic(0.5), base)
        dist = SingularMatrixNormal(base, sigma)
        tv = sample_singular_mn(dist, rng)
        rot, _ = np.linalg.qr(rng.standard_normal((2, 2)))
        rotated = TangentVector(tv.mat @ rot, base)
        assert abs(logpdf_singular_mn(dist, rotated) - logpdf_singular_mn(dist, tv)) < 1e-10

    def test_scale_confounding_of_general_density(self):
        # (s Sigma, s^{-1} Omega) and (Sigma, Omega) give the same density.
        rng = np.random.default_rng(13)
        base = random_semi_orthogonal(5, 2, rng)
        sigma = build_row_covariance(CovStructure.ar1(0.5, 0.4), base)
        omega = np.array([[1.0, 0.3], [0.3, 1.0]])
        dist = SingularMatrixNormal(base, sigma)
        dist2 = SingularMatrixNormal(base, 2.0 * sigma)
        tv = sample_singular_mn(dist, rng)
        a = _logpdf_singular_general(dist, tv.mat, omega)
        b = _logpdf_singular_general(dist2, tv.mat, 0.5 * omega)
        assert abs(a - b) < 1e-10


class TestMatrixNormal:
    def test_scalar_standard_normal(self):
        params = MatrixNormalParams(np.zeros((1, 1)), np.eye(1), np.eye(1))
        assert abs(logpdf_matrix_normal(params, np.zeros((1, 1))) + 0.5 * np.log(2 * np.pi)) < 1e-14

    def test_matches_kronecker_vectorization(self):
        rng = np.random.default_rng(14)
        a = rng.standard_normal((3, 3))
        row = a @ a.T + 3 * np.eye(3)
        b = rng.standard_normal((2, 2))
        col = b @ b.T + 2 * np.eye(2)
        mean = rng.standard_normal((3, 2))
        z = rng.standard_normal((3, 2))
        params = MatrixNormalParams(mean, row, col)
        got = logpdf_matrix_normal(params, z)
        vec = (z - mean).reshape(-1, order="F")
        oracle = multivariate_normal(mean=np.zeros(6), cov=np.kron(col, row)).logpdf(vec)
        assert abs(got - oracle) < 1e-10

    def test_shift_invariance(self):
        rng = np.random.default_rng(15)
        row = np.eye(3) * 1.5
        col = np.eye(4) * 0.7
        mean = rng.standard_normal((3, 4))
        z = rng.standard_normal((3, 4))
        a = logpdf_matrix_normal(MatrixNormalParams(mean, row, col), z)
        b = logpdf_matrix_normal(MatrixNormalParams(np.zeros((3, 4)), row, col), z - mean)
        assert abs(a - b) < 1e-12

    def test_non_pd_rejected(self):
        with pytest.raises(DomainError):
            MatrixNormalParams(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2))
