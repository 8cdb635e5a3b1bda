"""Matrix-normal laws: the dense density, structured row covariances, and the
singular (tangent-space) matrix normal that drives the random-effect
subspaces.

The singular law MN(0, Sigma, I_d) lives on the tangent space at a base
subspace [Gamma0]: its row covariance annihilates Gamma0 and has rank at most
p - d. Its density is the degenerate-Gaussian density on that support, so the
normalizer uses the support dimension rank(Sigma) * d rather than p * d, with
the pseudo-determinant of Sigma raised to the d/2 power. Both conventions are
pinned down by the Monte-Carlo normalization and eigenbasis-reduction tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError
from .grassmann import Subspace, TangentVector

PSD_TOL = 1e-10
RANK_CUTOFF = 1e-10  # relative to the largest eigenvalue
SUPPORT_TOL = 1e-8
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class CovStructure:
    """Parametric family for the pre-projection row covariance Sigma-tilde.

    ``kind`` is one of diagonal, isotropic, ar1, exchangeable, unstructured;
    the class constructors below are the supported entry points.
    """

    kind: str
    variance: float | np.ndarray | None = None
    rho: float | None = None
    cov: float | None = None
    matrix: np.ndarray | None = None

    @classmethod
    def diagonal(cls, variance) -> "CovStructure":
        """Diagonal Sigma-tilde; ``variance`` is a scalar or a length-p vector."""
        return cls(kind="diagonal", variance=variance)

    @classmethod
    def isotropic(cls, variance: float) -> "CovStructure":
        if variance <= 0:
            raise DomainError("isotropic variance must be > 0")
        return cls(kind="isotropic", variance=float(variance))

    @classmethod
    def ar1(cls, variance: float, rho: float) -> "CovStructure":
        if not -1.0 < rho < 1.0:
            raise DomainError("AR(1) autocorrelation must lie in (-1, 1)")
        return cls(kind="ar1", variance=float(variance), rho=float(rho))

    @classmethod
    def exchangeable(cls, variance: float, cov: float) -> "CovStructure":
        return cls(kind="exchangeable", variance=float(variance), cov=float(cov))

    @classmethod
    def unstructured(cls, matrix: np.ndarray) -> "CovStructure":
        return cls(kind="unstructured", matrix=np.asarray(matrix, dtype=float))

    def realize(self, p: int) -> np.ndarray:
        """Materialize the p x p matrix Sigma-tilde."""
        if self.kind == "diagonal":
            v = np.asarray(self.variance, dtype=float)
            diag = np.full(p, float(v)) if v.ndim == 0 else v
            if diag.shape != (p,):
                raise DomainError(f"diagonal variances have length {diag.shape}, need {p}")
            mat = np.diag(diag)
        elif self.kind == "isotropic":
            mat = float(self.variance) * np.eye(p)
        elif self.kind == "ar1":
            idx = np.arange(p)
            mat = float(self.variance) * self.rho ** np.abs(idx[:, None] - idx[None, :])
        elif self.kind == "exchangeable":
            mat = np.full((p, p), float(self.cov))
            np.fill_diagonal(mat, float(self.variance))
        elif self.kind == "unstructured":
            mat = np.asarray(self.matrix, dtype=float)
            if mat.shape != (p, p):
                raise DomainError(f"unstructured matrix has shape {mat.shape}, need ({p}, {p})")
        else:
            raise DomainError(f"unknown covariance kind {self.kind!r}")
        mat = 0.5 * (mat + mat.T)
        eigmin = float(np.linalg.eigvalsh(mat).min())
        if eigmin < -PSD_TOL * max(1.0, float(np.abs(mat).max())):
            raise DomainError(f"{self.kind} structure realizes a non-PSD matrix")
        return mat


def build_row_covariance(struct: CovStructure, base: Subspace) -> np.ndarray:
    """Project a structured covariance orthogonal to the base: K Sigma-tilde K
    with K = I - Gamma0 Gamma0^T. The result annihilates the base subspace."""
    sig = struct.realize(base.p)
    k = base.complement_projector()
    out = k @ sig @ k
    return 0.5 * (out + out.T)


@dataclass(frozen=True, eq=False)
class SingularMatrixNormal:
    """Zero-mean matrix normal on the tangent space at ``base``.

    Row covariance ``row_cov`` must annihilate the base subspace and have rank
    at most p - d; the column covariance is fixed to the identity, so the d
    tangent columns are independent draws from the degenerate N_p(0, row_cov).
    """

    base: Subspace
    row_cov: np.ndarray
    eigvals: np.ndarray = field(init=False)
    eigvecs: np.ndarray = field(init=False)

    def __post_init__(self):
        sig = np.asarray(self.row_cov, dtype=float)
        p, d = self.base.p, self.base.d
        if sig.shape != (p, p):
            raise DomainError(f"row covariance has shape {sig.shape}, need ({p}, {p})")
        if np.max(np.abs(sig - sig.T)) > PSD_TOL:
            raise DomainError("row covariance is not symmetric within 1e-10")
        if np.linalg.norm(sig @ self.base.basis) > SUPPORT_TOL:
            raise DomainError("row covariance does not annihilate the base subspace")
        w, v = np.linalg.eigh(0.5 * (sig + sig.T))
        if w.min() < -PSD_TOL:
            raise DomainError("row covariance has eigenvalues below -1e-10")
        cutoff = RANK_CUTOFF * max(w.max(), 0.0)
        keep = w > max(cutoff, 0.0)
        if int(keep.sum()) > p - d:
            raise DomainError(f"row covariance rank {int(keep.sum())} exceeds p - d = {p - d}")
        object.__setattr__(self, "row_cov", sig)
        object.__setattr__(self, "eigvals", w[keep])
        object.__setattr__(self, "eigvecs", v[:, keep])

    @property
    def rank(self) -> int:
        return self.eigvals.size

    def pinv(self) -> np.ndarray:
        """Moore-Penrose inverse via the stored eigendecomposition."""
        if self.rank == 0:
            return np.zeros_like(self.row_cov)
        return (self.eigvecs / self.eigvals) @ self.eigvecs.T


def sample_singular_mn(
    dist: SingularMatrixNormal, rng: np.random.Generator, size: int | None = None
):
    """Draw tangent vectors from the singular matrix normal.

    Draws standard normal coordinates in the eigenbasis of the row covariance
    range and maps them out, then re-projects onto the tangent space to pin
    the invariant exactly. With ``size=None`` returns one ``TangentVector``;
    otherwise a ``(size, p, d)`` array of tangent matrices.
    """
    p, d = dist.base.p, dist.base.d
    t = 1 if size is None else int(size)
    if dist.rank == 0:
        mats = np.zeros((t, p, d))
    else:
        g = rng.standard_normal((t, dist.rank, d))
        fac = dist.eigvecs * np.sqrt(dist.eigvals)
        mats = np.einsum("pk,tkd->tpd", fac, g)
        u = dist.base.basis
        mats -= np.einsum("pq,tqd->tpd", u @ u.T, mats)
    if size is None:
        return TangentVector(mats[0], dist.base)
    return mats


def _logpdf_singular_general(
    dist: SingularMatrixNormal, mat: np.ndarray, omega: np.ndarray
) -> float:
    """Degenerate matrix-normal log density with a general column covariance.

    Support dimension is rank(Sigma) * d; the normalizer carries
    pdet(Sigma)^{d/2} pdet(Omega)^{k/2}. Only the identity-Omega version is
    public; this generalized form exists for the scale-confounding check
    (sSigma, s^{-1}Omega) ~ (Sigma, Omega).
    """
    p, d = dist.base.p, dist.base.d
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (p, d):
        raise DomainError(f"tangent matrix has shape {mat.shape}, need ({p}, {d})")
    k = dist.rank
    coords = dist.eigvecs.T @ mat if k else np.zeros((0, d))
    recon = dist.eigvecs @ coords if k else np.zeros_like(mat)
    if np.max(np.abs(mat - recon)) > SUPPORT_TOL:
        raise DomainError("matrix lies off the support of the singular law")
    if k == 0:
        return 0.0
    omega = np.asarray(omega, dtype=float)
    sign, logdet_omega = np.linalg.slogdet(omega)
    if sign <= 0:
        raise DomainError("column covariance must be positive definite")
    quad = float(np.trace(np.linalg.solve(omega, coords.T @ (coords / dist.eigvals[:, None]))))
    return (
        -0.5 * k * d * LOG_2PI
        - 0.5 * d * float(np.sum(np.log(dist.eigvals)))
        - 0.5 * k * float(logdet_omega)
        - 0.5 * quad
    )


def logpdf_singular_mn(dist: SingularMatrixNormal, vec: TangentVector) -> float:
    """Log density of a tangent vector under the singular matrix normal.

    Raises ``DomainError`` if the vector has a component off the support
    (along the base subspace or along null directions of the row covariance)
    exceeding 1e-8.
    """
    if vec.mat.shape != (dist.base.p, dist.base.d):
        raise DomainError("tangent vector shape does not match the distribution")
    return _logpdf_singular_general(dist, vec.mat, np.eye(dist.base.d))


@dataclass(frozen=True, eq=False)
class MatrixNormalParams:
    """Parameters of a dense matrix normal MN(mean, row_cov, col_cov)."""

    mean: np.ndarray
    row_cov: np.ndarray
    col_cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        row = np.asarray(self.row_cov, dtype=float)
        col = np.asarray(self.col_cov, dtype=float)
        p, m = mean.shape
        if row.shape != (p, p) or col.shape != (m, m):
            raise DomainError("covariance shapes do not match the mean")
        for name, mat in (("row", row), ("col", col)):
            try:
                np.linalg.cholesky(mat)
            except np.linalg.LinAlgError:
                raise DomainError(f"{name} covariance is not positive definite") from None
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "row_cov", row)
        object.__setattr__(self, "col_cov", col)


def logpdf_matrix_normal(params: MatrixNormalParams, z: np.ndarray) -> float:
    """Dense matrix-normal log density.

    -(pm/2) log 2pi - (m/2) log|row| - (p/2) log|col|
    - tr(col^{-1} (Z-M)^T row^{-1} (Z-M)) / 2.
    """
    z = np.asarray(z, dtype=float)
    p, m = params.mean.shape
    if z.shape != (p, m):
        raise DomainError(f"observation has shape {z.shape}, need ({p}, {m})")
    resid = z - params.mean
    lr = np.linalg.cholesky(params.row_cov)
    lc = np.linalg.cholesky(params.col_cov)
    logdet_row = 2.0 * float(np.sum(np.log(np.diag(lr))))
    logdet_col = 2.0 * float(np.sum(np.log(np.diag(lc))))
    a = np.linalg.solve(lr, resid)        # row whitening
    b = np.linalg.solve(lc, a.T)          # column whitening
    quad = float(np.sum(b * b))
    return -0.5 * (p * m * LOG_2PI + m * logdet_row + p * logdet_col + quad)
