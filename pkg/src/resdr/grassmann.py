"""Geometry of the Grassmann manifold Gr(p, d).

Points are d-dimensional linear subspaces of R^p, stored as p x d
semi-orthogonal bases. Tangent vectors at a subspace [U] are p x d matrices V
with U^T V = 0. The module provides the exact exponential map and its inverse,
the principal-angle geodesic distance, and iterative Frechet (Karcher) means.

Bases are non-unique: two bases related by a d x d orthogonal rotation span
the same subspace. All semantic comparisons therefore go through
``riemann_distance``; sign canonicalization of computed bases exists purely so
that repeated runs produce identical representatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import ConvergenceError, DomainError

ORTHONORMAL_TOL = 1e-10
TANGENT_TOL = 1e-10
EXP_TANGENT_TOL = 1e-8
LOG_SINGULAR_TOL = 1e-10


def canonicalize_signs(mat: np.ndarray) -> np.ndarray:
    """Flip column signs so each column's largest-magnitude entry is positive.

    Ties are broken by the first occurrence, which is deterministic. This
    picks a reproducible representative out of the 2^d sign choices left by
    QR/SVD/eigen decompositions; it never changes the spanned subspace.
    """
    out = np.array(mat, dtype=float)
    for j in range(out.shape[1]):
        k = int(np.argmax(np.abs(out[:, j])))
        if out[k, j] < 0:
            out[:, j] = -out[:, j]
    return out


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Subspace:
    """A point on Gr(p, d), held as a p x d semi-orthogonal basis.

    Equality of subspaces is a geometric notion: use ``riemann_distance`` or
    ``is_same``; never compare bases elementwise.
    """

    basis: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=float)
        if b.ndim != 2:
            raise DomainError(f"basis must be a 2-d array, got ndim={b.ndim}")
        p, d = b.shape
        if not 1 <= d < p:
            raise DomainError(f"need 1 <= d < p, got p={p}, d={d}")
        gram = b.T @ b
        if np.max(np.abs(gram - np.eye(d))) > ORTHONORMAL_TOL:
            raise DomainError("basis is not semi-orthogonal within 1e-10")
        object.__setattr__(self, "basis", _readonly(b))

    @property
    def p(self) -> int:
        return self.basis.shape[0]

    @property
    def d(self) -> int:
        return self.basis.shape[1]

    def projector(self) -> np.ndarray:
        """Orthogonal projector U U^T onto the subspace."""
        return self.basis @ self.basis.T

    def complement_projector(self) -> np.ndarray:
        """Projector I - U U^T onto the orthogonal complement."""
        return np.eye(self.p) - self.projector()

    def is_same(self, other: "Subspace", tol: float = 1e-8) -> bool:
        return riemann_distance(self, other) < tol


@dataclass(frozen=True, eq=False)
class TangentVector:
    """A p x d matrix orthogonal to its base subspace (U^T V = 0)."""

    mat: np.ndarray
    base: Subspace

    def __post_init__(self):
        m = np.asarray(self.mat, dtype=float)
        if m.shape != (self.base.p, self.base.d):
            raise DomainError(
                f"tangent matrix shape {m.shape} does not match base "
                f"({self.base.p}, {self.base.d})"
            )
        if np.max(np.abs(self.base.basis.T @ m)) > TANGENT_TOL:
            raise DomainError("matrix is not tangent at base within 1e-10")
        object.__setattr__(self, "mat", _readonly(m))

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.mat))

    def __add__(self, other: "TangentVector") -> "TangentVector":
        return TangentVector(self.mat + other.mat, self.base)

    def __mul__(self, c: float) -> "TangentVector":
        return TangentVector(self.mat * c, self.base)

    __rmul__ = __mul__


def random_semi_orthogonal(p: int, d: int, rng: np.random.Generator) -> Subspace:
    """Random subspace from the QR factor of a uniform(-1, 1) p x d matrix.

    Deterministic for a fixed generator state.
    """
    if not 1 <= d < p:
        raise DomainError(f"need 1 <= d < p, got p={p}, d={d}")
    a = rng.uniform(-1.0, 1.0, size=(p, d))
    q, _ = np.linalg.qr(a)
    return Subspace(canonicalize_signs(q))


def tangent_project(base: Subspace, a: np.ndarray) -> TangentVector:
    """Project an arbitrary p x d matrix onto the tangent space at ``base``.

    Returns (I - U U^T) A attached to ``base``.
    """
    a = np.asarray(a, dtype=float)
    if a.shape != (base.p, base.d):
        raise DomainError(
            f"matrix shape {a.shape} does not match base ({base.p}, {base.d})"
        )
    u = base.basis
    return TangentVector(a - u @ (u.T @ a), base)


def exp_map_representative(base: Subspace, mat: np.ndarray) -> np.ndarray:
    """The raw geodesic endpoint basis U M + Q N, without canonicalization.

    With QR = V and thin SVD R = Phi diag(theta) D^T, M = D cos(theta) D^T
    and N = Phi sin(theta) D^T, cosine and sine taken elementwise on the
    diagonal. The sign symmetry of this representative (V and -V give
    oppositely signed images) matters when the basis multiplies a signal, so
    samplers must use this form rather than the canonicalized ``exp_map``.
    """
    u = base.basis
    v = np.asarray(mat, dtype=float)
    if v.shape != (base.p, base.d):
        raise DomainError("velocity shape does not match base")
    if np.max(np.abs(u.T @ v)) > EXP_TANGENT_TOL:
        raise DomainError("velocity is not tangent at base (violation > 1e-8)")
    q, r = np.linalg.qr(v)
    phi, theta, dt = np.linalg.svd(r)
    dmat = dt.T
    m = dmat @ np.diag(np.cos(theta)) @ dmat.T
    n = phi @ np.diag(np.sin(theta)) @ dmat.T
    return u @ m + q @ n


def exp_map(base: Subspace, velocity: TangentVector) -> Subspace:
    """Geodesic exponential: follow the tangent direction for unit time.

    Returns the image subspace with a canonicalized basis; use
    ``exp_map_representative`` where the sign of the representative matters.
    """
    u2 = exp_map_representative(base, velocity.mat)
    # Exact in theory; re-orthonormalize to keep the invariant at 1e-10.
    q2, _ = np.linalg.qr(u2)
    return Subspace(canonicalize_signs(q2))


# The tangent-space random-effects law is defined under the inner product
# (1/2) tr(V1^T V2): a displacement V in those coordinates subtends standard
# principal angles |V| / sqrt(2). The geometry functions above use arc-length
# (standard) coordinates; the model layer converts through this scale.
RANDOM_EFFECT_SCALE = 1.0 / np.sqrt(2.0)


def exp_map_random_effect(base: Subspace, mat: np.ndarray) -> np.ndarray:
    """Basis representative reached by a random-effect tangent coordinate.

    Applies the raw exponential-map representative after converting the
    half-metric coordinates to arc length.
    """
    return exp_map_representative(base, RANDOM_EFFECT_SCALE * np.asarray(mat, dtype=float))


def log_map_random_effect(base: Subspace, target: Subspace) -> np.ndarray:
    """Random-effect tangent coordinates of a subspace relative to a base."""
    return log_map(base, target).mat / RANDOM_EFFECT_SCALE


def log_map(base: Subspace, target: Subspace) -> TangentVector:
    """Inverse exponential: the velocity reaching ``target`` from ``base``.

    Uses the thin SVD Q* S* D^T of (I - U1 U1^T) U2 (U1^T U2)^{-1}; the
    result is Q* arctan(S*) D^T. Only defined when U1^T U2 is nonsingular,
    i.e. the target lies inside the injectivity neighborhood.
    """
    if (base.p, base.d) != (target.p, target.d):
        raise DomainError("base and target live on different Grassmannians")
    u1, u2 = base.basis, target.basis
    m0 = u1.T @ u2
    if np.linalg.svd(m0, compute_uv=False).min() <= LOG_SINGULAR_TOL:
        raise DomainError(
            "target is outside the injectivity neighborhood of base "
            "(U1^T U2 is numerically singular)"
        )
    g = np.linalg.solve(m0.T, (u2 - u1 @ m0).T).T
    qs, sig, dt = np.linalg.svd(g, full_matrices=False)
    v = qs @ np.diag(np.arctan(sig)) @ dt
    v -= u1 @ (u1.T @ v)  # kill numerical drift off the tangent space
    return TangentVector(v, base)


def riemann_distance(a: Subspace, b: Subspace) -> float:
    """Geodesic distance: root sum of squared principal angles.

    The angles are arccos of the singular values of A^T B clamped into
    [0, 1]; scipy's combined sine/cosine algorithm computes them without the
    arccos precision loss near zero angle. Bounded by sqrt(d) pi / 2.
    """
    if (a.p, a.d) != (b.p, b.d):
        raise DomainError("subspaces live on different Grassmannians")
    angles = scipy.linalg.subspace_angles(a.basis, b.basis)
    return float(np.sqrt(np.sum(angles**2)))


def frechet_variance(samples: list[Subspace], center: Subspace) -> float:
    """Mean geodesic distance of the samples from ``center``."""
    return float(np.mean([riemann_distance(s, center) for s in samples]))


def frechet_mean(
    samples: list[Subspace], tol: float = 1e-9, max_iter: int = 200
) -> tuple[Subspace, float]:
    """Sample Frechet mean and variance of subspaces.

    The mean is computed by the standard fixed-point iteration: lift all
    samples to the tangent space at the current estimate, average, and follow
    the exponential map, until the tangent mean has Frobenius norm below
    ``tol``. The returned variance is the mean geodesic distance of the
    samples from the mean.

    Raises ``ConvergenceError`` (carrying the last iterate and its variance)
    if ``max_iter`` is exhausted, and propagates ``DomainError`` from
    ``log_map`` when a sample falls outside the injectivity neighborhood of
    the running estimate.
    """
    if not samples:
        raise DomainError("need at least one sample")
    dims = {(s.p, s.d) for s in samples}
    if len(dims) != 1:
        raise DomainError(f"samples live on different Grassmannians: {dims}")
    estimate = samples[0]
    step_norms = []
    for _ in range(max_iter):
        lifted = np.mean([log_map(estimate, s).mat for s in samples], axis=0)
        step = float(np.linalg.norm(lifted))
        step_norms.append(step)
        if step < tol:
            return estimate, frechet_variance(samples, estimate)
        estimate = exp_map(estimate, TangentVector(lifted, estimate))
    raise ConvergenceError(
        f"Frechet mean did not converge in {max_iter} iterations "
        f"(last tangent-mean norm {step_norms[-1]:.3e})",
        last=(estimate, frechet_variance(samples, estimate)),
        trace=np.asarray(step_norms),
    )
