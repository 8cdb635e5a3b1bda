"""Fixed-effects inverse regression: polynomial response bases, the global
pooled fit (GPFC, optionally with non-reduced-rank binary covariates via
partial covariances), and separate per-cluster fits (SPFC) with their
manifold aggregates.

The global fit is the maximum-likelihood reduced-rank regression of the
covariates on the response bases: the subspace estimate comes from the top
eigenvectors of Sxx^{-1/2} Sxf Sff^{-1} Sfx Sxx^{-1/2} (partial covariances
given W when present), mapped back through Sxx^{1/2} and orthonormalized.
The residual covariance at that optimum is the likelihood's covariance
estimate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .data import Cluster, ClusteredDataset
from .exceptions import ConvergenceError, DomainError, IllConditionedError
from .grassmann import Subspace, canonicalize_signs, frechet_mean, log_map

COND_LIMIT = 1e12
EIG_TIE_TOL = 1e-12


@dataclass(frozen=True)
class BasisConfig:
    """Polynomial response bases f_y = (y, y^2, ..., y^degree), centered
    either within each cluster or around the global mean."""

    degree: int = 4
    centering: str = "within-cluster"

    def __post_init__(self):
        if self.degree < 1:
            raise DomainError("basis degree must be >= 1")
        if self.centering not in ("within-cluster", "global"):
            raise DomainError(f"unknown centering {self.centering!r}")


@dataclass(eq=False)
class Bases:
    per_cluster: list[np.ndarray]
    degenerate_ids: list[str] = field(default_factory=list)

    def stacked(self) -> np.ndarray:
        return np.vstack(self.per_cluster)


def build_bases(data: ClusteredDataset, cfg: BasisConfig) -> Bases:
    """Per-observation basis rows for every cluster.

    Within-cluster centering makes each cluster's basis columns sum to zero;
    global centering removes the pooled column means. Clusters whose response
    is constant produce an all-zero centered basis and are flagged (their
    rank problems surface in the downstream fits).
    """
    raw = []
    degenerate = []
    for c in data.clusters:
        powers = np.vander(c.y, N=cfg.degree + 1, increasing=True)[:, 1:]
        raw.append(powers)
        if c.m > 1 and np.ptp(c.y) == 0.0:
            degenerate.append(c.id)
    if degenerate:
        warnings.warn(
            f"constant response within cluster(s) {degenerate}: centered bases are degenerate",
            RuntimeWarning,
            stacklevel=2,
        )
    if cfg.centering == "within-cluster":
        per_cluster = [f - f.mean(axis=0, keepdims=True) for f in raw]
    else:
        gmean = np.vstack(raw).mean(axis=0, keepdims=True)
        per_cluster = [f - gmean for f in raw]
    return Bases(per_cluster=per_cluster, degenerate_ids=degenerate)


@dataclass(eq=False)
class PfcFit:
    """A fitted inverse-regression model X | y = mu + Gamma C f_y (+ beta W)."""

    mu: np.ndarray
    Gamma: Subspace
    C: np.ndarray
    Delta: np.ndarray
    loglik: float
    beta: np.ndarray | None = None
    mu_w: np.ndarray | None = None
    n_obs: int = 0


def _check_condition(mat: np.ndarray, name: str) -> None:
    w = np.linalg.eigvalsh(mat)
    if w.min() <= 0 or w.max() / w.min() > COND_LIMIT:
        raise IllConditionedError(
            f"{name} is singular or has condition number above 1e12"
        )


def _sym_sqrt_and_inv_sqrt(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh(mat)
    if w.min() <= 0:
        raise IllConditionedError("covariance matrix is not positive definite")
    root = (v * np.sqrt(w)) @ v.T
    inv_root = (v / np.sqrt(w)) @ v.T
    return root, inv_root


def _top_eigvecs(sym: np.ndarray, d: int) -> np.ndarray:
    """Leading d eigenvectors, descending eigenvalues, sign-canonicalized.

    Ties below 1e-12 are resolved by the canonical order eigh returns after
    the descending sort, which is deterministic for identical inputs.
    """
    w, v = np.linalg.eigh(0.5 * (sym + sym.T))
    order = np.argsort(w)[::-1]
    return canonicalize_signs(v[:, order[:d]])


def _pfc_core(
    xc: np.ndarray, f: np.ndarray, wc: np.ndarray | None, d: int
) -> tuple[Subspace, np.ndarray, np.ndarray, np.ndarray | None]:
    """Shared eigen-solution for pooled and per-cluster fits.

    Takes centered covariates, centered bases, and optionally centered
    non-reduced-rank covariates; returns (Gamma, C, Delta, beta).
    """
    n_obs, p = xc.shape
    r = f.shape[1]
    if d > min(p, r):
        raise DomainError(f"d={d} exceeds min(p, r) = {min(p, r)}")
    sxx = xc.T @ xc / n_obs
    sxf = xc.T @ f / n_obs
    sff = f.T @ f / n_obs
    _check_condition(sff, "basis covariance")
    if wc is not None:
        sww = wc.T @ wc / n_obs
        _check_condition(sww, "W covariance")
        sxw = xc.T @ wc / n_obs
        sfw = f.T @ wc / n_obs
        # partial covariances controlling for W
        sxf = sxf - sxw @ np.linalg.solve(sww, sfw.T)
        sff = sff - sfw @ np.linalg.solve(sww, sfw.T)
        _check_condition(sff, "partial basis covariance")
    root, inv_root = _sym_sqrt_and_inv_sqrt(sxx)
    kernel = inv_root @ sxf @ np.linalg.solve(sff, sxf.T) @ inv_root
    vecs = _top_eigvecs(kernel, d)
    gamma_raw = root @ vecs
    q, _ = np.linalg.qr(gamma_raw)
    gamma = Subspace(canonicalize_signs(q))
    # Rank-d coefficient on f: project the (partial) OLS coefficient onto the
    # fitted subspace in the Sxx metric, then read off C = Gamma^T B.
    b_full = np.linalg.solve(sff, sxf.T).T  # p x r
    proj = root @ vecs @ vecs.T @ inv_root
    b_d = proj @ b_full
    c = gamma.basis.T @ b_d
    beta = None
    if wc is not None:
        sxw = xc.T @ wc / n_obs
        sfw = f.T @ wc / n_obs
        sww = wc.T @ wc / n_obs
        beta = np.linalg.solve(sww, (sxw - b_d @ sfw).T).T
    resid = xc - f @ b_d.T
    if wc is not None:
        resid = resid - wc @ beta.T
    delta = resid.T @ resid / n_obs
    delta = 0.5 * (delta + delta.T)
    try:
        np.linalg.cholesky(delta)
    except np.linalg.LinAlgError:
        raise IllConditionedError("residual covariance is singular") from None
    return gamma, c, delta, beta


def _gaussian_loglik(resid: np.ndarray, delta: np.ndarray) -> float:
    n_obs, p = resid.shape
    try:
        chol = np.linalg.cholesky(delta)
    except np.linalg.LinAlgError:
        raise DomainError("Delta is not positive definite") from None
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    white = np.linalg.solve(chol, resid.T)
    quad = float(np.sum(white * white))
    return -0.5 * (n_obs * p * np.log(2.0 * np.pi) + n_obs * logdet + quad)


def fit_gpfc(data: ClusteredDataset, d: int, cfg: BasisConfig | None = None) -> PfcFit:
    """Pooled inverse-regression fit ignoring the clustering.

    When the dataset carries binary covariates W they enter as
    non-reduced-rank fixed effects, and the subspace solution uses partial
    covariances controlling for W.
    """
    cfg = cfg or BasisConfig()
    p, q = data.p, data.q
    r = cfg.degree
    if data.N <= p + r + q:
        raise DomainError(f"need N > p + r + q = {p + r + q}, got N = {data.N}")
    f = build_bases(data, cfg).stacked()
    x = data.stacked_X()
    xbar = x.mean(axis=0)
    xc = x - xbar
    wc = None
    mu_w = None
    if q:
        w = data.stacked_W()
        mu_w = w.mean(axis=0)
        wc = w - mu_w
    gamma, c, delta, beta = _pfc_core(xc, f, wc, d)
    mu = xbar
    resid = xc - f @ (gamma.basis @ c).T
    if wc is not None:
        resid = resid - wc @ beta.T
    loglik = _gaussian_loglik(resid, delta)
    return PfcFit(
        mu=mu, Gamma=gamma, C=c, Delta=delta, loglik=loglik,
        beta=beta, mu_w=mu_w, n_obs=data.N,
    )


def loglik_pfc(fit: PfcFit, data: ClusteredDataset, cfg: BasisConfig | None = None) -> float:
    """Gaussian log-likelihood of the model at the fit's parameters,
    constant included."""
    cfg = cfg or BasisConfig()
    f = build_bases(data, cfg).stacked()
    x = data.stacked_X()
    resid = x - fit.mu - f @ (fit.Gamma.basis @ fit.C).T
    if fit.beta is not None and data.q:
        resid = resid - (data.stacked_W() - fit.mu_w) @ fit.beta.T
    return _gaussian_loglik(resid, fit.Delta)


def _fit_single_cluster(cluster: Cluster, f: np.ndarray, d: int) -> PfcFit:
    xc = cluster.X - cluster.X.mean(axis=0)
    gamma, c, delta, _ = _pfc_core(xc, f, None, d)
    loglik = _gaussian_loglik(xc - f @ (gamma.basis @ c).T, delta)
    return PfcFit(
        mu=cluster.X.mean(axis=0), Gamma=gamma, C=c, Delta=delta,
        loglik=loglik, n_obs=cluster.m,
    )


@dataclass(eq=False)
class SpfcResult:
    """Per-cluster fits plus the manifold aggregates used as the SPFC
    baseline: transformed subspaces Delta_i^{-1}[Gamma_i], their Frechet
    mean, and the tangent-space covariance built from log maps at the mean."""

    fits: dict[str, PfcFit]
    theta: dict[str, Subspace]
    unusable_ids: list[str]
    theta0: Subspace | None = None
    frechet_var: float = float("nan")
    sigma: np.ndarray | None = None
    sigma_dropped: int = 0


def transformed_subspace(delta: np.ndarray, gamma: Subspace) -> Subspace:
    """Orthonormalized basis of Delta^{-1} [Gamma]."""
    q, _ = np.linalg.qr(np.linalg.solve(delta, gamma.basis))
    return Subspace(canonicalize_signs(q))


def fit_spfc(
    data: ClusteredDataset,
    d: int,
    cfg: BasisConfig | None = None,
    n_jobs: int = 1,
) -> SpfcResult:
    """Separate per-cluster fits; clusters with m_i <= p + degree are too
    small for a nonsingular residual covariance and are reported unusable."""
    cfg = cfg or BasisConfig()
    bases = build_bases(data, cfg)
    p, r = data.p, cfg.degree
    usable = []
    unusable = []
    for cluster, f in zip(data.clusters, bases.per_cluster):
        if cluster.m > p + r:
            usable.append((cluster, f))
        else:
            unusable.append(cluster.id)
    if not usable:
        raise DomainError("no cluster has m_i > p + degree; SPFC cannot be fit")
    fitted = Parallel(n_jobs=n_jobs)(
        delayed(_fit_single_cluster)(cluster, f, d) for cluster, f in usable
    )
    fits = {cluster.id: fit for (cluster, _), fit in zip(usable, fitted)}
    theta = {
        cid: transformed_subspace(fit.Delta, fit.Gamma) for cid, fit in fits.items()
    }
    result = SpfcResult(fits=fits, theta=theta, unusable_ids=unusable)
    subspaces = list(theta.values())
    try:
        mean, var = frechet_mean(subspaces)
    except ConvergenceError as err:
        mean, var = err.last
    result.theta0 = mean
    result.frechet_var = var
    lifted = []
    dropped = 0
    for s in subspaces:
        try:
            lifted.append(log_map(mean, s).mat)
        except DomainError:
            dropped += 1
    if lifted:
        stack = np.stack(lifted)
        sigma = np.einsum("npd,nqd->pq", stack, stack) / len(lifted)
        result.sigma = 0.5 * (sigma + sigma.T)
    result.sigma_dropped = dropped
    return result
