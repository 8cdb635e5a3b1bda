"""Two-stage random-effects inverse regression for continuous predictors.

Stage 1 estimates the base subspace with the pooled fit (``fit_gpfc``).
Stage 2 removes the cluster intercepts by within-cluster centering and runs a
Monte-Carlo EM on the centered matrices: the E-step draws tangent vectors
from the current random-effects law, maps them to candidate subspaces, and
weights them by the matrix-normal likelihood of each cluster; the M-step has
closed-form updates for the noise covariance, the coefficient matrix, and the
random-effects covariance (unstructured or isotropic; other structures are
updated by maximizing the same objective numerically).

Seeding: every E-step iteration draws fresh samples from a child seed derived
from the master seed by counter-mode spawning, so runs are reproducible and
independent of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .data import Cluster, ClusteredDataset
from .exceptions import (
    ConvergenceError,
    DomainError,
    IllConditionedError,
    McDegeneracyError,
)
from .grassmann import (
    RANDOM_EFFECT_SCALE,
    Subspace,
    TangentVector,
    canonicalize_signs,
    exp_map_random_effect,
)
from .inverse_regression import (
    BasisConfig,
    PfcFit,
    build_bases,
    fit_gpfc,
    transformed_subspace,
)
from .matnorm import CovStructure, SingularMatrixNormal, sample_singular_mn

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class McemConfig:
    mc_samples: int = 400
    max_iter: int = 100
    tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.mc_samples < 2:
            raise DomainError("mc_samples must be >= 2")
        if self.tol <= 0:
            raise DomainError("tol must be > 0")


@dataclass(eq=False)
class CenteredCluster:
    """Within-cluster centered data with the last (redundant) column dropped.

    Z is p x (m-1), H is r x (m-1); the column correlation L = I - J/m has
    the closed-form inverse I + J and log-determinant -log m.
    """

    id: str
    Z: np.ndarray
    H: np.ndarray
    m: int
    w_adjustment: np.ndarray | None = None  # subtracted from Z before storage

    @property
    def L(self) -> np.ndarray:
        k = self.m - 1
        return np.eye(k) - np.ones((k, k)) / self.m

    @property
    def Linv(self) -> np.ndarray:
        k = self.m - 1
        return np.eye(k) + np.ones((k, k))

    @property
    def logdet_L(self) -> float:
        return -float(np.log(self.m))


def center_clusters(
    data: ClusteredDataset,
    cfg: BasisConfig | None = None,
    w_coef: np.ndarray | None = None,
) -> tuple[list[CenteredCluster], list[str]]:
    """Cluster-center the covariates and bases, dropping singleton clusters.

    The centered columns of each cluster sum to zero, so the last column is
    dropped. When ``w_coef`` (p x q) is given and the dataset carries
    time-varying binary covariates, their centered fixed-effect contribution
    is subtracted from Z first; time-invariant covariates cancel in the
    centering and need no adjustment.
    """
    cfg = cfg or BasisConfig()
    bases = build_bases(data, BasisConfig(degree=cfg.degree, centering="within-cluster"))
    centered = []
    excluded = []
    for cluster, f in zip(data.clusters, bases.per_cluster):
        if cluster.m < 2:
            excluded.append(cluster.id)
            continue
        z = (cluster.X - cluster.X.mean(axis=0)).T  # p x m
        h = f.T                                     # r x m, already centered
        adjustment = None
        if w_coef is not None and data.w_kind == "varying":
            w = cluster.w_matrix()
            wc = (w - w.mean(axis=0)).T
            adjustment = w_coef @ wc
            z = z - adjustment
        centered.append(
            CenteredCluster(
                id=cluster.id,
                Z=z[:, :-1],
                H=h[:, :-1],
                m=cluster.m,
                w_adjustment=None if adjustment is None else adjustment[:, :-1],
            )
        )
    if not centered:
        raise DomainError("all clusters are singletons; stage 2 needs m_i >= 2")
    return centered, excluded


@dataclass(eq=False)
class EStep:
    """One E-step: shared tangent draws, their subspace images, per-cluster
    normalized weights, and the importance-sampled marginal log-likelihood."""

    V: np.ndarray          # (T, p, d) tangent draws
    Gamma: np.ndarray      # (T, p, d) exp-mapped bases
    weights: np.ndarray    # (n, T) rows sum to one
    loglik: float
    loglik_se: float
    per_cluster_loglik: np.ndarray


def _exp_map_batch(gamma0: Subspace, v: np.ndarray) -> np.ndarray:
    """Representatives reached by a (T, p, d) stack of random-effect draws.

    The draws live in the half-metric tangent coordinates of the
    random-effects law, so arc lengths are |v| / sqrt(2). The sign-symmetric
    raw representative is required here because these bases multiply the
    coefficient matrix inside the likelihood. d = 1 is vectorized via the
    closed form; higher d falls back to the per-sample formula.
    """
    t = v.shape[0]
    if gamma0.d == 1:
        norms = RANDOM_EFFECT_SCALE * np.linalg.norm(v[:, :, 0], axis=1)
        out = np.empty_like(v)
        safe = norms > 0
        u = gamma0.basis[None, :, 0]
        out[:, :, 0] = np.cos(norms)[:, None] * u
        if np.any(safe):
            dirs = v[safe, :, 0] / np.linalg.norm(v[safe, :, 0], axis=1)[:, None]
            out[safe, :, 0] += np.sin(norms[safe])[:, None] * dirs
        return out
    gammas = np.empty_like(v)
    for i in range(t):
        gammas[i] = exp_map_random_effect(gamma0, v[i])
    return gammas


def _draw_samples(
    gamma0: Subspace, sigma: np.ndarray, t: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    dist = SingularMatrixNormal(gamma0, sigma)
    v = sample_singular_mn(dist, rng, size=t)
    return v, _exp_map_batch(gamma0, v)


@dataclass(eq=False)
class _Stats:
    """Stacked fixed-size sufficient statistics of the centered clusters:
    G_i = Z L^{-1} H^T, F_i = H L^{-1} H^T, ZLZ_i = Z L^{-1} Z^T."""

    G: np.ndarray       # (n, p, r)
    F: np.ndarray       # (n, r, r)
    ZLZ: np.ndarray     # (n, p, p)
    k: np.ndarray       # (n,) centered column counts m_i - 1
    logdet_L: np.ndarray
    ids: list[str]


def _cluster_stats(clusters: list[CenteredCluster]) -> _Stats:
    g, f, zlz, k, ld, ids = [], [], [], [], [], []
    for cl in clusters:
        linv = cl.Linv
        zl = cl.Z @ linv
        g.append(zl @ cl.H.T)
        f.append(cl.H @ linv @ cl.H.T)
        zlz.append(zl @ cl.Z.T)
        k.append(cl.m - 1)
        ld.append(cl.logdet_L)
        ids.append(cl.id)
    return _Stats(
        G=np.stack(g), F=np.stack(f), ZLZ=np.stack(zlz),
        k=np.asarray(k, dtype=float), logdet_L=np.asarray(ld), ids=ids,
    )


def _log_weights(
    stats: _Stats,
    gammas: np.ndarray,
    C: np.ndarray,
    Delta: np.ndarray,
    p: int,
) -> np.ndarray:
    """Exact matrix-normal log densities, (n, T)."""
    try:
        chol = np.linalg.cholesky(Delta)
    except np.linalg.LinAlgError:
        raise IllConditionedError("Delta is not positive definite") from None
    logdet_delta = 2.0 * float(np.sum(np.log(np.diag(chol))))
    delta_inv = np.linalg.inv(Delta)
    means = np.einsum("tpd,dr->tpr", gammas, C)            # T x p x r
    q_t = np.einsum("pq,tqr->tpr", delta_inv, means)       # Delta^{-1} M_t
    s_t = np.einsum("tpr,tps->trs", means, q_t)            # M_t^T Delta^{-1} M_t
    a = np.einsum("ipq,pq->i", stats.ZLZ, delta_inv)
    cross = np.einsum("ipr,tpr->it", stats.G, q_t)
    curve = np.einsum("irs,trs->it", stats.F, s_t)
    quad = a[:, None] - 2.0 * cross + curve
    return -0.5 * (
        p * stats.k[:, None] * LOG_2PI
        + stats.k[:, None] * logdet_delta
        + p * stats.logdet_L[:, None]
        + quad
    )


def e_step_weights(
    gamma0: Subspace,
    C: np.ndarray,
    Delta: np.ndarray,
    Sigma: np.ndarray,
    clusters: list[CenteredCluster],
    t: int,
    rng: np.random.Generator,
) -> EStep:
    """Draw T shared tangent samples and weight them per cluster.

    Log-weights are the exact matrix-normal log-densities of the centered
    data; normalization is max-shifted so a single dominant sample cannot
    underflow the whole cluster. The per-cluster log mean unnormalized weight
    is the importance-sampled marginal log-likelihood contribution.
    """
    v, gammas = _draw_samples(gamma0, Sigma, t, rng)
    stats = _cluster_stats(clusters)
    logw = _log_weights(stats, gammas, C, Delta, gamma0.p)
    shift = logw.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(shift)):
        bad = clusters[int(np.argmin(np.isfinite(shift.ravel())))].id
        raise McDegeneracyError(
            f"all importance weights underflowed for cluster {bad}; "
            "increase mc_samples"
        )
    weights = np.exp(logw - shift)
    weights /= weights.sum(axis=1, keepdims=True)
    per_cluster = logsumexp(logw, axis=1) - np.log(t)
    # The draws are shared across clusters, so the Monte-Carlo error of the
    # total log-likelihood is driven by the variance over draws of the
    # summed normalized weights (delta method).
    g_t = weights.sum(axis=0) * t
    var = float(np.var(g_t, ddof=1) / t)
    return EStep(
        V=v,
        Gamma=gammas,
        weights=weights,
        loglik=float(np.sum(per_cluster)),
        loglik_se=float(np.sqrt(max(var, 0.0))),
        per_cluster_loglik=per_cluster,
    )


def _sigma_objective(sigma: np.ndarray, second_moment: np.ndarray, n: int, d: int) -> float:
    """Negative Sigma-part of the Q function for structured updates."""
    w = np.linalg.eigvalsh(0.5 * (sigma + sigma.T))
    if w.min() < -1e-10 * max(w.max(), 1.0):
        return np.inf
    keep = w > 1e-12 * max(w.max(), 1e-300)
    if not np.any(keep):
        return np.inf
    logpdet = float(np.sum(np.log(w[keep])))
    pinv_quad = float(np.trace(np.linalg.pinv(sigma, hermitian=True) @ second_moment))
    return 0.5 * n * d * logpdet + 0.5 * pinv_quad


def _update_sigma(
    second_moment: np.ndarray,
    n: int,
    gamma0: Subspace,
    struct: str | CovStructure,
    d: int,
) -> np.ndarray:
    """Maximize the Sigma-part of the Q function.

    Unstructured and isotropic have closed forms; parametric structures are
    optimized numerically over their free parameters.
    """
    p = gamma0.p
    k_proj = gamma0.complement_projector()
    if isinstance(struct, str) and struct == "unstructured":
        sigma = k_proj @ (second_moment / n) @ k_proj
        return 0.5 * (sigma + sigma.T)
    if isinstance(struct, str) and struct == "isotropic":
        s2 = float(np.trace(k_proj @ second_moment)) / (d * (p - d) * n)
        return max(s2, 0.0) * k_proj
    if isinstance(struct, CovStructure):
        kind = struct.kind
    else:
        kind = struct
    if kind == "unstructured":
        return _update_sigma(second_moment, n, gamma0, "unstructured", d)
    if kind == "isotropic":
        return _update_sigma(second_moment, n, gamma0, "isotropic", d)

    def make(value_vec: np.ndarray) -> np.ndarray:
        if kind == "diagonal":
            tilde = np.diag(np.exp(value_vec))
        elif kind == "ar1":
            var = np.exp(value_vec[0])
            rho = np.tanh(value_vec[1])
            idx = np.arange(p)
            tilde = var * rho ** np.abs(idx[:, None] - idx[None, :])
        elif kind == "exchangeable":
            var = np.exp(value_vec[0])
            cov = var * np.tanh(value_vec[1])
            tilde = np.full((p, p), cov)
            np.fill_diagonal(tilde, var)
        else:
            raise DomainError(f"unsupported Sigma structure {kind!r}")
        return k_proj @ tilde @ k_proj

    x0 = {"diagonal": np.zeros(p) - 1.0, "ar1": np.array([-1.0, 0.0]),
          "exchangeable": np.array([-1.0, 0.0])}[kind]
    res = minimize(
        lambda th: _sigma_objective(make(th), second_moment, n, d),
        x0,
        method="Nelder-Mead",
        options={"maxiter": 2000, "xatol": 1e-8, "fatol": 1e-10},
    )
    sigma = make(res.x)
    return 0.5 * (sigma + sigma.T)


def m_step_update(
    estep: EStep,
    clusters: list[CenteredCluster],
    gamma0: Subspace,
    C0: np.ndarray,
    sigma_struct: str | CovStructure = "unstructured",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form M-step: returns (C, Delta, Sigma).

    Delta is the weighted residual covariance over the N - n centered
    columns, evaluated at the previous C; C then solves the weighted linear
    system Xi vec(C) = vec(E) at the new Delta; Sigma is the weighted second
    moment of the tangent draws divided by n (each cluster's weights sum to
    one), projected onto the complement of the base subspace.
    """
    d = gamma0.d
    v, gammas, weights = estep.V, estep.Gamma, estep.weights
    n = len(clusters)
    stats = _cluster_stats(clusters)
    total_cols = float(np.sum(stats.k))  # the centering leaves N - n columns

    means0 = np.einsum("tpd,dr->tpr", gammas, C0)
    gamma_bar = np.einsum("it,tpd->ipd", weights, gammas)      # n x p x d
    mean_bar = np.einsum("ipd,dr->ipr", gamma_bar, C0)         # n x p x r
    f_bar = np.einsum("it,irs->trs", weights, stats.F)         # T x r x r
    cross = np.einsum("ipr,iqr->pq", mean_bar, stats.G)
    curve = np.einsum("tpr,trs,tqs->pq", means0, f_bar, means0)
    delta = (stats.ZLZ.sum(axis=0) - cross - cross.T + curve) / total_cols
    delta = 0.5 * (delta + delta.T)

    delta_inv = np.linalg.inv(delta)
    g_quad = np.einsum("tpd,pq,tqe->tde", gammas, delta_inv, gammas)  # T x d x d
    r = C0.shape[1]
    s_bar = np.einsum("it,tde->ide", weights, g_quad)                 # n x d x d
    xi = np.einsum("irs,ide->rdse", stats.F, s_bar).reshape(d * r, d * r)
    rhs = np.einsum("ipd,pq,iqr->dr", gamma_bar, delta_inv, stats.G)
    try:
        vec_c = np.linalg.solve(xi, rhs.T.reshape(-1))     # column-major vec
    except np.linalg.LinAlgError:
        raise IllConditionedError("coefficient system Xi is singular") from None
    c_new = vec_c.reshape(r, d).T

    w_total = weights.sum(axis=0)                           # per-cluster rows sum to 1
    second = np.einsum("t,tpd,tqd->pq", w_total, v, v)
    sigma = _update_sigma(second, n, gamma0, sigma_struct, d)
    return c_new, delta, sigma


@dataclass(eq=False)
class RpfcFit:
    """Converged two-stage fit with per-cluster subspace predictions."""

    gamma0: Subspace
    C: np.ndarray
    Delta: np.ndarray
    Sigma: np.ndarray
    theta0: Subspace
    cluster_ids: list[str]
    v_hat: list[TangentVector]
    gamma_hat: list[Subspace]
    theta_hat: list[Subspace]
    loglik_trace: np.ndarray
    loglik_se_trace: np.ndarray
    n_iter: int
    excluded_ids: list[str]
    sigma_struct: str | CovStructure = "unstructured"
    gpfc: PfcFit | None = None
    mc_V: np.ndarray | None = None      # final-parameter draws, kept for prediction
    mc_Gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    mu_w: np.ndarray | None = None


def _posterior_summaries(
    fit_gamma0: Subspace,
    estep: EStep,
    delta: np.ndarray,
) -> tuple[list[TangentVector], list[Subspace], list[Subspace]]:
    v_hat, g_hat, t_hat = [], [], []
    for wi in estep.weights:
        vbar = np.einsum("t,tpd->pd", wi, estep.V)
        tv = TangentVector(vbar, fit_gamma0)
        gi = exp_map(fit_gamma0, tv)
        v_hat.append(tv)
        g_hat.append(gi)
        t_hat.append(transformed_subspace(delta, gi))
    return v_hat, g_hat, t_hat


def fit_rpfc(
    data: ClusteredDataset,
    d: int,
    cfg: BasisConfig | None = None,
    mcem: McemConfig | None = None,
    sigma_struct: str | CovStructure = "unstructured",
    gpfc: PfcFit | None = None,
    w_coef: np.ndarray | None = None,
) -> RpfcFit:
    """Two-stage estimator: pooled fit for the base subspace, then MCEM.

    ``gpfc`` lets callers reuse an existing stage-1 fit (the benchmark shares
    it between methods); ``w_coef`` forwards a fixed-effect coefficient for
    time-varying binary covariates so the mixed-predictor model can reuse the
    same stage 2. Convergence is declared when the relative change of the
    approximated marginal log-likelihood falls below ``mcem.tol``.
    """
    cfg = cfg or BasisConfig()
    mcem = mcem or McemConfig()
    if d > min(data.p, cfg.degree):
        raise DomainError(f"d={d} exceeds min(p, degree)")
    if gpfc is None:
        gpfc = fit_gpfc(data, d, cfg)
    gamma0 = gpfc.Gamma
    clusters, excluded = center_clusters(data, cfg, w_coef=w_coef)

    c_cur = np.array(gpfc.C)
    delta_cur = np.array(gpfc.Delta)
    sigma_cur = 0.1 * gamma0.complement_projector()

    trace: list[float] = []
    se_trace: list[float] = []
    converged = False
    for it in range(mcem.max_iter):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=mcem.seed, spawn_key=(it,)))
        estep = e_step_weights(
            gamma0, c_cur, delta_cur, sigma_cur, clusters, mcem.mc_samples, rng
        )
        trace.append(estep.loglik)
        se_trace.append(estep.loglik_se)
        c_cur, delta_cur, sigma_cur = m_step_update(
            estep, clusters, gamma0, c_cur, sigma_struct
        )
        if it > 0:
            rel = abs(trace[-1] - trace[-2]) / max(abs(trace[-2]), 1.0)
            if rel < mcem.tol:
                converged = True
                break
    if not converged:
        raise ConvergenceError(
            f"MCEM did not converge in {mcem.max_iter} iterations",
            last=(c_cur, delta_cur, sigma_cur),
            trace=np.asarray(trace),
        )

    # Final E-step at the converged parameters for posterior predictions.
    rng = np.random.default_rng(np.random.SeedSequence(entropy=mcem.seed, spawn_key=(mcem.max_iter + 1,)))
    final = e_step_weights(
        gamma0, c_cur, delta_cur, sigma_cur, clusters, mcem.mc_samples, rng
    )
    v_hat, g_hat, t_hat = _posterior_summaries(gamma0, final, delta_cur)
    return RpfcFit(
        gamma0=gamma0,
        C=c_cur,
        Delta=delta_cur,
        Sigma=sigma_cur,
        theta0=transformed_subspace(delta_cur, gamma0),
        cluster_ids=[cl.id for cl in clusters],
        v_hat=v_hat,
        gamma_hat=g_hat,
        theta_hat=t_hat,
        loglik_trace=np.asarray(trace),
        loglik_se_trace=np.asarray(se_trace),
        n_iter=len(trace),
        excluded_ids=excluded,
        sigma_struct=sigma_struct,
        gpfc=gpfc,
        mc_V=final.V,
        mc_Gamma=final.Gamma,
        beta=gpfc.beta,
        mu_w=gpfc.mu_w,
    )


def predict_cluster_subspace(
    fit: RpfcFit, cluster: Cluster, cfg: BasisConfig | None = None
) -> tuple[TangentVector, Subspace, Subspace]:
    """Posterior-mean prediction for one cluster at the fitted parameters.

    Reuses the fit's final Monte-Carlo draws: the cluster's weights are
    recomputed, the tangent prediction is the weighted mean, and the
    subspaces follow by the exponential map and the Delta^{-1} transform.
    """
    cfg = cfg or BasisConfig()
    single = ClusteredDataset(clusters=(cluster,))
    centered, _ = center_clusters(
        single, cfg,
        w_coef=fit.beta if single.w_kind == "varying" else None,
    )
    stats = _cluster_stats(centered)
    logw = _log_weights(stats, fit.mc_Gamma, fit.C, fit.Delta, fit.gamma0.p)[0]
    w = np.exp(logw - logw.max())
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise McDegeneracyError(
            f"all importance weights underflowed for cluster {cluster.id}"
        )
    w /= total
    vbar = np.einsum("t,tpd->pd", w, fit.mc_V)
    tv = TangentVector(vbar, fit.gamma0)
    gi = exp_map(fit.gamma0, tv)
    return tv, gi, transformed_subspace(fit.Delta, gi)
