import numpy as np

from resdr.data import Cluster, ClusteredDataset
from resdr.grassmann import Subspace, exp_map_representative, random_semi_orthogonal
from resdr.matnorm import CovStructure, SingularMatrixNormal, build_row_covariance, sample_singular_mn


def ar1_correlation(p, rho=0.5):
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def make_continuous_data(
    n,
    rng,
    p=7,
    d=1,
    sigma_struct=None,
    delta=None,
    m_range=(10, 15),
    gamma0=None,
):
    """Cubic inverse-model clusters: X = Gamma_i v_y + noise, with the
    cluster bases exp-mapped tangent-normal perturbations of a shared one.

    Returns (dataset, truth dict). ``sigma_struct=None`` means no
    heterogeneity (all clusters share the base subspace).
    """
    if gamma0 is None:
        gamma0 = random_semi_orthogonal(p, d, rng)
    if delta is None:
        delta = ar1_correlation(p)
    if sigma_struct is None:
        sigma = np.zeros((p, p))
    else:
        sigma = build_row_covariance(sigma_struct, gamma0)
    dist = SingularMatrixNormal(gamma0, sigma)
    chol = np.linalg.cholesky(delta)
    clusters = []
    gammas = []
    for i in range(n):
        m = int(rng.integers(m_range[0], m_range[1] + 1))
        y = rng.standard_normal(m)
        v = sample_singular_mn(dist, rng)
        # The raw representative keeps the sign-symmetric law of the paper's
        # construction; canonicalizing here would bias the pooled signal.
        basis_i = exp_map_representative(gamma0, v.mat)
        gammas.append(Subspace(basis_i))
        if d == 1:
            vy = (y + 0.5 * y**2 + y**3 / 3.0)[:, None]
        else:
            vy = np.column_stack([y + 0.5 * y**2 + y**3 / 3.0, y])[:, :d]
        noise = rng.standard_normal((m, p)) @ chol.T
        x = vy @ basis_i.T + noise
        clusters.append(Cluster(id=f"c{i}", y=y, X=x))
    truth = {
        "gamma0": gamma0,
        "gamma_i": gammas,
        "sigma": sigma,
        "delta": delta,
    }
    return ClusteredDataset(clusters=tuple(clusters)), truth
