"""Clustered datasets: n independent clusters of (y, X, optional binary W)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError


def _readonly(a):
    out = np.asarray(a)
    out = np.array(out, dtype=out.dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Cluster:
    """One cluster: m responses, an m x p covariate matrix, and optionally q
    binary covariates stored as a length-q vector when time-invariant or an
    m x q matrix when time-varying."""

    id: str
    y: np.ndarray
    X: np.ndarray
    W: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.X, dtype=float)
        if y.ndim != 1 or x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise DomainError(f"cluster {self.id}: y and X shapes are inconsistent")
        if y.size < 1:
            raise DomainError(f"cluster {self.id}: needs at least one observation")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise DomainError(f"cluster {self.id}: contains missing or non-finite values")
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "X", _readonly(x))
        if self.W is not None:
            w = np.asarray(self.W, dtype=float)
            if w.ndim not in (1, 2):
                raise DomainError(f"cluster {self.id}: W must be a vector or matrix")
            if w.ndim == 2 and w.shape[0] != y.shape[0]:
                raise DomainError(f"cluster {self.id}: W row count does not match y")
            if not np.all(np.isin(w, (0.0, 1.0))):
                raise DomainError(f"cluster {self.id}: W entries must be 0 or 1")
            object.__setattr__(self, "W", _readonly(w))

    @property
    def m(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        if self.W is None:
            return 0
        return self.W.shape[-1]

    def w_matrix(self) -> np.ndarray | None:
        """Per-observation W rows (time-invariant vectors are broadcast)."""
        if self.W is None:
            return None
        if self.W.ndim == 1:
            return np.tile(self.W, (self.m, 1))
        return np.asarray(self.W)


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    clusters: tuple[Cluster, ...]

    def __post_init__(self):
        clusters = tuple(self.clusters)
        if not clusters:
            raise DomainError("dataset has no clusters")
        p = clusters[0].p
        q = clusters[0].q
        kinds = set()
        for c in clusters:
            if c.p != p:
                raise DomainError(f"cluster {c.id}: p={c.p} differs from {p}")
            if c.q != q:
                raise DomainError(f"cluster {c.id}: q={c.q} differs from {q}")
            if c.W is not None:
                kinds.add("invariant" if c.W.ndim == 1 else "varying")
        if len(kinds) > 1:
            raise DomainError("clusters mix time-invariant and time-varying W")
        object.__setattr__(self, "clusters", clusters)

    @property
    def n(self) -> int:
        return len(self.clusters)

    @property
    def p(self) -> int:
        return self.clusters[0].p

    @property
    def q(self) -> int:
        return self.clusters[0].q

    @property
    def N(self) -> int:
        return sum(c.m for c in self.clusters)

    @property
    def w_kind(self) -> str | None:
        """None, "invariant", or "varying"."""
        if self.q == 0:
            return None
        return "invariant" if self.clusters[0].W.ndim == 1 else "varying"

    def stacked_X(self) -> np.ndarray:
        return np.vstack([c.X for c in self.clusters])

    def stacked_y(self) -> np.ndarray:
        return np.concatenate([c.y for c in self.clusters])

    def stacked_W(self) -> np.ndarray | None:
        if self.q == 0:
            return None
        return np.vstack([c.w_matrix() for c in self.clusters])
