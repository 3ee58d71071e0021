"""Small deterministic linear-algebra primitives: cosine similarity, PCA, k-means."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ZeroVectorError(ValueError):
    """Raised when a direction is requested from an all-zero vector."""


class DimensionError(ValueError):
    pass


class CountError(ValueError):
    pass


MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood). Identical streams on every platform."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randrange(self, n: int) -> int:
        return int(self.uniform() * n)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    sa, sb = np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0)
    if sa == 0.0 or sb == 0.0:
        raise ZeroVectorError("cosine similarity of a zero vector is undefined")
    # rescale first so tiny or huge entries do not under/overflow the norms
    a, b = a / sa, b / sb
    c = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return min(1.0, max(-1.0, c))


def cosine_rows(matrix, v) -> np.ndarray:
    """Cosine similarity between every row of ``matrix`` and ``v``."""
    matrix = np.asarray(matrix, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if matrix.shape[-1] != v.shape[-1]:
        raise DimensionError(f"dimension mismatch: {matrix.shape[-1]} vs {v.shape[-1]}")
    nv = np.linalg.norm(v)
    nm = np.linalg.norm(matrix, axis=-1)
    if nv == 0.0 or np.any(nm == 0.0):
        raise ZeroVectorError("cosine similarity of a zero vector is undefined")
    return np.clip(matrix @ v / (nm * nv), -1.0, 1.0)


@dataclass(frozen=True)
class PcaProjection:
    mean: np.ndarray          # (d,)
    components: np.ndarray    # (d', d), orthonormal rows
    explained_variance: np.ndarray
    rank_deficient: bool = False

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]

    @classmethod
    def identity(cls, d: int) -> "PcaProjection":
        return cls(np.zeros(d), np.eye(d), np.ones(d))


def _fix_signs(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    out = vectors.copy()
    for i, row in enumerate(out):
        nz = np.flatnonzero(np.abs(row) > tol)
        if nz.size and row[nz[0]] < 0:
            out[i] = -row
    return out


def fit_pca(samples, out_dim: int, rank_tol: float = 1e-10) -> PcaProjection:
    """Top ``out_dim`` eigenvectors of the sample covariance, descending eigenvalue order.

    The first nonzero entry of every component is made positive so saved
    projections are stable. When the covariance has fewer than ``out_dim``
    significant eigenvalues the remaining rows are an arbitrary orthonormal
    completion and ``rank_deficient`` is set.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("samples must be a 2-D matrix")
    m, d = x.shape
    if out_dim < 1 or out_dim > d:
        raise DimensionError(f"out_dim={out_dim} must lie in [1, {d}]")
    if m < 2 or m < out_dim:
        raise CountError(f"need at least max(2, out_dim) samples, got {m}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (m - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:out_dim]
    comps = _fix_signs(evecs[:, order].T)
    top = evals[order]
    scale = max(float(evals.max()), 0.0)
    deficient = bool(np.any(top <= rank_tol * max(scale, 1.0)))
    return PcaProjection(mean, comps, np.maximum(top, 0.0), deficient)


def pca_project(p: PcaProjection, x) -> np.ndarray:
    """Project one vector (or each row of a matrix) onto the principal components."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.input_dim:
        raise DimensionError(f"expected {p.input_dim} features, got {x.shape[-1]}")
    return (x - p.mean) @ p.components.T


def pca_reconstruct(p: PcaProjection, z) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) @ p.components + p.mean


@dataclass(frozen=True)
class CentroidSet:
    centroids: np.ndarray      # (k, d)
    labels: np.ndarray         # (M,)
    inertia: float
    history: tuple = field(default=())  # objective after every Lloyd step of the winning run

    @property
    def n(self) -> int:
        return self.centroids.shape[0]


def kmeans_objective(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # explicit differences rather than the |x|^2 - 2xc + |c|^2 expansion: no cancellation
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp(x: np.ndarray, k: int, rng: SplitMix64) -> np.ndarray:
    m = x.shape[0]
    chosen = [rng.randrange(m)]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            # all remaining points coincide with a chosen center; take the first unused index
            unused = [i for i in range(m) if i not in chosen]
            idx = unused[0]
        else:
            target = rng.uniform() * total
            cum = np.cumsum(d2)
            idx = int(np.searchsorted(cum, target, side="right"))
            idx = min(idx, m - 1)
            while d2[idx] == 0.0 and idx > 0:
                idx -= 1
        chosen.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iters: int):
    k = centroids.shape[0]
    labels = None
    history = []
    for _ in range(max_iters):
        new_labels = np.argmin(_sq_dists(x, centroids), axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centroids = np.empty_like(centroids)
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                centroids[j] = np.nan
        empty = np.flatnonzero(np.isnan(centroids[:, 0]))
        if empty.size:
            filled = ~np.isnan(centroids[:, 0])
            taken = set()
            for j in empty:
                # reseed with the point farthest from its own (non-empty) centroid
                own = centroids[labels]
                dist = np.where(filled[labels], ((x - own) ** 2).sum(axis=1), -1.0)
                for t in taken:
                    dist[t] = -1.0
                far = int(np.argmax(dist))
                taken.add(far)
                centroids[j] = x[far]
                labels[far] = j
                filled[j] = True
        history.append(kmeans_objective(x, centroids, labels))
    if labels is None:
        labels = np.argmin(_sq_dists(x, centroids), axis=1)
    return centroids, labels, history


def kmeans(samples, k: int, seed: int = 0, max_iters: int = 100, n_init: int = 8) -> CentroidSet:
    """Lloyd's algorithm from k-means++ seeds; best of ``n_init`` seeded restarts.

    Restarts draw from one SplitMix64 stream, so the result is a pure function
    of ``(samples, k, seed, max_iters, n_init)``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("samples must be a 2-D matrix")
    m = x.shape[0]
    if k < 1 or k > m:
        raise CountError(f"k={k} must lie in [1, {m}]")
    rng = SplitMix64(seed)
    best = None
    for _ in range(max(1, n_init)):
        init = _kmeanspp(x, k, rng)
        cents, labels, hist = _lloyd(x, init, max_iters)
        obj = kmeans_objective(x, cents, labels)
        if best is None or obj < best[2]:
            best = (cents, labels, obj, hist)
    cents, labels, obj, hist = best
    return CentroidSet(cents, labels, obj, tuple(hist))
