"""Low-rank adapter pool, blend-weight indicators and the blending algebra."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .model import DeltaSet, SiteDelta
from .numerics import (CentroidSet, PcaProjection, ZeroVectorError, cosine_rows,
                       pca_project)


class PoolMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class LoraPair:
    A: np.ndarray   # (d, r)
    B: np.ndarray   # (r, d)
    scaling: float

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def delta(self) -> np.ndarray:
        return (self.scaling / self.rank) * (self.A @ self.B)


@dataclass
class BaseAdapterPool:
    """N adapters over the same sites; ``factors[site] = (A (N,d,r), B (N,r,d))``."""
    n_bases: int
    rank: int
    scaling: float
    factors: dict
    indicator_checksum: str = ""

    def __post_init__(self):
        if self.n_bases < 1 or self.rank < 1:
            raise PoolMismatchError("n_bases and rank must be >= 1")
        for site, (A, B) in self.factors.items():
            if A.shape[0] != self.n_bases or B.shape[0] != self.n_bases:
                raise PoolMismatchError(f"n_bases: {site} holds {A.shape[0]} adapters, pool declares {self.n_bases}")
            if A.shape[2] != self.rank or B.shape[1] != self.rank:
                raise PoolMismatchError(f"rank: {site} factors have rank {A.shape[2]}, pool declares {self.rank}")

    @property
    def scale(self) -> float:
        return self.scaling / self.rank

    @property
    def sites(self) -> list[str]:
        return list(self.factors)

    def pair(self, n: int, site: str) -> LoraPair:
        A, B = self.factors[site]
        return LoraPair(A[n], B[n], self.scaling)

    def tensors(self) -> dict:
        out = {}
        for site, (A, B) in self.factors.items():
            out[f"lora.{site}.A"] = A
            out[f"lora.{site}.B"] = B
        return out

    def checksum(self) -> str:
        h = hashlib.sha256(tensorio.tensors_checksum(self.tensors()).encode())
        h.update(json.dumps([self.n_bases, self.rank, float(self.scaling)]).encode())
        return h.hexdigest()

    def copy(self) -> "BaseAdapterPool":
        return BaseAdapterPool(self.n_bases, self.rank, self.scaling,
                               {s: (A.copy(), B.copy()) for s, (A, B) in self.factors.items()},
                               self.indicator_checksum)


def init_pool(sites, d_model: int, n_bases: int, rank: int, scaling: float, seed: int,
              dtype=np.float32, init_scale: float | None = None) -> BaseAdapterPool:
    """A ~ U(-b, b) with b = 1/sqrt(d) (seeded), B = 0, so the initial delta is zero."""
    rng = np.random.default_rng(seed)
    bound = init_scale if init_scale is not None else 1.0 / np.sqrt(d_model)
    factors = {}
    for site in sites:
        A = rng.uniform(-bound, bound, (n_bases, d_model, rank)).astype(dtype)
        B = np.zeros((n_bases, rank, d_model), dtype=dtype)
        factors[site] = (A, B)
    return BaseAdapterPool(n_bases, rank, scaling, factors)


@dataclass(frozen=True)
class IndicatorSet:
    pca: PcaProjection
    centroids: CentroidSet
    use_pca: bool = True
    embed_positions: bool = False   # whether query embeddings include position embeddings

    def __post_init__(self):
        if self.pca.out_dim != self.centroids.centroids.shape[1]:
            raise PoolMismatchError("pca out_dim differs from centroid dimension")
        c = self.centroids.centroids
        if not np.all(np.isfinite(c)):
            raise ZeroVectorError("indicator centroids must be finite")
        # a single-adapter pool never consults its centroid (alpha is 1), so it may sit at the origin
        if c.shape[0] > 1 and np.any(np.linalg.norm(c, axis=1) == 0):
            raise ZeroVectorError("indicator centroids must be finite and nonzero")

    @property
    def n_bases(self) -> int:
        return self.centroids.n

    def tensors(self) -> dict:
        return {"indicator.pca_mean": self.pca.mean,
                "indicator.pca_components": self.pca.components,
                "indicator.pca_variance": self.pca.explained_variance,
                "indicator.centroids": self.centroids.centroids}

    def checksum(self) -> str:
        return tensorio.tensors_checksum(self.tensors())


@dataclass(frozen=True)
class BlendWeights:
    alphas: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        lo = 0.0 if self.normalized else -1.0
        a = np.asarray(self.alphas)
        if a.ndim != 1 or np.any(a < lo - 1e-12) or np.any(a > 1.0 + 1e-12):
            raise ValueError(f"alphas must be a vector in [{lo}, 1]")

    @property
    def n(self) -> int:
        return len(self.alphas)

    @classmethod
    def one_hot(cls, n: int, k: int) -> "BlendWeights":
        a = np.zeros(n)
        a[k] = 1.0
        return cls(a, True)


def alpha_matrix(ind: IndicatorSet, queries, normalize: bool = True) -> np.ndarray:
    """Blend weights for each row of ``queries`` (M, d_model) -> (M, N)."""
    z = pca_project(ind.pca, np.atleast_2d(queries))
    if ind.n_bases == 1:
        # a one-adapter pool is the plain single LoRA: full weight for every input
        return np.ones((z.shape[0], 1))
    c = ind.centroids.centroids
    cn = np.linalg.norm(c, axis=1)
    zn = np.linalg.norm(z, axis=1)
    if np.any(zn == 0):
        raise ZeroVectorError("projected query embedding is the zero vector")
    cos = np.clip((z @ c.T) / (zn[:, None] * cn[None, :]), -1.0, 1.0)
    return (cos + 1.0) / 2.0 if normalize else cos


def alpha_from_embedding(ind: IndicatorSet, q, normalize: bool = True,
                         sum_to_one: bool = False) -> BlendWeights:
    q = np.asarray(q, dtype=np.float64)
    if ind.n_bases == 1:
        pca_project(ind.pca, q)  # dimension check only
        return BlendWeights(np.ones(1), normalize)
    z = pca_project(ind.pca, q)
    a = cosine_rows(ind.centroids.centroids, z)
    if normalize:
        a = (a + 1.0) / 2.0
    if sum_to_one:
        a = a / a.sum()
    return BlendWeights(a, normalize)


def _stacked(pool: BaseAdapterPool, w: BlendWeights, site: str):
    A, B = pool.factors[site]
    n, d, r = A.shape
    coef = (np.asarray(w.alphas, dtype=np.float64) * pool.scale).astype(A.dtype)
    a_stack = A.transpose(1, 0, 2).reshape(d, n * r)
    b_stack = (coef[:, None, None] * B).reshape(n * r, B.shape[2])
    return a_stack, b_stack


def _check_alphas(pool: BaseAdapterPool, w: BlendWeights) -> None:
    if w.n != pool.n_bases:
        raise PoolMismatchError(f"n_bases: {w.n} alphas for a pool of {pool.n_bases}")


def combine_pool(pool: BaseAdapterPool, w: BlendWeights) -> DeltaSet:
    """Per-site delta ``(s/r) * sum_n alpha_n A_n B_n`` in stacked low-rank form."""
    _check_alphas(pool, w)
    sites = {}
    for site in pool.sites:
        a, b = _stacked(pool, w, site)
        sites[site] = SiteDelta(a=a, b=b)
    return DeltaSet(sites)


@dataclass
class CustomizedAdapter:
    sites: dict            # site -> (A_stack (d, N r), B_stack (N r, d))
    effective_rank: int
    alphas: np.ndarray
    normalized: bool
    pool_checksum: str

    def delta(self) -> DeltaSet:
        return DeltaSet({s: SiteDelta(a=a, b=b) for s, (a, b) in self.sites.items()})

    def to_dense(self) -> dict:
        return {s: a @ b for s, (a, b) in self.sites.items()}

    def tensors(self) -> dict:
        out = {}
        for s, (a, b) in self.sites.items():
            out[f"adapter.{s}.A"] = a
            out[f"adapter.{s}.B"] = b
        out["adapter.alphas"] = np.asarray(self.alphas, dtype=np.float64)
        return out


def blend_customized(pool: BaseAdapterPool, w: BlendWeights) -> CustomizedAdapter:
    """Training-free customized adapter; same sum as :func:`combine_pool`."""
    delta = combine_pool(pool, w)
    sites = {s: (sd.a, sd.b) for s, sd in delta.sites.items()}
    return CustomizedAdapter(sites, pool.n_bases * pool.rank, np.asarray(w.alphas, dtype=np.float64).copy(),
                             w.normalized, pool.checksum())


def dense_blend(pool: BaseAdapterPool, w: BlendWeights) -> dict:
    """Brute-force dense sum, adapter by adapter (reference form)."""
    out = {}
    for site in pool.sites:
        acc = None
        for n in range(pool.n_bases):
            term = w.alphas[n] * pool.pair(n, site).delta()
            acc = term if acc is None else acc + term
        out[site] = acc
    return out


POOL_FORMAT = 1


def pool_manifest(pool: BaseAdapterPool, ind: IndicatorSet) -> dict:
    return {
        "kind": "pool",
        "pool_format": POOL_FORMAT,
        "n_bases": pool.n_bases,
        "rank": pool.rank,
        "scaling": float(pool.scaling),
        "sites": pool.sites,
        "use_pca": ind.use_pca,
        "embed_positions": ind.embed_positions,
        "pca_rank_deficient": ind.pca.rank_deficient,
        "checksum": pool.checksum(),
        "indicator_checksum": ind.checksum(),
    }


def save_pool(path, pool: BaseAdapterPool, ind: IndicatorSet) -> str:
    """Write pool + indicators; returns the pool checksum."""
    if ind.n_bases != pool.n_bases:
        raise PoolMismatchError(f"n_bases: indicators have {ind.n_bases}, pool has {pool.n_bases}")
    tensors = {**pool.tensors(), **ind.tensors()}
    tensorio.save(path, tensors, pool_manifest(pool, ind))
    return pool.checksum()


def load_pool(path) -> tuple[BaseAdapterPool, IndicatorSet]:
    tensors, cfg = tensorio.load(path)
    if cfg.get("kind") != "pool":
        raise tensorio.TensorFileError(f"{path} is not a pool file")
    if cfg.get("pool_format") != POOL_FORMAT:
        raise tensorio.VersionMismatchError(f"pool_format {cfg.get('pool_format')}, expected {POOL_FORMAT}")
    n, r = cfg["n_bases"], cfg["rank"]
    factors = {}
    for site in cfg["sites"]:
        try:
            A, B = tensors[f"lora.{site}.A"], tensors[f"lora.{site}.B"]
        except KeyError:
            raise PoolMismatchError(f"sites: tensors for {site} are missing") from None
        if A.shape[0] != n or B.shape[0] != n:
            raise PoolMismatchError(f"n_bases: manifest says {n}, tensors for {site} hold {A.shape[0]}")
        if A.shape[2] != r or B.shape[1] != r:
            raise PoolMismatchError(f"rank: manifest says {r}, tensors for {site} have {A.shape[2]}")
        factors[site] = (A, B)
    cents = tensors["indicator.centroids"]
    if cents.shape[0] != n:
        raise PoolMismatchError(f"n_bases: manifest says {n}, indicator centroids hold {cents.shape[0]}")
    pca = PcaProjection(tensors["indicator.pca_mean"], tensors["indicator.pca_components"],
                        tensors["indicator.pca_variance"], cfg["pca_rank_deficient"])
    ind = IndicatorSet(pca, CentroidSet(cents, np.zeros(0, dtype=np.int64), float("nan")), cfg["use_pca"],
                       cfg["embed_positions"])
    pool = BaseAdapterPool(n, r, cfg["scaling"], factors, cfg["indicator_checksum"])
    if pool.checksum() != cfg["checksum"]:
        raise tensorio.CorruptFileError("checksum: pool tensors do not match the recorded checksum")
    if ind.checksum() != cfg["indicator_checksum"]:
        raise tensorio.CorruptFileError("indicator_checksum: indicator tensors do not match")
    return pool, ind
