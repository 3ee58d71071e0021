"""Base-model pretraining and joint training of the adapter pool."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .adapters import BaseAdapterPool, IndicatorSet, alpha_matrix, init_pool
from .model import (TransformerWeights, adapted_sites, backward, first_layer_queries_batch,
                    forward_trace, lora_backward, nll_loss_and_grad)
from .numerics import PcaProjection, fit_pca, kmeans, pca_project
from .tasks import Example, pack_batch, query_tokens


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_bases: int = 8
    rank: int = 4
    scaling: float = 4.0
    pca_dim: int = 16
    use_pca: bool = True
    embed_positions: bool = False
    normalize_alpha: bool = True
    lr: float = 3e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    max_iters: int = 600
    seed: int = 0
    embedding_sample_cap: int = 10_000
    kmeans_iters: int = 100

    def __post_init__(self):
        if self.n_bases < 1 or self.batch_size < 1 or self.rank < 1:
            raise ValueError("n_bases, rank and batch_size must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be nonnegative")


# values reported for the full-size setup; far too slow for a CPU desk run
PAPER_PROFILE = TrainConfig(n_bases=32, rank=4, scaling=4.0, lr=1e-4, batch_size=128, max_iters=800)


class AdamW:
    """Decoupled-weight-decay Adam over a dict of arrays, updated in place."""

    steps_taken = 0   # process-wide count of optimizer steps

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        AdamW.steps_taken += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            p = params[k]
            dt = p.dtype.type
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m = self.m[k] = dt(self.b1) * self.m[k] + dt(1.0 - self.b1) * g
            v = self.v[k] = dt(self.b2) * self.v[k] + dt(1.0 - self.b2) * (g * g)
            if self.wd:
                p -= dt(lr * self.wd) * p
            p -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))


def cosine_lr(base_lr: float, it: int, total: int) -> float:
    """Cosine annealing from ``base_lr`` to zero over ``total`` steps, no warmup."""
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * it / max(total, 1)))


def batch_schedule(n: int, batch_size: int, iters: int, seed: int):
    """Yield ``iters`` index batches from successive seeded permutations of range(n)."""
    rng = np.random.default_rng(seed)
    buf = np.empty(0, dtype=np.int64)
    for _ in range(iters):
        while buf.size < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def query_embeddings(w: TransformerWeights, examples, use_positions: bool = True) -> np.ndarray:
    """First-layer pooled query embedding of every example prompt (frozen base)."""
    return first_layer_queries_batch(w, [query_tokens(ex.prompt) for ex in examples], use_positions)


def extract_embeddings(w: TransformerWeights, examples, cap: int = 10_000, seed: int = 0,
                       use_positions: bool = True) -> np.ndarray:
    if len(examples) == 0:
        raise ValueError("corpus is empty")
    if cap >= len(examples):
        chosen = list(examples)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(len(examples), size=cap, replace=False))
        chosen = [examples[i] for i in idx]
    return query_embeddings(w, chosen, use_positions)


def build_indicators(embeddings, cfg: TrainConfig) -> IndicatorSet:
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.shape[0] < cfg.n_bases:
        raise ValueError(f"need at least n_bases={cfg.n_bases} embeddings, got {emb.shape[0]}")
    if cfg.use_pca:
        pca = fit_pca(emb, cfg.pca_dim)
    else:
        d = emb.shape[1]
        pca = PcaProjection(np.zeros(d), np.eye(d), np.ones(d))
    z = pca_project(pca, emb)
    cents = kmeans(z, cfg.n_bases, seed=cfg.seed, max_iters=cfg.kmeans_iters)
    return IndicatorSet(pca, cents, cfg.use_pca, cfg.embed_positions)


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    alpha_records: list = field(default_factory=list)   # (task tag, alpha vector) per training example
    wall_clock: float = 0.0

    def jsonl_lines(self):
        import json
        for i, loss in enumerate(self.losses):
            yield json.dumps({"iter": i, "loss": loss})
        for tag, a in self.alpha_records:
            yield json.dumps({"task": tag, "alpha": [float(x) for x in a]})


def _require_stripped(examples) -> None:
    for ex in examples:
        if not isinstance(ex, Example):
            raise TypeError("the pool trainer only accepts label-free Example records")


def train_pool(w: TransformerWeights, examples, ind: IndicatorSet, cfg: TrainConfig,
               tags=None, pool: BaseAdapterPool | None = None) -> tuple[BaseAdapterPool, TrainLog]:
    """Jointly train the adapter pool; base weights stay frozen.

    Each example's blend weights come from its frozen-base embedding and the
    fixed indicators. ``tags`` (task names aligned with ``examples``) are only
    copied into the log for later analysis; the optimisation never sees them.
    """
    _require_stripped(examples)
    if ind.n_bases != cfg.n_bases:
        raise ValueError(f"indicators have {ind.n_bases} centroids, config asks for {cfg.n_bases} adapters")
    t0 = time.perf_counter()
    dtype = w.config.dtype
    if pool is None:
        pool = init_pool(adapted_sites(w.config), w.config.d_model, cfg.n_bases, cfg.rank,
                         cfg.scaling, cfg.seed, dtype)
    else:
        pool = pool.copy()
    pool.indicator_checksum = ind.checksum()
    alphas = alpha_matrix(ind, query_embeddings(w, examples, ind.embed_positions), cfg.normalize_alpha).astype(dtype)
    log = TrainLog()
    if tags is not None:
        log.alpha_records = [(t, alphas[i].astype(np.float64)) for i, t in enumerate(tags)]
    params = {}
    for site, (A, B) in pool.factors.items():
        params[site + ".A"] = A
        params[site + ".B"] = B
    opt = AdamW(cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    for it, idx in enumerate(batch_schedule(len(examples), cfg.batch_size, cfg.max_iters, cfg.seed)):
        batch = pack_batch([examples[i] for i in idx])
        loss, grads = lora_backward(w, pool.factors, pool.scale, alphas[idx], batch)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss} at iteration {it}")
        log.losses.append(loss)
        flat = {}
        for site, (dA, dB) in grads.items():
            flat[site + ".A"] = dA
            flat[site + ".B"] = dB
        opt.step(params, flat, cosine_lr(cfg.lr, it, cfg.max_iters))
    log.wall_clock = time.perf_counter() - t0
    return pool, log


def alpha_diversity_report(log: TrainLog) -> dict:
    """Per-task mean/std of every adapter's blend weight, plus cross-task mean gaps."""
    if not log.alpha_records:
        raise ValueError("log holds no alpha records")
    tags = sorted({t for t, _ in log.alpha_records})
    allv = np.array([a for _, a in log.alpha_records])
    per_task = {}
    for t in tags:
        a = np.array([v for tt, v in log.alpha_records if tt == t])
        per_task[t] = {"mean": a.mean(axis=0).tolist(), "std": a.std(axis=0).tolist(), "count": len(a)}
    means = np.array([per_task[t]["mean"] for t in tags])
    gap = means.max(axis=0) - means.min(axis=0)
    return {
        "tasks": tags,
        "per_task": per_task,
        "adapter_std": allv.std(axis=0).tolist(),
        "mean_adapter_std": float(allv.std(axis=0).mean()),
        "max_mean_gap_per_adapter": gap.tolist(),
        "max_mean_gap": float(gap.max()),
    }


def pretrain_base(w: TransformerWeights, examples, iters: int, batch_size: int = 32, lr: float = 3e-3,
                  seed: int = 0, answer_only: bool = False, weight_decay: float = 0.0,
                  log_every: int = 0) -> tuple[TransformerWeights, list]:
    """Plain next-token training of every base parameter; returns a new weight object."""
    params = {k: v.copy() for k, v in w.params.items()}
    out = TransformerWeights(w.config, params)
    opt = AdamW(lr, weight_decay=weight_decay)
    losses = []
    for it, idx in enumerate(batch_schedule(len(examples), batch_size, iters, seed)):
        batch = pack_batch([examples[i] for i in idx], answer_only=answer_only)
        logits, trace = forward_trace(out, None, batch.inputs)
        loss, dl = nll_loss_and_grad(logits, batch.targets, batch.mask)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss} at iteration {it}")
        grads, _ = backward(out, trace, dl)
        opt.step(params, grads, cosine_lr(lr, it, iters))
        losses.append(loss)
        if log_every and it % log_every == 0:
            print(f"pretrain iter {it} loss {loss:.4f}", flush=True)
    return out, losses
