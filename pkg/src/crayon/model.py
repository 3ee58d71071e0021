"""Pre-norm decoder-only transformer in numpy with a hand-written backward pass.

Weights use the row-vector convention ``y = x @ W`` with ``W`` of shape
``(d_in, d_out)``. Adapted projection sites (the query and value projections
of every block) accept an additive delta, either dense or stacked low-rank,
shared by the whole batch or one per example.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensorio

LN_EPS = 1e-5


class ModelError(ValueError):
    pass


class TokenRangeError(ModelError):
    pass


class SequenceTooLongError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 24
    precision: int = 32

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ModelError("vocab_size must be >= 2")
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if self.precision not in (32, 64):
            raise ModelError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def adapted_sites(cfg: ModelConfig) -> list[str]:
    return [f"blocks.{l}.{p}" for l in range(cfg.n_layers) for p in ("wq", "wv")]


@dataclass
class TransformerWeights:
    config: ModelConfig
    params: dict

    def checksum(self) -> str:
        return tensorio.tensors_checksum(self.params)

    def astype(self, precision: int) -> "TransformerWeights":
        cfg = ModelConfig(**{**asdict(self.config), "precision": precision})
        return TransformerWeights(cfg, {k: v.astype(cfg.dtype) for k, v in self.params.items()})

    def save(self, path) -> None:
        tensorio.save(path, self.params, {"kind": "transformer", "model": asdict(self.config)})

    @classmethod
    def load(cls, path) -> "TransformerWeights":
        tensors, config = tensorio.load(path)
        if config.get("kind") != "transformer":
            raise tensorio.TensorFileError(f"{path} is not a transformer weight file")
        cfg = ModelConfig(**config["model"])
        expected = param_shapes(cfg)
        for name, shape in expected.items():
            if name not in tensors:
                raise tensorio.TensorFileError(f"missing tensor {name}")
            if tuple(tensors[name].shape) != shape:
                raise tensorio.TensorFileError(f"{name}: shape {tensors[name].shape}, config says {shape}")
        return cls(cfg, {k: tensors[k] for k in expected})


def param_shapes(cfg: ModelConfig) -> dict:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_seq, d)}
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w1": (d, f), p + "b1": (f,), p + "w2": (f, d), p + "b2": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,)})
    return shapes


def init_weights(cfg: ModelConfig, seed: int = 0) -> TransformerWeights:
    rng = np.random.default_rng(seed)
    params = {}
    resid_scale = 0.02 / np.sqrt(2 * cfg.n_layers)
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.endswith("_b") or leaf in ("b1", "b2"):
            arr = np.zeros(shape)
        elif leaf in ("wo", "w2"):
            arr = rng.normal(0.0, resid_scale, shape)
        else:
            arr = rng.normal(0.0, 0.02 if leaf in ("tok_emb", "pos_emb") else 1.0 / np.sqrt(shape[0]), shape)
        params[name] = arr.astype(cfg.dtype)
    return TransformerWeights(cfg, params)


@dataclass
class SiteDelta:
    """Additive update for one projection site.

    Exactly one form is populated: ``dense`` of shape (d, d) or (B, d, d), or
    the stacked low-rank pair ``a`` (d, R) / ``b`` (R, d).
    """
    dense: np.ndarray | None = None
    a: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        if (self.dense is None) == (self.a is None):
            raise ModelError("SiteDelta needs either dense or (a, b)")
        if self.a is not None and (self.b is None or self.a.shape[1] != self.b.shape[0]):
            raise ModelError("stacked factors must have matching inner rank")

    @property
    def per_example(self) -> bool:
        return self.dense is not None and self.dense.ndim == 3

    def to_dense(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        return self.a @ self.b

    def shape(self) -> tuple:
        if self.dense is not None:
            return self.dense.shape[-2:]
        return (self.a.shape[0], self.b.shape[1])


@dataclass
class DeltaSet:
    sites: dict = field(default_factory=dict)

    def __getitem__(self, site):
        return self.sites[site]

    def get(self, site):
        return self.sites.get(site)

    def to_dense(self) -> "DeltaSet":
        return DeltaSet({k: SiteDelta(dense=v.to_dense()) for k, v in self.sites.items()})

    def check(self, cfg: ModelConfig) -> None:
        d = cfg.d_model
        for site, sd in self.sites.items():
            if site not in adapted_sites(cfg):
                raise ModelError(f"{site} is not an adapted site")
            if sd.shape() != (d, d):
                raise ModelError(f"{site}: delta shape {sd.shape()} does not match ({d}, {d})")


def _check_tokens(cfg: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.shape[-1] > cfg.max_seq:
        raise SequenceTooLongError(f"sequence length {tokens.shape[-1]} exceeds max_seq={cfg.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise TokenRangeError(f"token ids must lie in [0, {cfg.vocab_size})")


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dg, db


def _project(a, w, sd: SiteDelta | None):
    y = a @ w
    if sd is None:
        return y
    if sd.dense is not None:
        return y + np.matmul(a, sd.dense)
    return y + (a @ sd.a) @ sd.b


def _project_back(dy, a, w, sd: SiteDelta | None, want_w: bool):
    """Returns (da, dW or None, site-delta gradient or None)."""
    da = dy @ w.T
    flat_a = a.reshape(-1, a.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    dw = flat_a.T @ flat_dy if want_w else None
    gdelta = None
    if sd is not None:
        if sd.dense is not None:
            da = da + np.matmul(dy, np.swapaxes(sd.dense, -1, -2))
            if sd.per_example:
                gdelta = np.matmul(np.swapaxes(a, 1, 2), dy)
            else:
                gdelta = dw if dw is not None else flat_a.T @ flat_dy
        else:
            dyb = dy @ sd.b.T
            da = da + dyb @ sd.a.T
            gdelta = {"a": flat_a.T @ dyb.reshape(-1, dyb.shape[-1]),
                      "b": (flat_a @ sd.a).T @ flat_dy}
    return da, dw, gdelta


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.ones((t, t), dtype=bool), k=1)


def forward_trace(w: TransformerWeights, delta: DeltaSet | None, tokens, keep_trace: bool = True):
    """Forward pass over a (B, T) token batch. Returns (logits, trace or None)."""
    cfg = w.config
    p = w.params
    tokens = np.asarray(tokens, dtype=np.int64)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    _check_tokens(cfg, tokens)
    if delta is not None:
        delta.check(cfg)
    bsz, t = tokens.shape
    h, dh = cfg.n_heads, cfg.head_dim
    x = p["tok_emb"][tokens] + p["pos_emb"][:t]
    mask = _causal_mask(t)
    scale = cfg.dtype(1.0 / np.sqrt(dh))
    layers = []
    for l in range(cfg.n_layers):
        pre = f"blocks.{l}."
        sq = delta.get(pre + "wq") if delta is not None else None
        sv = delta.get(pre + "wv") if delta is not None else None
        a, ln1 = _layernorm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        q = _project(a, p[pre + "wq"], sq)
        k = a @ p[pre + "wk"]
        v = _project(a, p[pre + "wv"], sv)
        qh = q.reshape(bsz, t, h, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(bsz, t, h, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(bsz, t, h, dh).transpose(0, 2, 1, 3)
        s = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
        s = np.where(mask, -np.inf, s)
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        probs = e / e.sum(axis=-1, keepdims=True)
        oh = np.matmul(probs, vh)
        o = oh.transpose(0, 2, 1, 3).reshape(bsz, t, cfg.d_model)
        x = x + o @ p[pre + "wo"]
        c, ln2 = _layernorm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
        hid = c @ p[pre + "w1"] + p[pre + "b1"]
        r = np.maximum(hid, 0)
        x = x + r @ p[pre + "w2"] + p[pre + "b2"]
        if keep_trace:
            layers.append(dict(a=a, ln1=ln1, qh=qh, kh=kh, vh=vh, probs=probs, o=o,
                               c=c, ln2=ln2, hid=hid, r=r, sq=sq, sv=sv))
    hf, lnf = _layernorm(x, p["lnf_g"], p["lnf_b"])
    logits = hf @ p["tok_emb"].T
    trace = None
    if keep_trace:
        trace = dict(tokens=tokens, layers=layers, hf=hf, lnf=lnf, squeeze=squeeze)
    if squeeze:
        logits = logits[0]
    return logits, trace


def forward(w: TransformerWeights, delta: DeltaSet | None, tokens) -> np.ndarray:
    """Logits (T, V) for one sequence or (B, T, V) for a batch."""
    return forward_trace(w, delta, tokens, keep_trace=False)[0]


def backward(w: TransformerWeights, trace: dict | None, dlogits, param_grads: bool = True):
    """Back-propagate ``dlogits`` through a traced forward.

    Returns ``(grads, delta_grads)``: gradients for every base parameter
    (None when ``param_grads`` is false) and, for each adapted site that
    carried a delta, the gradient with respect to that delta (per example
    for per-example dense deltas).
    """
    if trace is None:
        raise ModelError("backward requires a forward trace")
    cfg = w.config
    p = w.params
    tokens = trace["tokens"]
    dlogits = np.asarray(dlogits)
    if trace["squeeze"]:
        dlogits = dlogits[None]
    bsz, t = tokens.shape
    h, dh = cfg.n_heads, cfg.head_dim
    scale = cfg.dtype(1.0 / np.sqrt(dh))
    grads = {} if param_grads else None
    delta_grads = {}
    hf = trace["hf"]
    flat_dl = dlogits.reshape(-1, cfg.vocab_size)
    if param_grads:
        grads["tok_emb"] = flat_dl.T @ hf.reshape(-1, cfg.d_model)
    dhf = dlogits @ p["tok_emb"]
    dx, dg, db = _layernorm_back(dhf, p["lnf_g"], trace["lnf"])
    if param_grads:
        grads["lnf_g"], grads["lnf_b"] = dg, db
    for l in reversed(range(cfg.n_layers)):
        pre = f"blocks.{l}."
        L = trace["layers"][l]
        # feed-forward
        flat_dx = dx.reshape(-1, cfg.d_model)
        dr = dx @ p[pre + "w2"].T
        dhid = dr * (L["hid"] > 0)
        dc = dhid @ p[pre + "w1"].T
        if param_grads:
            grads[pre + "w2"] = L["r"].reshape(-1, cfg.d_ff).T @ flat_dx
            grads[pre + "b2"] = flat_dx.sum(axis=0)
            flat_dhid = dhid.reshape(-1, cfg.d_ff)
            grads[pre + "w1"] = L["c"].reshape(-1, cfg.d_model).T @ flat_dhid
            grads[pre + "b1"] = flat_dhid.sum(axis=0)
        dxc, dg, db = _layernorm_back(dc, p[pre + "ln2_g"], L["ln2"])
        if param_grads:
            grads[pre + "ln2_g"], grads[pre + "ln2_b"] = dg, db
        dx = dx + dxc
        # attention
        do = dx @ p[pre + "wo"].T
        if param_grads:
            grads[pre + "wo"] = L["o"].reshape(-1, cfg.d_model).T @ dx.reshape(-1, cfg.d_model)
        doh = do.reshape(bsz, t, h, dh).transpose(0, 2, 1, 3)
        probs = L["probs"]
        dprobs = np.matmul(doh, L["vh"].transpose(0, 1, 3, 2))
        dvh = np.matmul(probs.transpose(0, 1, 3, 2), doh)
        ds = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dqh = np.matmul(ds, L["kh"]) * scale
        dkh = np.matmul(ds.transpose(0, 1, 3, 2), L["qh"]) * scale
        dq = dqh.transpose(0, 2, 1, 3).reshape(bsz, t, cfg.d_model)
        dk = dkh.transpose(0, 2, 1, 3).reshape(bsz, t, cfg.d_model)
        dv = dvh.transpose(0, 2, 1, 3).reshape(bsz, t, cfg.d_model)
        a = L["a"]
        da_q, dwq, gq = _project_back(dq, a, p[pre + "wq"], L["sq"], param_grads)
        da_v, dwv, gv = _project_back(dv, a, p[pre + "wv"], L["sv"], param_grads)
        da = da_q + da_v + dk @ p[pre + "wk"].T
        if param_grads:
            grads[pre + "wq"], grads[pre + "wv"] = dwq, dwv
            grads[pre + "wk"] = a.reshape(-1, cfg.d_model).T @ dk.reshape(-1, cfg.d_model)
        if gq is not None:
            delta_grads[pre + "wq"] = gq
        if gv is not None:
            delta_grads[pre + "wv"] = gv
        dxa, dg, db = _layernorm_back(da, p[pre + "ln1_g"], L["ln1"])
        if param_grads:
            grads[pre + "ln1_g"], grads[pre + "ln1_b"] = dg, db
        dx = dx + dxa
    if param_grads:
        dtok = np.zeros_like(p["tok_emb"])
        np.add.at(dtok, tokens.reshape(-1), dx.reshape(-1, cfg.d_model))
        grads["tok_emb"] = grads["tok_emb"] + dtok
        dpos = np.zeros_like(p["pos_emb"])
        dpos[:t] = dx.sum(axis=0)
        grads["pos_emb"] = dpos
    return grads, delta_grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def nll_loss(logits, targets, mask) -> float:
    """Mean over masked positions of -log softmax(logits)[target]."""
    return nll_loss_and_grad(logits, targets, mask, need_grad=False)[0]


def nll_loss_and_grad(logits, targets, mask, need_grad: bool = True):
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ModelError(f"shape mismatch: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ModelError("loss mask selects no positions")
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(picked * mask).sum() / count)
    if not need_grad:
        return loss, None
    g = np.exp(logp)
    onehot = np.zeros_like(g)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    g = (g - onehot) * (mask[..., None] / logits.dtype.type(count))
    return loss, g.astype(logits.dtype)


def first_layer_queries(w: TransformerWeights, tokens, use_positions: bool = True) -> np.ndarray:
    """Layer-1 query vectors of the frozen base (all heads concatenated), mean-pooled over positions."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ModelError("first_layer_queries needs a nonempty 1-D token sequence")
    return first_layer_queries_batch(w, [tokens], use_positions)[0]


def first_layer_queries_batch(w: TransformerWeights, sequences, use_positions: bool = True) -> np.ndarray:
    cfg = w.config
    p = w.params
    out = np.empty((len(sequences), cfg.d_model), dtype=np.float64)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(sequences):
        if len(s) == 0:
            raise ModelError("first_layer_queries needs a nonempty token sequence")
        by_len.setdefault(len(s), []).append(i)
    for t, idx in sorted(by_len.items()):
        toks = np.array([sequences[i] for i in idx], dtype=np.int64)
        _check_tokens(cfg, toks)
        x = p["tok_emb"][toks]
        if use_positions:
            x = x + p["pos_emb"][:t]
        a, _ = _layernorm(x, p["blocks.0.ln1_g"], p["blocks.0.ln1_b"])
        q = a @ p["blocks.0.wq"]
        out[idx] = q.astype(np.float64).mean(axis=1)
    return out


def lora_backward(w: TransformerWeights, factors: dict, scale: float, alphas, batch):
    """Loss and gradients of every low-rank factor of an adapter pool.

    ``factors`` maps site -> (A, B) with A of shape (N, d, r) and B of shape
    (N, r, d). Example ``b`` of the batch sees the delta
    ``scale * sum_n alphas[b, n] * A[n] @ B[n]``; alphas are constants.
    ``batch`` provides ``inputs``, ``targets`` and ``mask`` arrays (B, T).
    Returns ``(loss, {site: (dA, dB)})``.
    """
    alphas = np.asarray(alphas, dtype=w.config.dtype)
    n = next(iter(factors.values()))[0].shape[0]
    if alphas.ndim != 2 or alphas.shape[1] != n:
        raise ModelError(f"alphas must have shape (batch, {n}), got {alphas.shape}")
    if alphas.shape[0] != batch.inputs.shape[0]:
        raise ModelError("one alpha vector is required per batch item")
    delta = DeltaSet({site: SiteDelta(dense=per_example_delta(A, B, alphas, scale))
                      for site, (A, B) in factors.items()})
    logits, trace = forward_trace(w, delta, batch.inputs)
    loss, dlogits = nll_loss_and_grad(logits, batch.targets, batch.mask)
    _, dgrads = backward(w, trace, dlogits, param_grads=False)
    out = {}
    for site, (A, B) in factors.items():
        g = dgrads[site]
        dA = np.empty_like(A)
        dB = np.empty_like(B)
        for j in range(n):
            gj = (alphas[:, j, None, None] * g).sum(axis=0)
            dA[j] = scale * (gj @ B[j].T)
            dB[j] = scale * (A[j].T @ gj)
        out[site] = (dA, dB)
    return loss, out


def per_example_delta(A, B, alphas, scale) -> np.ndarray:
    """(batch, d, d) dense deltas ``scale * sum_n alphas[b, n] A[n] B[n]``."""
    prods = [A[j] @ B[j] for j in range(A.shape[0])]
    acc = alphas[:, 0, None, None] * prods[0]
    for j in range(1, len(prods)):
        acc = acc + alphas[:, j, None, None] * prods[j]
    return scale * acc


@dataclass
class Decoded:
    tokens: list
    distributions: list   # one (V,) softmax per generated position


def greedy_decode(w: TransformerWeights, delta: DeltaSet | None, prompt, max_new: int,
                  eos: int | None = None) -> Decoded:
    """Argmax decoding (ties go to the lowest token id) from a single prompt."""
    return greedy_decode_batch(w, delta, [prompt], max_new, eos)[0]


def greedy_decode_batch(w: TransformerWeights, delta: DeltaSet | None, prompts, max_new: int,
                        eos: int | None = None) -> list[Decoded]:
    cfg = w.config
    prompts = [np.asarray(pr, dtype=np.int64) for pr in prompts]
    results: list[Decoded | None] = [None] * len(prompts)
    by_len: dict[int, list[int]] = {}
    for i, pr in enumerate(prompts):
        if pr.size == 0:
            raise ModelError("prompt must be nonempty")
        if pr.size > cfg.max_seq:
            raise SequenceTooLongError(f"prompt length {pr.size} exceeds max_seq={cfg.max_seq}")
        by_len.setdefault(pr.size, []).append(i)
    for plen, idx in sorted(by_len.items()):
        seqs = np.array([prompts[i] for i in idx], dtype=np.int64)
        steps = min(max_new, cfg.max_seq - plen)
        gen = [[] for _ in idx]
        dists = [[] for _ in idx]
        alive = np.ones(len(idx), dtype=bool)
        for _ in range(steps):
            if not alive.any():
                break
            live = np.flatnonzero(alive)
            logits = forward(w, delta, seqs[live])[:, -1, :]
            probs = softmax(logits.astype(np.float64))
            nxt = np.argmax(logits, axis=-1)
            col = np.zeros(len(idx), dtype=np.int64)
            col[live] = nxt
            for j, li in enumerate(live):
                gen[li].append(int(nxt[j]))
                dists[li].append(probs[j])
                if eos is not None and nxt[j] == eos:
                    alive[li] = False
            seqs = np.concatenate([seqs, col[:, None]], axis=1)
        for j, i in enumerate(idx):
            results[i] = Decoded(gen[j], dists[j])
    return results


@dataclass(frozen=True)
class ModelHandle:
    """Frozen weights plus an optional adapter delta; read-only and safe to share."""
    weights: TransformerWeights
    delta: DeltaSet | None = None
    eos: int | None = None

    def decode(self, query, max_new: int) -> Decoded:
        return greedy_decode(self.weights, self.delta, query, max_new, self.eos)

    def decode_batch(self, queries, max_new: int) -> list[Decoded]:
        return greedy_decode_batch(self.weights, self.delta, queries, max_new, self.eos)

    def logits(self, tokens) -> np.ndarray:
        return forward(self.weights, self.delta, tokens)
