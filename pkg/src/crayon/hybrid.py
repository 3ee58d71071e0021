"""Device-first inference with server fallback, scored against server prototypes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Decoded, ModelHandle
from .numerics import DimensionError, cosine_rows
from .tasks import EOS, query_tokens

SCORERS = ("prototype", "max_softmax")


class EmptyGenerationError(ValueError):
    pass


class ServerUnavailable(ConnectionError):
    pass


@dataclass(frozen=True)
class OutputSignature:
    """Mean next-token distribution over the generated answer positions."""
    vector: np.ndarray
    source: str = "device"


@dataclass(frozen=True)
class PrototypeSet:
    signatures: np.ndarray   # (|S|, vocab)

    def __post_init__(self):
        s = np.asarray(self.signatures)
        if s.ndim != 2 or s.shape[0] == 0:
            raise ValueError("a prototype set needs at least one signature vector")

    def __len__(self) -> int:
        return self.signatures.shape[0]


@dataclass(frozen=True)
class RoutingConfig:
    threshold: float
    target_ratio: float = 0.2
    scorer: str = "prototype"

    def __post_init__(self):
        if not 0.0 < self.target_ratio < 1.0:
            raise ValueError("target_ratio must lie in (0, 1)")
        if self.scorer not in SCORERS:
            raise ValueError(f"scorer must be one of {SCORERS}")


def signature_of(dec: Decoded, source: str = "device") -> OutputSignature:
    if not dec.distributions:
        raise EmptyGenerationError("no tokens were generated")
    return OutputSignature(np.mean(np.asarray(dec.distributions, dtype=np.float64), axis=0), source)


def output_signature(handle: ModelHandle, query, max_new: int, source: str = "device") -> OutputSignature:
    return signature_of(handle.decode(query, max_new), source)


def build_prototypes(server: ModelHandle, prompts, max_new: int) -> PrototypeSet:
    """One server-model signature per customization prompt (raw symbols, not yet framed)."""
    prompts = list(prompts)
    if not prompts:
        raise ValueError("customization set is empty")
    decs = server.decode_batch([query_tokens(p) for p in prompts], max_new)
    return PrototypeSet(np.array([signature_of(d, "server").vector for d in decs]))


def routing_score(o: OutputSignature, s: PrototypeSet) -> float:
    """Mean cosine similarity between a device signature and every prototype."""
    v = np.asarray(o.vector, dtype=np.float64)
    if v.shape[-1] != s.signatures.shape[1]:
        raise DimensionError(f"signature has {v.shape[-1]} entries, prototypes have {s.signatures.shape[1]}")
    return float(cosine_rows(s.signatures, v).mean())


def max_softmax_of(dec: Decoded) -> float:
    if not dec.distributions:
        raise EmptyGenerationError("no tokens were generated")
    return float(np.mean([np.max(p) for p in dec.distributions]))


def max_softmax_score(handle: ModelHandle, query, max_new: int) -> float:
    return max_softmax_of(handle.decode(query, max_new))


def score_decoded(dec: Decoded, scorer: str, prototypes: PrototypeSet | None) -> float:
    if scorer == "prototype":
        return routing_score(signature_of(dec), prototypes)
    return max_softmax_of(dec)


@dataclass(frozen=True)
class Threshold:
    value: float
    k: int          # intended number routed: floor(ratio * M)
    routed: int     # calibration scores strictly below value
    tied: bool      # ties at the threshold made routed differ from k, or duplicates sit on it


def calibrate_threshold(scores, ratio: float) -> Threshold:
    """r_th = the (k+1)-th smallest score with k = floor(ratio * M)."""
    s = np.sort(np.asarray(scores, dtype=np.float64), kind="stable")
    if s.size == 0:
        raise ValueError("no calibration scores")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    k = int(math.floor(ratio * s.size))
    k = min(k, s.size - 1)
    value = float(s[k])
    routed = int((s < value).sum())
    tied = routed != k or int((s == value).sum()) > 1
    return Threshold(value, k, routed, tied)


@dataclass(frozen=True)
class HybridAnswer:
    tokens: list
    decision: str     # "held" or "routed"
    score: float
    degraded: bool = False


def _answer_tokens(dec: Decoded) -> list:
    toks = list(dec.tokens)
    if toks and toks[-1] == EOS:
        toks = toks[:-1]
    return toks


def _server_decode(server, queries, max_new):
    if server is None:
        raise ServerUnavailable("no server configured")
    return server.decode_batch(queries, max_new)


def hybrid_answer(device: ModelHandle, server, query, prototypes: PrototypeSet | None,
                  cfg: RoutingConfig, max_new: int) -> HybridAnswer:
    return hybrid_batch(device, server, [query], prototypes, cfg, max_new)[0]


def hybrid_batch(device: ModelHandle, server, queries, prototypes: PrototypeSet | None,
                 cfg: RoutingConfig, max_new: int) -> list[HybridAnswer]:
    """Decode every query on the device once; replace answers scoring below the threshold."""
    decs = device.decode_batch(queries, max_new)
    scores = [score_decoded(d, cfg.scorer, prototypes) for d in decs]
    routed = [i for i, s in enumerate(scores) if s < cfg.threshold]
    server_out = {}
    degraded = False
    if routed:
        try:
            res = _server_decode(server, [queries[i] for i in routed], max_new)
            server_out = dict(zip(routed, res))
        except ServerUnavailable:
            degraded = True
    out = []
    for i, (d, s) in enumerate(zip(decs, scores)):
        if i in server_out:
            out.append(HybridAnswer(_answer_tokens(server_out[i]), "routed", s))
        else:
            out.append(HybridAnswer(_answer_tokens(d), "held", s, degraded and i in routed))
    return out
