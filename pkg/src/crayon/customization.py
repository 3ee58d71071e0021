"""Device/server customization exchange.

The device turns a handful of user examples into blend weights and sends
only those weights; the server blends its adapter pool, attaches routing
prototypes and a threshold, and ships a deployment package back.

Wire framing: every message is a 4-byte big-endian length followed by the
payload. Requests are UTF-8 JSON; packages are tensor containers (see
:mod:`crayon.tensorio`) whose config section carries the metadata.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .adapters import (BaseAdapterPool, BlendWeights, CustomizedAdapter, IndicatorSet,
                       PoolMismatchError, alpha_from_embedding, blend_customized)
from .hybrid import (HybridAnswer, PrototypeSet, RoutingConfig, calibrate_threshold,
                     hybrid_batch, score_decoded)
from .model import ModelHandle, TransformerWeights, adapted_sites, first_layer_queries_batch
from .tasks import EOS, Example, query_tokens

PROTOCOL_VERSION = 1
REQUEST_FIELDS = ("protocol_version", "client_id", "n_bases", "alphas", "normalized")


class ProtocolError(ValueError):
    pass


class ChecksumMismatchError(ValueError):
    pass


class PackageRejected(ValueError):
    pass


@dataclass(frozen=True)
class CustomizationSet:
    examples: tuple

    def __post_init__(self):
        if len(self.examples) == 0:
            raise ValueError("customization set must hold at least one example")

    @classmethod
    def from_records(cls, records) -> "CustomizationSet":
        return cls(tuple(Example(tuple(r.prompt), tuple(r.answer)) for r in records))

    def prompts(self) -> list:
        return [ex.prompt for ex in self.examples]

    def __len__(self) -> int:
        return len(self.examples)


def frame(payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + payload


def unframe(buf: bytes) -> bytes:
    if len(buf) < 4:
        raise ProtocolError("truncated frame header")
    (n,) = struct.unpack(">I", buf[:4])
    if len(buf) != 4 + n:
        raise ProtocolError(f"frame declares {n} bytes, got {len(buf) - 4}")
    return buf[4:]


def _fixed_width(x: float) -> str:
    # every alpha takes the same number of characters so the message length
    # reveals nothing beyond N
    x = float(x)
    if abs(x) < 1e-99:
        x = 0.0
    s = f"{x:.16e}"
    return s if s.startswith("-") else " " + s


@dataclass(frozen=True)
class CustomizationRequest:
    protocol_version: int
    client_id: str
    n_bases: int
    alphas: tuple
    normalized: bool

    def to_bytes(self) -> bytes:
        body = ('{"protocol_version":%d,"client_id":%s,"n_bases":%d,"alphas":[%s],"normalized":%s}' % (
            self.protocol_version, json.dumps(self.client_id), self.n_bases,
            ",".join(_fixed_width(a) for a in self.alphas), "true" if self.normalized else "false"))
        return frame(body.encode("utf-8"))

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CustomizationRequest":
        try:
            obj = json.loads(unframe(buf).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"unreadable request: {exc}") from None
        if set(obj) != set(REQUEST_FIELDS):
            raise ProtocolError(f"request fields {sorted(obj)} != {sorted(REQUEST_FIELDS)}")
        if obj["protocol_version"] != PROTOCOL_VERSION:
            raise ProtocolError(f"protocol_version {obj['protocol_version']}, expected {PROTOCOL_VERSION}")
        if len(obj["alphas"]) != obj["n_bases"]:
            raise ProtocolError("alphas length differs from n_bases")
        return cls(obj["protocol_version"], obj["client_id"], obj["n_bases"],
                   tuple(float(a) for a in obj["alphas"]), bool(obj["normalized"]))

    def blend_weights(self) -> BlendWeights:
        return BlendWeights(np.array(self.alphas, dtype=np.float64), self.normalized)


def user_embedding(w: TransformerWeights, dc: CustomizationSet, use_positions: bool = True) -> np.ndarray:
    """Mean first-layer query embedding over the customization prompts (answers unused)."""
    if len(dc) == 0:
        raise ValueError("customization set is empty")
    q = first_layer_queries_batch(w, [query_tokens(p) for p in dc.prompts()], use_positions)
    return q.mean(axis=0)


def make_request(ind: IndicatorSet, q_c, client_id: str = "client-0000000000",
                 normalize: bool = True) -> CustomizationRequest:
    bw = alpha_from_embedding(ind, q_c, normalize)
    return CustomizationRequest(PROTOCOL_VERSION, client_id, ind.n_bases,
                                tuple(float(a) for a in bw.alphas), bw.normalized)


@dataclass(frozen=True)
class DeploymentPackage:
    adapter: CustomizedAdapter
    prototypes: PrototypeSet
    threshold: float
    scorer: str
    pool_checksum: str
    version: int = PROTOCOL_VERSION

    def to_bytes(self) -> bytes:
        tensors = {**self.adapter.tensors(), "prototypes": self.prototypes.signatures}
        meta = {
            "kind": "deployment_package",
            "version": self.version,
            "threshold": self.threshold,
            "scorer": self.scorer,
            "pool_checksum": self.pool_checksum,
            "sites": list(self.adapter.sites),
            "effective_rank": self.adapter.effective_rank,
            "normalized": self.adapter.normalized,
        }
        return frame(tensorio.dumps(tensors, meta))

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DeploymentPackage":
        tensors, meta = tensorio.loads(unframe(buf))
        if meta.get("kind") != "deployment_package":
            raise ProtocolError("payload is not a deployment package")
        if meta.get("version") != PROTOCOL_VERSION:
            raise ProtocolError(f"package version {meta.get('version')}, expected {PROTOCOL_VERSION}")
        sites = {s: (tensors[f"adapter.{s}.A"], tensors[f"adapter.{s}.B"]) for s in meta["sites"]}
        adapter = CustomizedAdapter(sites, meta["effective_rank"], tensors["adapter.alphas"],
                                    meta["normalized"], meta["pool_checksum"])
        return cls(adapter, PrototypeSet(tensors["prototypes"]), meta["threshold"], meta["scorer"],
                   meta["pool_checksum"], meta["version"])


def serve_blend(pool: BaseAdapterPool, req: CustomizationRequest, prototypes: PrototypeSet,
                threshold: float, scorer: str = "prototype",
                indicator_checksum: str | None = None) -> DeploymentPackage:
    """Blend the pool with the requested weights. Performs no optimisation."""
    if req.n_bases != pool.n_bases:
        raise PoolMismatchError(f"n_bases: request carries {req.n_bases}, pool has {pool.n_bases}")
    if indicator_checksum is not None and indicator_checksum != pool.indicator_checksum:
        raise ChecksumMismatchError("client indicators were not built for this pool")
    adapter = blend_customized(pool, req.blend_weights())
    return DeploymentPackage(adapter, prototypes, float(threshold), scorer, pool.checksum())


class BlendServer:
    """Server side of the exchange: pool, uncustomized server model and a calibration slice."""

    def __init__(self, pool: BaseAdapterPool, device_base: TransformerWeights, server: ModelHandle,
                 calibration_queries, ratio: float = 0.2, scorer: str = "prototype", max_new: int = 9):
        self.pool = pool
        self.device_base = device_base
        self.server = server
        self.calibration_queries = [query_tokens(p) for p in calibration_queries]
        self.ratio = ratio
        self.scorer = scorer
        self.max_new = max_new

    def prototypes_for(self, prompts) -> PrototypeSet:
        from .hybrid import build_prototypes
        return build_prototypes(self.server, prompts, self.max_new)

    def calibration_scores(self, adapter: CustomizedAdapter, prototypes: PrototypeSet, scorer: str):
        device = ModelHandle(self.device_base, adapter.delta(), EOS)
        decs = device.decode_batch(self.calibration_queries, self.max_new)
        return [score_decoded(d, scorer, prototypes) for d in decs]

    def handle(self, request_bytes: bytes, prototype_prompts, indicator_checksum: str | None = None,
               scorer: str | None = None) -> bytes:
        req = CustomizationRequest.from_bytes(request_bytes)
        scorer = scorer or self.scorer
        protos = self.prototypes_for(prototype_prompts)
        adapter = blend_customized(self.pool, req.blend_weights())
        th = calibrate_threshold(self.calibration_scores(adapter, protos, scorer), self.ratio)
        pkg = serve_blend(self.pool, req, protos, th.value, scorer, indicator_checksum)
        return pkg.to_bytes()


class DeviceRuntime:
    """On-device state: frozen base, indicators and the currently applied package.

    Readers take one snapshot of ``_state``; :meth:`apply_package` validates
    first and then replaces the snapshot in a single assignment.
    """

    def __init__(self, weights: TransformerWeights, indicators: IndicatorSet, normalize: bool = True,
                 client_id: str = "client-0000000000", max_new: int = 9):
        self.weights = weights
        self.indicators = indicators
        self.normalize = normalize
        self.client_id = client_id
        self.max_new = max_new
        self._lock = threading.Lock()
        self._state = (None, None)   # (package, handle)

    @property
    def package(self) -> DeploymentPackage | None:
        return self._state[0]

    def handle(self) -> ModelHandle:
        pkg, h = self._state
        return h if h is not None else ModelHandle(self.weights, None, EOS)

    def request_for(self, dc: CustomizationSet) -> CustomizationRequest:
        q = user_embedding(self.weights, dc, self.indicators.embed_positions)
        return make_request(self.indicators, q, self.client_id, self.normalize)

    def _validate(self, pkg: DeploymentPackage) -> None:
        cfg = self.weights.config
        if pkg.version != PROTOCOL_VERSION:
            raise PackageRejected(f"package version {pkg.version}")
        if set(pkg.adapter.sites) != set(adapted_sites(cfg)):
            raise PackageRejected("package sites do not match the device model")
        for site, (a, b) in pkg.adapter.sites.items():
            if a.ndim != 2 or b.ndim != 2 or a.shape[0] != cfg.d_model or b.shape[1] != cfg.d_model \
                    or a.shape[1] != b.shape[0]:
                raise PackageRejected(f"{site}: adapter shapes {a.shape}/{b.shape} do not fit d_model={cfg.d_model}")
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise PackageRejected(f"{site}: non-finite adapter values")
        if pkg.prototypes.signatures.shape[1] != cfg.vocab_size:
            raise PackageRejected("prototype dimension differs from the device vocabulary")

    def apply_package(self, pkg) -> ModelHandle:
        """Install a package (object or wire bytes). On any error the old adapter stays."""
        if isinstance(pkg, (bytes, bytearray)):
            try:
                pkg = DeploymentPackage.from_bytes(bytes(pkg))
            except (ProtocolError, tensorio.TensorFileError, KeyError) as exc:
                raise PackageRejected(f"malformed package: {exc}") from None
        self._validate(pkg)
        handle = ModelHandle(self.weights, pkg.adapter.delta(), EOS)
        with self._lock:
            self._state = (pkg, handle)
        return handle

    def routing(self) -> RoutingConfig:
        pkg = self.package
        if pkg is None:
            raise PackageRejected("no package applied")
        return RoutingConfig(pkg.threshold, scorer=pkg.scorer)

    def answer_batch(self, prompts, server: ModelHandle | None) -> list[HybridAnswer]:
        pkg, handle = self._state
        if pkg is None:
            raise PackageRejected("no package applied")
        return hybrid_batch(handle, server, [query_tokens(p) for p in prompts], pkg.prototypes,
                            RoutingConfig(pkg.threshold, scorer=pkg.scorer), self.max_new)
