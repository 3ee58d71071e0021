"""Synthetic benchmark pipeline: data, base models, pool, customization and evaluation.

Every artifact is cached under a work directory and is a deterministic
function of the :class:`BenchmarkConfig`.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapters import BaseAdapterPool, IndicatorSet, load_pool, save_pool
from .customization import BlendServer, CustomizationSet, DeploymentPackage, DeviceRuntime
from .hybrid import calibrate_threshold, max_softmax_of, routing_score, signature_of
from .model import ModelConfig, ModelHandle, TransformerWeights, init_weights
from .tasks import EOS, VOCAB_SIZE, Corpus, TaskSpec, default_tasks, gen_corpus, query_tokens, strip_labels
from .training import TrainConfig, TrainLog, build_indicators, extract_embeddings, pretrain_base, train_pool

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkConfig:
    seed: int = 0
    precision: int = 32
    counts: dict = field(default_factory=lambda: {"train": 3000, "customization": 10,
                                                  "eval": 200, "calibration": 200})
    tasks: tuple = ()
    device_model: ModelConfig = ModelConfig(VOCAB_SIZE, 64, 2, 4, 256, 24)
    server_model: ModelConfig = ModelConfig(VOCAB_SIZE, 96, 3, 4, 384, 24)
    device_pretrain_iters: int = 3000
    server_pretrain_iters: int = 5000
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 32
    train: TrainConfig = TrainConfig(max_iters=3000, lr=5e-3)
    routing_ratio: float = 0.2
    calibration_size: int = 200
    max_new: int = 9

    def task_specs(self) -> list[TaskSpec]:
        return list(self.tasks) if self.tasks else default_tasks(self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = [asdict(t) for t in self.task_specs()]
        return d

    @classmethod
    def small(cls, seed: int = 0, precision: int = 32) -> "BenchmarkConfig":
        """A seconds-scale configuration for tests and smoke runs."""
        return cls(seed=seed, precision=precision,
                   counts={"train": 150, "customization": 4, "eval": 12, "calibration": 20},
                   device_model=ModelConfig(VOCAB_SIZE, 16, 1, 2, 32, 24),
                   server_model=ModelConfig(VOCAB_SIZE, 24, 1, 2, 48, 24),
                   device_pretrain_iters=30, server_pretrain_iters=40,
                   train=TrainConfig(n_bases=3, rank=2, pca_dim=4, max_iters=20, batch_size=8,
                                     lr=5e-3, embedding_sample_cap=200),
                   calibration_size=20)


def _with_precision(cfg: ModelConfig, precision: int) -> ModelConfig:
    return replace(cfg, precision=precision)


def answer_of(dec) -> list:
    toks = list(dec.tokens)
    if toks and toks[-1] == EOS:
        toks = toks[:-1]
    return toks


def evaluate(handle: ModelHandle, records, max_new: int = 9, task: str | None = None) -> float:
    """Exact-match accuracy of greedy answers over ``records`` (optionally one task)."""
    recs = [r for r in records if task is None or r.task == task]
    if not recs:
        raise ValueError("evaluation split is empty")
    return float(np.mean(correctness(handle, recs, max_new)))


def correctness(handle: ModelHandle, records, max_new: int = 9) -> np.ndarray:
    decs = handle.decode_batch([query_tokens(r.prompt) for r in records], max_new)
    return np.array([answer_of(d) == list(r.answer) for d, r in zip(decs, records)])


class Benchmark:
    """Lazily builds (or reloads) every artifact of one benchmark configuration."""

    def __init__(self, cfg: BenchmarkConfig, workdir, verbose: bool = False):
        self.cfg = cfg
        self.dir = Path(workdir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.verbose = verbose
        self._cache: dict = {}
        self.timings: dict = {}

    def attach(self, corpus=None, device_base=None, server_base=None, pool=None) -> "Benchmark":
        """Use existing artifact files instead of building them."""
        if corpus is not None:
            self._cache["corpus"] = Corpus.read(corpus)
        if device_base is not None:
            self._cache["device_base"] = TransformerWeights.load(device_base)
        if server_base is not None:
            self._cache["server_base"] = TransformerWeights.load(server_base)
        if pool is not None:
            p, ind = load_pool(pool)
            self._cache[("pool", "pool")] = (p, ind, TrainLog())
        return self

    def _say(self, msg: str) -> None:
        if self.verbose:
            print(msg, flush=True)
        log.info(msg)

    def _timed(self, key, fn):
        t0 = time.perf_counter()
        out = fn()
        self.timings[key] = self.timings.get(key, 0.0) + time.perf_counter() - t0
        return out

    # data ---------------------------------------------------------------
    @property
    def corpus(self) -> Corpus:
        if "corpus" not in self._cache:
            cdir = self.dir / "corpus"
            if (cdir / "train.jsonl").exists():
                self._cache["corpus"] = Corpus.read(cdir)
            else:
                c = gen_corpus(self.cfg.task_specs(), self.cfg.counts, self.cfg.seed)
                c.write(cdir)
                self._cache["corpus"] = c
        return self._cache["corpus"]

    @property
    def task_ids(self) -> list[str]:
        return self.corpus.task_ids()

    def train_examples(self):
        return strip_labels(self.corpus.splits["train"])

    def customization_set(self, task: str, size: int | None = None) -> CustomizationSet:
        recs = self.corpus.select("customization", task)
        return CustomizationSet.from_records(recs[:size] if size else recs)

    def calibration_records(self):
        recs = self.corpus.splits["calibration"]
        rng = np.random.default_rng(self.cfg.seed + 7)
        idx = rng.permutation(len(recs))[:self.cfg.calibration_size]
        return [recs[i] for i in sorted(idx)]

    # base models -----------------------------------------------------------
    def _pretrained(self, name: str, mcfg: ModelConfig, iters: int, seed: int) -> TransformerWeights:
        if name not in self._cache:
            path = self.dir / f"{name}.bin"
            if path.exists():
                self._cache[name] = TransformerWeights.load(path)
            else:
                self._say(f"pretraining {name} ({iters} iters)")
                w0 = init_weights(_with_precision(mcfg, self.cfg.precision), seed)
                w, _ = self._timed(name, lambda: pretrain_base(
                    w0, self.train_examples(), iters, self.cfg.pretrain_batch, self.cfg.pretrain_lr, seed))
                w.save(path)
                self._cache[name] = w
        return self._cache[name]

    @property
    def device_base(self) -> TransformerWeights:
        return self._pretrained("device_base", self.cfg.device_model, self.cfg.device_pretrain_iters,
                                self.cfg.seed)

    @property
    def server_base(self) -> TransformerWeights:
        return self._pretrained("server_base", self.cfg.server_model, self.cfg.server_pretrain_iters,
                                self.cfg.seed + 1)

    def server_handle(self) -> ModelHandle:
        return ModelHandle(self.server_base, None, EOS)

    # pool ------------------------------------------------------------------
    def indicators_for(self, tc: TrainConfig) -> IndicatorSet:
        emb = extract_embeddings(self.device_base, self.train_examples(), tc.embedding_sample_cap,
                                 tc.seed, tc.embed_positions)
        return build_indicators(emb, tc)

    def pool_for(self, tc: TrainConfig, name: str) -> tuple[BaseAdapterPool, IndicatorSet, TrainLog]:
        key = ("pool", name)
        if key not in self._cache:
            path = self.dir / f"{name}.bin"
            log_path = self.dir / f"{name}.trainlog.jsonl"
            if path.exists() and log_path.exists():
                pool, ind = load_pool(path)
                tl = _read_trainlog(log_path)
            else:
                self._say(f"training pool {name} (N={tc.n_bases}, r={tc.rank}, {tc.max_iters} iters)")
                ind = self.indicators_for(tc)
                recs = self.corpus.splits["train"]
                pool, tl = self._timed(name, lambda: train_pool(
                    self.device_base, strip_labels(recs), ind, tc, tags=[r.task for r in recs]))
                save_pool(path, pool, ind)
                log_path.write_text("".join(line + "\n" for line in tl.jsonl_lines()))
            self._cache[key] = (pool, ind, tl)
        return self._cache[key]

    @property
    def pool(self):
        return self.pool_for(self.cfg.train, "pool")

    @property
    def single_pool(self):
        return self.pool_for(replace(self.cfg.train, n_bases=1), "pool_single")

    def named_pool(self, name: str):
        if name == "pool":
            return self.pool
        if name == "pool_single":
            return self.single_pool
        if ("pool", name) not in self._cache:
            raise KeyError(f"pool {name!r} has not been trained; call pool_for first")
        return self._cache[("pool", name)]

    # customization -----------------------------------------------------------
    def blend_server(self, pool: BaseAdapterPool, scorer: str = "prototype") -> BlendServer:
        return BlendServer(pool, self.device_base, self.server_handle(),
                           [r.prompt for r in self.calibration_records()],
                           self.cfg.routing_ratio, scorer, self.cfg.max_new)

    def device_runtime(self, ind: IndicatorSet) -> DeviceRuntime:
        return DeviceRuntime(self.device_base, ind, self.cfg.train.normalize_alpha, max_new=self.cfg.max_new)

    def package_bytes(self, task: str, name: str = "pool", dc_size: int | None = None,
                      scorer: str = "prototype") -> bytes:
        """Full device -> server -> device exchange for one task's customization set."""
        key = ("pkg", name, task, dc_size, scorer)
        if key not in self._cache:
            pool, ind, _ = self.named_pool(name)
            runtime = self.device_runtime(ind)
            dc = self.customization_set(task, dc_size)
            req = runtime.request_for(dc).to_bytes()
            server = self.blend_server(pool, scorer)
            pkg = self._timed("customize", lambda: server.handle(req, dc.prompts(), ind.checksum()))
            self._cache[key] = pkg
        return self._cache[key]

    def customized_handle(self, task: str, name: str = "pool", dc_size: int | None = None) -> ModelHandle:
        pool, ind, _ = self.named_pool(name)
        runtime = self.device_runtime(ind)
        return runtime.apply_package(self.package_bytes(task, name, dc_size))

    def save_packages(self) -> dict:
        out = {}
        pdir = self.dir / "packages"
        pdir.mkdir(exist_ok=True)
        for t in self.task_ids:
            b = self.package_bytes(t)
            (pdir / f"{t}.pkg").write_bytes(b)
            out[t] = b
        return out

    # evaluation --------------------------------------------------------------
    def eval_records(self, task: str | None = None):
        return self.corpus.select("eval", task)

    def cross_task_matrix(self, name: str = "pool", dc_size: int | None = None) -> np.ndarray:
        """Entry (i, j): accuracy on task i of the device customized from task j's examples."""
        self.named_pool(name)
        ids = self.task_ids
        m = np.zeros((len(ids), len(ids)))
        for j, tj in enumerate(ids):
            handle = self.customized_handle(tj, name, dc_size)
            for i, ti in enumerate(ids):
                m[i, j] = self._timed("evaluate", lambda: evaluate(handle, self.eval_records(ti),
                                                                   self.cfg.max_new))
        return m

    def column_alphas(self, name: str = "pool") -> dict:
        out = {}
        for t in self.task_ids:
            pkg = DeploymentPackage.from_bytes(self.package_bytes(t, name))
            out[t] = np.asarray(pkg.adapter.alphas)
        return out

    def single_lora_accuracy(self) -> dict:
        handle = self.customized_handle(self.task_ids[0], "pool_single")
        return {t: evaluate(handle, self.eval_records(t), self.cfg.max_new) for t in self.task_ids}

    def base_accuracy(self, which: str = "device") -> dict:
        w = self.device_base if which == "device" else self.server_base
        h = ModelHandle(w, None, EOS)
        return {t: evaluate(h, self.eval_records(t), self.cfg.max_new) for t in self.task_ids}

    def routing_table(self, task: str, ratios=(0.2,), name: str = "pool") -> list[dict]:
        """Hybrid accuracy on the mixed eval split for one customized device, per scorer and ratio.

        Device answers are decoded once; the prototype and max-softmax scores
        and thresholds are computed from those decodes, and every routed query
        takes the (uncustomized) server's greedy answer.
        """
        pkg = DeploymentPackage.from_bytes(self.package_bytes(task, name))
        handle = self.customized_handle(task, name)
        cal = self.calibration_records()
        ev = self.eval_records()
        mx = self.cfg.max_new
        cal_dec = handle.decode_batch([query_tokens(r.prompt) for r in cal], mx)
        ev_dec = handle.decode_batch([query_tokens(r.prompt) for r in ev], mx)
        dev_ok = np.array([answer_of(d) == list(r.answer) for d, r in zip(ev_dec, ev)])
        srv_ok = self._server_correct(ev)
        scores = {
            "prototype": (np.array([routing_score(signature_of(d), pkg.prototypes) for d in cal_dec]),
                          np.array([routing_score(signature_of(d), pkg.prototypes) for d in ev_dec])),
            "max_softmax": (np.array([max_softmax_of(d) for d in cal_dec]),
                            np.array([max_softmax_of(d) for d in ev_dec])),
        }
        rows = []
        for scorer, (cs, es) in scores.items():
            for ratio in ratios:
                th = calibrate_threshold(cs, ratio)
                routed = es < th.value
                acc = float(np.where(routed, srv_ok, dev_ok).mean())
                rows.append({
                    "task": task, "scorer": scorer, "ratio": ratio, "threshold": th.value,
                    "calibration_routed_fraction": float((cs < th.value).mean()),
                    "calibration_ties": th.tied,
                    "routed_fraction": float(routed.mean()),
                    "hybrid_accuracy": acc,
                    "device_accuracy": float(dev_ok.mean()),
                    "server_accuracy": float(srv_ok.mean()),
                })
        return rows

    def _server_correct(self, records) -> np.ndarray:
        # the server model is never customized, so its answers are shared by every package
        if records != self.eval_records():
            return correctness(self.server_handle(), records, self.cfg.max_new)
        if "server_ok" not in self._cache:
            self._cache["server_ok"] = correctness(self.server_handle(), records, self.cfg.max_new)
        return self._cache["server_ok"]


def _read_trainlog(path) -> TrainLog:
    tl = TrainLog()
    with open(path) as fh:
        for line in fh:
            o = json.loads(line)
            if "loss" in o:
                tl.losses.append(o["loss"])
            else:
                tl.alpha_records.append((o["task"], np.array(o["alpha"])))
    return tl
