"""Acceptance checks, one test per criterion, each printing a PASS/FAIL line.

The full desk-scale benchmark is built once per session in a fresh
directory (or in ``$CRAYON_BENCH_DIR`` if set, reusing cached artifacts),
and its build time is what criterion 4 measures.
"""

import math
import os
import time
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from crayon.adapters import BaseAdapterPool, BlendWeights, blend_customized, dense_blend, load_pool, save_pool
from crayon.customization import CustomizationSet, DeploymentPackage, serve_blend
from crayon.experiments import dominance_stats, run_experiment
from crayon.harness import Benchmark, BenchmarkConfig
from crayon.hybrid import PrototypeSet
from crayon.model import (DeltaSet, ModelConfig, SiteDelta, TransformerWeights, adapted_sites, backward,
                          forward, forward_trace, init_weights, lora_backward, nll_loss, nll_loss_and_grad,
                          per_example_delta)
from crayon.tasks import Example, default_tasks, gen_corpus, pack_batch, strip_labels
from crayon.training import AdamW, TrainConfig, batch_schedule, build_indicators, extract_embeddings, train_pool

RESULTS = []


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    return ok


@pytest.fixture(scope="session")
def full(tmp_path_factory):
    workdir = os.environ.get("CRAYON_BENCH_DIR") or tmp_path_factory.mktemp("full_bench")
    b = Benchmark(BenchmarkConfig(), workdir)
    t0 = time.perf_counter()
    matrix = b.cross_task_matrix()
    build = time.perf_counter() - t0
    return SimpleNamespace(bench=b, matrix=matrix, build_seconds=build)


# 1 ---------------------------------------------------------------------------

def test_criterion_01_gradient_check():
    t0 = time.perf_counter()
    cfg = ModelConfig(32, 16, 2, 2, 32, 16, precision=64)
    w = init_weights(cfg, 11)
    rng = np.random.default_rng(12)
    for k in w.params:
        w.params[k] = w.params[k] + rng.normal(0, 0.05, w.params[k].shape)
    n, r, d, scale = 4, 2, 16, 1.5
    factors = {s: (rng.normal(0, 0.3, (n, d, r)), rng.normal(0, 0.3, (n, r, d))) for s in adapted_sites(cfg)}
    ex = [Example(tuple(rng.integers(0, 26, 5)), tuple(rng.integers(0, 26, 4))) for _ in range(3)]
    batch = pack_batch(ex)
    alphas = rng.random((3, n))
    _, grads = lora_backward(w, factors, scale, alphas, batch)

    def loss():
        delta = DeltaSet({s: SiteDelta(dense=per_example_delta(a, b, alphas, scale)) for s, (a, b) in factors.items()})
        return nll_loss(forward(w, delta, batch.inputs), batch.targets, batch.mask)

    eps, errs = 1e-5, []
    for s, (A, B) in factors.items():
        for arr, g in ((A, grads[s][0]), (B, grads[s][1])):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                lp = loss()
                arr[idx] = old - eps
                lm = loss()
                arr[idx] = old
                num = (lp - lm) / (2 * eps)
                errs.append(abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-8))
    elapsed = time.perf_counter() - t0
    mx, med = max(errs), float(np.median(errs))
    ok = mx < 1e-3 and med < 1e-5 and elapsed < 60
    assert record(1, ok, f"{len(errs)} entries, max rel {mx:.2e}, median {med:.2e}, {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------

def test_criterion_02_blend_exactness():
    cfg = ModelConfig(32, 16, 2, 2, 32, 16, precision=64)
    w = init_weights(cfg, 3)
    rng = np.random.default_rng(21)
    worst_delta = worst_logit = 0.0
    for _ in range(100):
        n, r = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        pool = BaseAdapterPool(n, r, float(rng.uniform(0.5, 8)), {
            s: (rng.normal(0, 0.3, (n, 16, r)), rng.normal(0, 0.3, (n, r, 16))) for s in adapted_sites(cfg)})
        bw = BlendWeights(rng.random(n))
        cust = blend_customized(pool, bw)
        brute = dense_blend(pool, bw)
        for s in pool.sites:
            worst_delta = max(worst_delta, float(np.abs(cust.to_dense()[s] - brute[s]).max()))
        toks = rng.integers(0, 32, (2, 9))
        dense = DeltaSet({s: SiteDelta(dense=m) for s, m in brute.items()})
        worst_logit = max(worst_logit, float(np.abs(forward(w, cust.delta(), toks) - forward(w, dense, toks)).max()))
    ok = worst_delta <= 1e-10 and worst_logit <= 1e-10
    assert record(2, ok, f"max |delta diff| {worst_delta:.1e}, max |logit diff| {worst_logit:.1e}")


# 3 ---------------------------------------------------------------------------

def _reference_single_lora(w, examples, cfg: TrainConfig):
    """Plain one-adapter LoRA trainer, written without the pool machinery."""
    d, r = w.config.d_model, cfg.rank
    rng = np.random.default_rng(cfg.seed)
    bound = 1.0 / np.sqrt(d)
    params = {}
    for site in adapted_sites(w.config):
        params[site] = [rng.uniform(-bound, bound, (1, d, r))[0], np.zeros((r, d))]
    scale = cfg.scaling / r
    b1, b2 = cfg.betas
    m = {k: [np.zeros_like(v) for v in p] for k, p in params.items()}
    v = {k: [np.zeros_like(x) for x in p] for k, p in params.items()}
    for t, idx in enumerate(batch_schedule(len(examples), cfg.batch_size, cfg.max_iters, cfg.seed), start=1):
        batch = pack_batch([examples[i] for i in idx])
        bsz = batch.inputs.shape[0]
        delta = DeltaSet({s: SiteDelta(dense=np.stack([scale * (A @ B)] * bsz)) for s, (A, B) in params.items()})
        logits, trace = forward_trace(w, delta, batch.inputs)
        _, dl = nll_loss_and_grad(logits, batch.targets, batch.mask)
        _, dg = backward(w, trace, dl, param_grads=False)
        lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (t - 1) / cfg.max_iters))
        for s, (A, B) in params.items():
            g = dg[s].sum(axis=0)
            for j, grad in enumerate((scale * (g @ B.T), scale * (A.T @ g))):
                m[s][j] = b1 * m[s][j] + (1.0 - b1) * grad
                v[s][j] = b2 * v[s][j] + (1.0 - b2) * (grad * grad)
                params[s][j] -= lr * (m[s][j] / (1.0 - b1 ** t)) / (np.sqrt(v[s][j] / (1.0 - b2 ** t)) + cfg.eps)
    return params


def test_criterion_03_single_adapter_equivalence():
    cfg = ModelConfig(32, 16, 2, 2, 32, 24, precision=64)
    w = init_weights(cfg, 5)
    corpus = gen_corpus(default_tasks(0), {"train": 12}, seed=4)
    ex = strip_labels(corpus.splits["train"])
    tc = TrainConfig(n_bases=1, rank=2, pca_dim=4, max_iters=25, batch_size=8, lr=1e-2, seed=6)
    ind = build_indicators(extract_embeddings(w, ex, seed=tc.seed, use_positions=False), tc)
    pool, _ = train_pool(w, ex, ind, tc)
    ref = _reference_single_lora(w, ex, tc)
    same = all(pool.factors[s][0][0].tobytes() == A.tobytes() and pool.factors[s][1][0].tobytes() == B.tobytes()
               for s, (A, B) in ref.items())
    moved = any(np.abs(B).max() > 0 for _, B in ref.values())
    assert record(3, same and moved, f"bit-identical factors over {len(ref)} sites after {tc.max_iters} steps: {same}")


# 4-8 (full benchmark) -------------------------------------------------------

def test_criterion_04_diagonal_dominance(full):
    st = dominance_stats(full.matrix)
    margin = 100 * st["margin"]
    ok = st["rows_dominated"] >= 5 and margin >= 2.0 and full.build_seconds < 1800
    np.set_printoptions(precision=3, suppress=True)
    print(full.matrix)
    assert record(4, ok, f"{st['rows_dominated']}/6 rows dominated, diag {st['diag_mean']:.3f} vs off "
                         f"{st['offdiag_mean']:.3f} (+{margin:.1f} pts), pipeline {full.build_seconds / 60:.1f} min")


def test_criterion_05_beats_single_lora(full):
    single = full.bench.single_lora_accuracy()
    s_mean = float(np.mean(list(single.values())))
    c_mean = float(np.mean(np.diag(full.matrix)))
    gain = 100 * (c_mean - s_mean)
    assert record(5, gain >= 1.0, f"customized {c_mean:.3f} vs single LoRA {s_mean:.3f} ({gain:+.1f} pts)")


def test_criterion_06_alpha_diversity(full):
    div = run_experiment("alpha-diversity", full.bench)
    abl = run_experiment("pca-ablation", full.bench)
    pairs = div.summary["task_pairs_gap_ge_0.05"]
    on, off = abl.summary["pca_on"]["mean_adapter_std"], abl.summary["pca_off"]["mean_adapter_std"]
    ok = pairs >= 1 and div.summary["max_mean_gap"] >= 0.05 and off < on
    assert record(6, ok, f"max per-task mean gap {div.summary['max_mean_gap']:.3f} ({pairs} task pairs >= 0.05); "
                         f"alpha std PCA on {on:.4f} > off {off:.4f}")


@pytest.fixture(scope="session")
def routing(full):
    return {t: full.bench.routing_table(t, (0.2,)) for t in full.bench.task_ids}


def test_criterion_07_routing_calibration(full, routing):
    rows = [r for rs in routing.values() for r in rs if r["scorer"] == "prototype"]
    tie_free = all(not r["calibration_ties"] for r in rows)
    exact = all(r["calibration_routed_fraction"] == 0.2 for r in rows)
    held = [r["routed_fraction"] for r in rows]
    within = all(abs(h - 0.2) <= 0.05 for h in held)
    m = len(full.bench.calibration_records())
    ok = m == 200 and tie_free and exact and within
    assert record(7, ok, f"M={m}, tie-free {tie_free}, calibration fraction exactly 0.20: {exact}, "
                         f"held-out fractions {min(held):.3f}..{max(held):.3f}")


def test_criterion_08_hybrid_improves(full, routing):
    b = full.bench
    proto = [r for rs in routing.values() for r in rs if r["scorer"] == "prototype"]
    maxsm = [r for rs in routing.values() for r in rs if r["scorer"] == "max_softmax"]
    server = proto[0]["server_accuracy"]
    device = float(np.mean([r["device_accuracy"] for r in proto]))
    hybrid = float(np.mean([r["hybrid_accuracy"] for r in proto]))
    # the fast table must agree with the real device runtime on one package
    t = b.task_ids[0]
    runtime = b.device_runtime(b.pool[1])
    runtime.apply_package(b.package_bytes(t))
    ev = b.eval_records()
    answers = runtime.answer_batch([r.prompt for r in ev], b.server_handle())
    live = float(np.mean([a.tokens == list(r.answer) for a, r in zip(answers, ev)]))
    agree = live == routing[t][0]["hybrid_accuracy"]
    ok = server >= device + 0.10 and hybrid > device and agree
    ms = float(np.mean([r["hybrid_accuracy"] for r in maxsm]))
    ms_frac = float(np.mean([r["routed_fraction"] for r in maxsm]))
    pr_frac = float(np.mean([r["routed_fraction"] for r in proto]))
    assert record(8, ok, f"server {server:.3f}, device {device:.3f}, hybrid {hybrid:.3f} at {pr_frac:.3f} routed; "
                         f"max-softmax baseline {ms:.3f} at {ms_frac:.3f} routed; runtime path agrees: {agree}")


# 9 ---------------------------------------------------------------------------

def _forms(window):
    yield bytes(window)
    yield "".join(chr(97 + s) for s in window).encode()
    yield ",".join(map(str, window)).encode()
    yield ", ".join(map(str, window)).encode()
    yield " ".join(map(str, window)).encode()


def test_criterion_09_privacy(full):
    b = full.bench
    pool, ind, _ = b.pool
    runtime = b.device_runtime(ind)
    rng = np.random.default_rng(99)
    protos = PrototypeSet(np.full((1, 32), 1 / 32))
    steps_before = AdamW.steps_taken
    lengths, leaks, fixed_text = set(), 0, 0
    for _ in range(1000):
        size = int(rng.integers(1, 11))
        dc = CustomizationSet(tuple(Example(tuple(int(x) for x in rng.integers(0, 26, int(rng.integers(4, 9)))), ())
                                    for _ in range(size)))
        req = runtime.request_for(dc)
        wire = req.to_bytes()
        # same request with every alpha zeroed: field names and framing only
        skeleton = replace(req, alphas=(0.0,) * len(req.alphas)).to_bytes()
        lengths.add(len(wire))
        for p in dc.prompts():
            for i in range(len(p) - 3):
                hits = [f for f in _forms(p[i:i + 4]) if f in wire]
                fixed_text += bool(hits) and all(f in skeleton for f in hits)
                leaks += any(f not in skeleton for f in hits)
        serve_blend(pool, req, protos, 0.5, indicator_checksum=ind.checksum())
    steps = AdamW.steps_taken - steps_before
    ok = len(lengths) == 1 and leaks == 0 and steps == 0
    assert record(9, ok, f"N={pool.n_bases}: request lengths {sorted(lengths)}, leaked windows {leaks} "
                         f"({fixed_text} letter windows coincide with fixed field names), optimizer steps during serving {steps}")


# 10 --------------------------------------------------------------------------

def _end_to_end(workdir):
    b = Benchmark(BenchmarkConfig.small(seed=3, precision=64), workdir)
    for name in ("diagonal-dominance", "alpha-diversity", "routing-sweep", "single-lora-baseline"):
        run_experiment(name, b, Path(workdir) / "reports")
    b.save_packages()
    return b


def _artifact_bytes(root: Path) -> dict:
    keep = lambda p: p.suffix in (".bin", ".pkg", ".json", ".csv", ".jsonl")
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and keep(p)}


def test_criterion_10_determinism(tmp_path):
    _end_to_end(tmp_path / "a")
    _end_to_end(tmp_path / "b")
    fa, fb = _artifact_bytes(tmp_path / "a"), _artifact_bytes(tmp_path / "b")
    same_runs = fa.keys() == fb.keys() and all(fa[k] == fb[k] for k in fa)
    kinds = {k.split("/")[0] if "/" in k else Path(k).suffix for k in fa}
    pool, ind = load_pool(tmp_path / "a" / "pool.bin")
    save_pool(tmp_path / "resaved.bin", pool, ind)
    w = TransformerWeights.load(tmp_path / "a" / "device_base.bin")
    w.save(tmp_path / "w2.bin")
    pkg = (tmp_path / "a" / "packages" / "copy.pkg").read_bytes()
    round_trip = ((tmp_path / "resaved.bin").read_bytes() == (tmp_path / "a" / "pool.bin").read_bytes()
                  and (tmp_path / "w2.bin").read_bytes() == (tmp_path / "a" / "device_base.bin").read_bytes()
                  and DeploymentPackage.from_bytes(pkg).to_bytes() == pkg)
    ok = same_runs and round_trip and {"packages", "reports", ".bin"} <= kinds
    assert record(10, ok, f"{len(fa)} artifacts byte-identical across runs: {same_runs}; "
                          f"save/load bit-exact: {round_trip}")
