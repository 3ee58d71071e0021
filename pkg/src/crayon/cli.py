"""Command-line entry point: ``crayon <command> ...`` (or ``python -m crayon``)."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

# numerical modules are imported inside the commands so --deterministic can
# pin the BLAS thread pools before numpy loads


def _pin_threads() -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS"):
        os.environ[var] = "1"


def _emit(obj, out: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _precision(args) -> int:
    return 64 if args.precision == "f64" else 32


def _bench_config(args, small: bool = False):
    from .harness import BenchmarkConfig
    if small:
        return BenchmarkConfig.small(seed=args.seed, precision=_precision(args))
    return BenchmarkConfig(seed=args.seed, precision=_precision(args))


def _read_records(path):
    """A corpus directory (eval split) or a single JSON-lines file."""
    from .tasks import Corpus, read_jsonl
    p = Path(path)
    if p.is_dir():
        return Corpus.read(p).splits["eval"]
    return read_jsonl(p)


# commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .tasks import default_tasks, gen_corpus
    counts = {"train": args.train, "customization": args.customization,
              "eval": args.eval, "calibration": args.calibration}
    corpus = gen_corpus(default_tasks(args.seed), counts, args.seed)
    corpus.write(args.out)
    _emit({"out": str(args.out), "tasks": corpus.task_ids(),
           "counts": {k: len(v) for k, v in corpus.splits.items()}})
    return 0


def cmd_pretrain_base(args) -> int:
    from dataclasses import replace
    from .harness import BenchmarkConfig
    from .model import init_weights
    from .tasks import Corpus, strip_labels
    from .training import pretrain_base
    cfg = BenchmarkConfig()
    mcfg = replace(cfg.device_model if args.role == "device" else cfg.server_model, precision=_precision(args))
    if args.d_model:
        mcfg = replace(mcfg, d_model=args.d_model, n_layers=args.layers, n_heads=args.heads, d_ff=4 * args.d_model)
    corpus = Corpus.read(args.corpus)
    w, losses = pretrain_base(init_weights(mcfg, args.seed), strip_labels(corpus.splits["train"]),
                              args.iters, args.batch_size, args.lr, args.seed)
    w.save(args.out)
    _emit({"out": str(args.out), "checksum": w.checksum(), "first_loss": losses[0] if losses else None,
           "final_loss": losses[-1] if losses else None})
    return 0


def cmd_train_pool(args) -> int:
    from .adapters import save_pool
    from .model import TransformerWeights
    from .tasks import Corpus, strip_labels
    from .training import TrainConfig, build_indicators, extract_embeddings, train_pool
    corpus = Corpus.read(args.corpus)
    w = TransformerWeights.load(args.base)
    tc = TrainConfig(n_bases=args.n_bases, rank=args.rank, pca_dim=args.pca_dim, max_iters=args.iters,
                     seed=args.seed, lr=args.lr, batch_size=args.batch_size, use_pca=not args.no_pca)
    ex = strip_labels(corpus.splits["train"])
    ind = build_indicators(extract_embeddings(w, ex, tc.embedding_sample_cap, tc.seed, tc.embed_positions), tc)
    pool, log = train_pool(w, ex, ind, tc, tags=[r.task for r in corpus.splits["train"]])
    save_pool(args.out, pool, ind)
    sink = open(args.log, "w") if args.log else sys.stdout
    try:
        for line in log.jsonl_lines():
            sink.write(line + "\n")
    finally:
        if args.log:
            sink.close()
    return 0


def _attached(args):
    from .harness import Benchmark
    work = tempfile.mkdtemp(prefix="crayon-")
    b = Benchmark(_bench_config(args), work)
    return b.attach(corpus=args.corpus, device_base=args.base, server_base=getattr(args, "server", None),
                    pool=getattr(args, "pool", None))


def cmd_customize(args) -> int:
    from .customization import DeploymentPackage
    b = _attached(args)
    pool, ind, _ = b.pool
    runtime = b.device_runtime(ind)
    dc = b.customization_set(args.task, args.dc_size)
    req = runtime.request_for(dc)
    pkg = b.package_bytes(args.task, dc_size=args.dc_size, scorer=args.scorer.replace("-", "_"))
    Path(args.out).write_bytes(pkg)
    parsed = DeploymentPackage.from_bytes(pkg)
    _emit({"out": str(args.out), "request_bytes": len(req.to_bytes()), "alphas": list(req.alphas),
           "threshold": parsed.threshold, "scorer": parsed.scorer, "package_bytes": len(pkg)})
    return 0


def cmd_eval(args) -> int:
    import numpy as np
    from .customization import DeploymentPackage
    from .harness import correctness
    from .model import ModelHandle, TransformerWeights
    from .tasks import EOS
    w = TransformerWeights.load(args.base)
    delta = DeploymentPackage.from_bytes(Path(args.package).read_bytes()).adapter.delta() if args.package else None
    handle = ModelHandle(w, delta, EOS)
    recs = [r for r in _read_records(args.corpus) if args.task is None or r.task == args.task]
    if not recs:
        print("no records to evaluate", file=sys.stderr)
        return 2
    ok = correctness(handle, recs, args.max_new)
    tasks = sorted({r.task for r in recs})
    per = {t: float(np.mean([o for o, r in zip(ok, recs) if r.task == t])) for t in tasks}
    _emit({"per_task_accuracy": per, "accuracy": float(ok.mean()), "records": len(recs)}, args.out)
    return 0


def cmd_cross_matrix(args) -> int:
    from .experiments import dominance_stats
    b = _attached(args)
    m = b.cross_task_matrix()
    _emit({"tasks": b.task_ids, "matrix": m.tolist(), "summary": dominance_stats(m)}, args.out)
    return 0


def _read_scores(path):
    text = Path(path).read_text().strip()
    if text.startswith("["):
        return [float(x) for x in json.loads(text)]
    return [float(x) for x in text.split()]


def cmd_calibrate(args) -> int:
    import numpy as np
    from .hybrid import calibrate_threshold
    scores = np.array(_read_scores(args.scores))
    th = calibrate_threshold(scores, args.ratio)
    _emit({"threshold": th.value, "k": th.k, "routed": th.routed, "tied": th.tied, "m": int(scores.size),
           "realized_fraction": float((scores < th.value).mean())})
    return 0


def cmd_hybrid_eval(args) -> int:
    import numpy as np
    from .customization import DeploymentPackage
    from .harness import answer_of
    from .hybrid import calibrate_threshold, score_decoded
    from .model import ModelHandle, TransformerWeights
    from .tasks import EOS, query_tokens
    scorer = args.scorer.replace("-", "_")
    pkg = DeploymentPackage.from_bytes(Path(args.device_pkg).read_bytes())
    device = ModelHandle(TransformerWeights.load(args.base), pkg.adapter.delta(), EOS)
    server = ModelHandle(TransformerWeights.load(args.server), None, EOS)
    if args.calibration:
        cal = _read_records(args.calibration)
        decs = device.decode_batch([query_tokens(r.prompt) for r in cal], args.max_new)
        threshold = calibrate_threshold([score_decoded(d, scorer, pkg.prototypes) for d in decs],
                                        args.ratio).value
    elif scorer == pkg.scorer:
        threshold = pkg.threshold
    else:
        print("the package threshold belongs to another scorer; pass --calibration", file=sys.stderr)
        return 2
    recs = _read_records(args.eval)
    decs = device.decode_batch([query_tokens(r.prompt) for r in recs], args.max_new)
    scores = np.array([score_decoded(d, scorer, pkg.prototypes) for d in decs])
    routed = scores < threshold
    answers = [answer_of(d) for d in decs]
    idx = np.flatnonzero(routed)
    if idx.size:
        sdecs = server.decode_batch([query_tokens(recs[i].prompt) for i in idx], args.max_new)
        for i, d in zip(idx, sdecs):
            answers[i] = answer_of(d)
    ok = np.array([a == list(r.answer) for a, r in zip(answers, recs)])
    tasks = sorted({r.task for r in recs})
    counts, edges = np.histogram(scores, bins=args.bins)
    _emit({"scorer": scorer, "threshold": threshold, "routed_fraction": float(routed.mean()),
           "accuracy": float(ok.mean()),
           "per_task_accuracy": {t: float(np.mean([o for o, r in zip(ok, recs) if r.task == t])) for t in tasks},
           "score_histogram": {"counts": counts.tolist(), "edges": edges.tolist()}}, args.out)
    return 0


def cmd_experiment(args) -> int:
    from .experiments import EXPERIMENTS, run_experiment
    from .harness import Benchmark
    names = EXPERIMENTS if args.name == "all" else (args.name,)
    b = Benchmark(_bench_config(args, args.small), args.workdir, verbose=True)
    out = Path(args.out or Path(args.workdir) / "reports")
    for name in names:
        rep = run_experiment(name, b, out)
        print(f"{name}: {json.dumps(rep.summary, sort_keys=True, default=str)[:400]}")
    b.save_packages()
    (out / "timings.json").write_text(json.dumps(b.timings, indent=2, sort_keys=True) + "\n")
    return 0


# parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from . import __version__
    p = argparse.ArgumentParser(prog="crayon", description="Customized on-device adapters from a blended pool.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write the synthetic multi-task corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--train", type=int, default=3000)
    s.add_argument("--customization", type=int, default=10)
    s.add_argument("--eval", type=int, default=200)
    s.add_argument("--calibration", type=int, default=200)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("pretrain-base", help="next-token pretraining of a device or server model")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--role", choices=("device", "server"), default="device")
    s.add_argument("--iters", type=int, default=3000)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--d-model", type=int, default=0, help="override model width")
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--heads", type=int, default=4)
    s.set_defaults(fn=cmd_pretrain_base)

    s = sub.add_parser("train-pool", help="jointly train the adapter pool; TrainLog goes to stdout or --log")
    s.add_argument("--corpus", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--n-bases", type=int, default=8)
    s.add_argument("--rank", type=int, default=4)
    s.add_argument("--pca-dim", type=int, default=16)
    s.add_argument("--no-pca", action="store_true")
    s.add_argument("--iters", type=int, default=3000)
    s.add_argument("--lr", type=float, default=5e-3)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(fn=cmd_train_pool)

    s = sub.add_parser("customize", help="run the device/server exchange for one task's examples")
    s.add_argument("--corpus", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--server", required=True)
    s.add_argument("--pool", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--dc-size", type=int)
    s.add_argument("--scorer", choices=("prototype", "max-softmax"), default="prototype")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_customize)

    s = sub.add_parser("eval", help="exact-match accuracy of a base model, optionally with a package")
    s.add_argument("--corpus", required=True, help="corpus directory (eval split) or JSON-lines file")
    s.add_argument("--base", required=True)
    s.add_argument("--package")
    s.add_argument("--task")
    s.add_argument("--max-new", type=int, default=9)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("cross-matrix", help="customized-on x evaluated-on accuracy matrix")
    s.add_argument("--corpus", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--server", required=True)
    s.add_argument("--pool", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_cross_matrix)

    s = sub.add_parser("calibrate", help="routing threshold from a list of calibration scores")
    s.add_argument("--scores", required=True, help="JSON list or whitespace-separated numbers")
    s.add_argument("--ratio", type=float, default=0.2)
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("hybrid-eval", help="device-first inference with server fallback")
    s.add_argument("--base", required=True, help="device base weights")
    s.add_argument("--device-pkg", required=True)
    s.add_argument("--server", required=True)
    s.add_argument("--eval", required=True, help="corpus directory or JSON-lines file")
    s.add_argument("--scorer", choices=("prototype", "max-softmax"), default="prototype")
    s.add_argument("--ratio", type=float, default=0.2)
    s.add_argument("--calibration", help="recalibrate the threshold on these records")
    s.add_argument("--bins", type=int, default=20)
    s.add_argument("--max-new", type=int, default=9)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_hybrid_eval)

    s = sub.add_parser("experiment", help="run a named experiment on the cached benchmark")
    s.add_argument("name", choices=("diagonal-dominance", "alpha-diversity", "pca-ablation", "routing-sweep",
                                    "dc-size-sweep", "rank-sweep", "single-lora-baseline", "all"))
    s.add_argument("--workdir", default="crayon-work")
    s.add_argument("--out")
    s.add_argument("--small", action="store_true", help="seconds-scale configuration")
    s.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.deterministic:
        _pin_threads()
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
