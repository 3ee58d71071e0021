"""Named experiments over a :class:`~crayon.harness.Benchmark`, emitting JSON reports and CSV tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapters import alpha_matrix
from .harness import Benchmark, evaluate
from .training import alpha_diversity_report, build_indicators, extract_embeddings

EXPERIMENTS = ("diagonal-dominance", "alpha-diversity", "pca-ablation", "routing-sweep",
               "dc-size-sweep", "rank-sweep", "single-lora-baseline")


@dataclass
class EvalReport:
    name: str
    config: dict
    per_task_accuracy: dict = field(default_factory=dict)
    cross_matrix: list | None = None
    routing: list = field(default_factory=list)
    alpha_diversity: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    table: list = field(default_factory=list)   # rows of the CSV plot data

    def __post_init__(self):
        for t, a in self.per_task_accuracy.items():
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"accuracy for {t} outside [0, 1]: {a}")

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in ("name", "config", "per_task_accuracy", "cross_matrix",
                                            "routing", "alpha_diversity", "summary")}
        return json.dumps(_plain(d), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.table:
            cols = list(self.table[0])
            w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in self.table:
                w.writerow({k: _fmt(v) for k, v in row.items()})
        return buf.getvalue()

    def write(self, directory) -> tuple[Path, Path]:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        jp, cp = out / f"{self.name}.json", out / f"{self.name}.csv"
        jp.write_text(self.to_json())
        cp.write_text(self.to_csv())
        return jp, cp


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _plain(o):
    if isinstance(o, dict):
        return {str(k): _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, np.ndarray):
        return _plain(o.tolist())
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, (np.floating, float)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def dominance_stats(m) -> dict:
    m = np.asarray(m, dtype=np.float64)
    k = m.shape[0]
    off = m[~np.eye(k, dtype=bool)]
    diag = np.diag(m)
    rows = [bool(m[i, i] >= np.delete(m[i], i).max()) if k > 1 else True for i in range(k)]
    margin = float(diag.mean() - off.mean()) if k > 1 else 0.0
    return {"diag_mean": float(diag.mean()), "offdiag_mean": float(off.mean()) if k > 1 else None,
            "margin": margin, "rows_dominated": int(sum(rows)), "row_dominated": rows,
            "diag_exceeds_offdiag": margin > 0}


def _matrix_table(ids, m) -> list:
    return [{"customized_on": tj, "evaluated_on": ti, "accuracy": float(m[i, j])}
            for j, tj in enumerate(ids) for i, ti in enumerate(ids)]


def diagonal_dominance(b: Benchmark) -> EvalReport:
    ids = b.task_ids
    m = b.cross_task_matrix()
    return EvalReport("diagonal-dominance", b.cfg.to_dict(),
                      per_task_accuracy={t: float(m[i, i]) for i, t in enumerate(ids)},
                      cross_matrix=m.tolist(), summary=dominance_stats(m), table=_matrix_table(ids, m))


def alpha_diversity(b: Benchmark) -> EvalReport:
    _, _, tl = b.pool
    rep = alpha_diversity_report(tl)
    cols = {t: a.tolist() for t, a in b.column_alphas().items()}
    table = []
    for t in rep["tasks"]:
        pt = rep["per_task"][t]
        for n, (mu, sd) in enumerate(zip(pt["mean"], pt["std"])):
            table.append({"task": t, "adapter": n, "alpha_mean": mu, "alpha_std": sd,
                          "customization_alpha": cols[t][n]})
    means = np.array([rep["per_task"][t]["mean"] for t in rep["tasks"]])
    # pairs of tasks whose mean weight on the same adapter differs by at least 0.05
    n_pairs = sum(int(abs(means[i, n] - means[j, n]) >= 0.05)
                  for n in range(means.shape[1])
                  for i in range(len(means)) for j in range(i + 1, len(means)))
    summary = {"max_mean_gap": rep["max_mean_gap"], "mean_adapter_std": rep["mean_adapter_std"],
               "task_pairs_gap_ge_0.05": n_pairs, "customization_alphas": cols}
    return EvalReport("alpha-diversity", b.cfg.to_dict(), alpha_diversity=rep, summary=summary, table=table)


def pca_ablation(b: Benchmark) -> EvalReport:
    """Blend-weight spread over the training prompts with and without the PCA projection.

    Only the indicators change; the adapters are not retrained, since the
    spread of alpha is a property of the indicator geometry alone.
    """
    tc = b.cfg.train
    emb = extract_embeddings(b.device_base, b.train_examples(), tc.embedding_sample_cap, tc.seed,
                             tc.embed_positions)
    out, table = {}, []
    for use_pca in (True, False):
        ind = build_indicators(emb, replace(tc, use_pca=use_pca))
        a = alpha_matrix(ind, emb, tc.normalize_alpha)
        std = a.std(axis=0)
        key = "pca_on" if use_pca else "pca_off"
        out[key] = {"adapter_std": std.tolist(), "mean_adapter_std": float(std.mean()),
                    "alpha_range": float(a.max() - a.min())}
        table += [{"setting": key, "adapter": n, "alpha_std": float(s)} for n, s in enumerate(std)]
    on, off = out["pca_on"]["mean_adapter_std"], out["pca_off"]["mean_adapter_std"]
    out["std_ratio_on_over_off"] = on / off if off > 0 else float("inf")
    out["pca_increases_spread"] = off < on
    return EvalReport("pca-ablation", b.cfg.to_dict(), alpha_diversity=out, summary=out, table=table)


def routing_sweep(b: Benchmark, ratios=(0.1, 0.2, 0.3)) -> EvalReport:
    rows = []
    for t in b.task_ids:
        rows += b.routing_table(t, ratios)
    table = []
    for scorer in ("prototype", "max_softmax"):
        for r in ratios:
            sel = [x for x in rows if x["scorer"] == scorer and x["ratio"] == r]
            table.append({
                "scorer": scorer, "ratio": r,
                "routed_fraction": float(np.mean([x["routed_fraction"] for x in sel])),
                "calibration_routed_fraction": float(np.mean([x["calibration_routed_fraction"] for x in sel])),
                "hybrid_accuracy": float(np.mean([x["hybrid_accuracy"] for x in sel])),
                "device_accuracy": float(np.mean([x["device_accuracy"] for x in sel])),
                "server_accuracy": float(np.mean([x["server_accuracy"] for x in sel])),
            })
    return EvalReport("routing-sweep", b.cfg.to_dict(), routing=rows, table=table,
                      summary={"by_scorer_and_ratio": table})


def dc_size_sweep(b: Benchmark, sizes=(1, 2, 5, 10)) -> EvalReport:
    table = []
    full = b.cfg.counts.get("customization", 10)
    for size in sizes:
        if size > full:
            continue
        for t in b.task_ids:
            h = b.customized_handle(t, dc_size=size)
            table.append({"dc_size": size, "task": t,
                          "accuracy": evaluate(h, b.eval_records(t), b.cfg.max_new)})
    summary = {str(s): float(np.mean([r["accuracy"] for r in table if r["dc_size"] == s]))
               for s in sizes if s <= full}
    return EvalReport("dc-size-sweep", b.cfg.to_dict(), summary={"mean_matched_accuracy": summary},
                      table=table)


def rank_sweep(b: Benchmark, ranks=(1, 2, 4, 8)) -> EvalReport:
    table = []
    for r in ranks:
        name = "pool" if r == b.cfg.train.rank else f"pool_r{r}"
        if name != "pool":
            b.pool_for(replace(b.cfg.train, rank=r), name)
        m = b.cross_task_matrix(name)
        st = dominance_stats(m)
        table.append({"rank": r, "diag_mean": st["diag_mean"], "offdiag_mean": st["offdiag_mean"],
                      "rows_dominated": st["rows_dominated"]})
    return EvalReport("rank-sweep", b.cfg.to_dict(), summary={"by_rank": table}, table=table)


def single_lora_baseline(b: Benchmark) -> EvalReport:
    single = b.single_lora_accuracy()
    ids = b.task_ids
    matched = {t: evaluate(b.customized_handle(t), b.eval_records(t), b.cfg.max_new) for t in ids}
    table = [{"task": t, "single_lora": single[t], "customized": matched[t]} for t in ids]
    s_mean = float(np.mean(list(single.values())))
    c_mean = float(np.mean(list(matched.values())))
    return EvalReport("single-lora-baseline", b.cfg.to_dict(), per_task_accuracy=matched,
                      summary={"single_lora_mean": s_mean, "customized_mean": c_mean,
                               "gain_points": 100.0 * (c_mean - s_mean), "single_lora": single},
                      table=table)


_RUNNERS = {
    "diagonal-dominance": diagonal_dominance,
    "alpha-diversity": alpha_diversity,
    "pca-ablation": pca_ablation,
    "routing-sweep": routing_sweep,
    "dc-size-sweep": dc_size_sweep,
    "rank-sweep": rank_sweep,
    "single-lora-baseline": single_lora_baseline,
}


def run_experiment(name: str, bench: Benchmark, out_dir=None) -> EvalReport:
    if name not in _RUNNERS:
        raise ValueError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    rep = _RUNNERS[name](bench)
    if out_dir is not None:
        rep.write(out_dir)
    return rep
