import math
from dataclasses import replace

import numpy as np
import pytest

from crayon.model import ModelConfig, first_layer_queries, init_weights
from crayon.numerics import pca_project
from crayon.tasks import Record, default_tasks, gen_corpus, query_tokens, strip_labels
from crayon.training import (AdamW, TrainConfig, TrainLog, alpha_diversity_report, batch_schedule, build_indicators,
                             cosine_lr, extract_embeddings, pretrain_base, train_pool)

CFG = ModelConfig(32, 16, 2, 2, 32, 24, precision=64)
TC = TrainConfig(n_bases=3, rank=2, pca_dim=4, max_iters=8, batch_size=6, lr=1e-2, seed=3)


@pytest.fixture(scope="module")
def setup():
    corpus = gen_corpus(default_tasks(0), {"train": 20}, seed=0)
    recs = corpus.splits["train"]
    w = init_weights(CFG, 0)
    ex = strip_labels(recs)
    ind = build_indicators(extract_embeddings(w, ex, seed=0, use_positions=False), TC)
    return w, recs, ex, ind


def test_cosine_schedule():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0, abs=1e-15)


def test_batch_schedule_covers_each_epoch():
    batches = list(batch_schedule(10, 5, 4, seed=1))
    assert sorted(np.concatenate(batches[:2]).tolist()) == list(range(10))
    assert [b.tolist() for b in batches] == [b.tolist() for b in batch_schedule(10, 5, 4, seed=1)]


def test_adamw_first_step_is_sign_step():
    p = {"x": np.array([1.0, -2.0])}
    AdamW(0.1).step(p, {"x": np.array([3.0, -0.5])})
    np.testing.assert_allclose(p["x"], [0.9, -1.9], atol=1e-7)


def test_extract_embeddings_no_sampling_and_single(setup):
    w, recs, ex, _ = setup
    e = extract_embeddings(w, ex, cap=10 ** 6)
    assert e.shape == (len(ex), CFG.d_model)
    np.testing.assert_allclose(e[5], first_layer_queries(w, query_tokens(ex[5].prompt)), atol=1e-12)
    one = extract_embeddings(w, ex[:1])
    np.testing.assert_allclose(one[0], first_layer_queries(w, query_tokens(ex[0].prompt)), atol=1e-12)
    np.testing.assert_array_equal(extract_embeddings(w, ex, cap=50, seed=4), extract_embeddings(w, ex, cap=50, seed=4))
    assert extract_embeddings(w, ex, cap=50).shape[0] == 50


def test_build_indicators_two_clusters():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(30, 6)) * 0.01 + 5
    b = rng.normal(size=(30, 6)) * 0.01 - 5
    b[:, 0] += 3
    emb = np.vstack([a, b])
    ind = build_indicators(emb, TrainConfig(n_bases=2, pca_dim=2))
    means = sorted(map(tuple, np.round([pca_project(ind.pca, a).mean(0), pca_project(ind.pca, b).mean(0)], 6)))
    got = sorted(map(tuple, np.round(ind.centroids.centroids, 6)))
    np.testing.assert_allclose(got, means, atol=1e-3)


def test_full_rank_pca_preserves_clustering():
    rng = np.random.default_rng(1)
    emb = np.vstack([rng.normal(size=(20, 3)) + c for c in ([0, 0, 0], [6, 0, 0], [0, 6, 0])])
    on = build_indicators(emb, TrainConfig(n_bases=3, pca_dim=3))
    centred = emb - emb.mean(0)
    off = build_indicators(centred, TrainConfig(n_bases=3, use_pca=False))
    part = lambda labels: sorted(tuple(np.flatnonzero(labels == j)) for j in range(3))
    assert part(on.centroids.labels) == part(off.centroids.labels)


def test_single_adapter_indicator():
    rng = np.random.default_rng(2)
    emb = rng.normal(size=(10, 4))
    ind = build_indicators(emb, TrainConfig(n_bases=1, pca_dim=2))
    np.testing.assert_allclose(ind.centroids.centroids[0], pca_project(ind.pca, emb).mean(0), atol=1e-12)


def test_zero_lr_returns_initialization(setup):
    from crayon.adapters import init_pool
    from crayon.model import adapted_sites
    w, recs, ex, ind = setup
    pool, _ = train_pool(w, ex, ind, replace(TC, lr=0.0))
    ref = init_pool(adapted_sites(CFG), CFG.d_model, TC.n_bases, TC.rank, TC.scaling, TC.seed, CFG.dtype)
    assert pool.checksum() == ref.checksum()


def test_initial_loss_is_uniform_entropy(setup):
    w, recs, ex, ind = setup
    _, log = train_pool(w, ex, ind, replace(TC, max_iters=1))
    # the untrained base has near-zero logits and B = 0 adds nothing
    assert log.losses[0] == pytest.approx(math.log(32), abs=0.05)


def test_label_blindness_and_determinism(setup):
    w, recs, ex, ind = setup
    shuffled = [Record(t, r.prompt, r.answer) for r, t in zip(recs, np.random.default_rng(9).permutation(
        [r.task for r in recs]))]
    p1, l1 = train_pool(w, strip_labels(recs), ind, TC, tags=[r.task for r in recs])
    p2, _ = train_pool(w, strip_labels(shuffled), ind, TC, tags=[r.task for r in shuffled])
    assert p1.checksum() == p2.checksum()
    assert l1.losses[-1] < l1.losses[0]


def test_trainer_refuses_labelled_records(setup):
    w, recs, _, ind = setup
    with pytest.raises(TypeError):
        train_pool(w, recs, ind, TC)


def test_alpha_report():
    log = TrainLog(alpha_records=[("a", np.array([0.2, 0.8])), ("a", np.array([0.4, 0.6])),
                                  ("b", np.array([0.9, 0.1]))])
    rep = alpha_diversity_report(log)
    np.testing.assert_allclose(rep["per_task"]["a"]["mean"], [0.3, 0.7])
    np.testing.assert_allclose(rep["per_task"]["b"]["mean"], [0.9, 0.1])
    assert rep["max_mean_gap"] == pytest.approx(0.6)
    flat = alpha_diversity_report(TrainLog(alpha_records=[("a", np.array([0.5, 0.5]))] * 3))
    assert flat["adapter_std"] == [0.0, 0.0]


def test_pretrain_reduces_loss():
    corpus = gen_corpus(default_tasks(0), {"train": 10}, seed=0)
    w0 = init_weights(replace(CFG, precision=32), 0)
    w, losses = pretrain_base(w0, strip_labels(corpus.splits["train"]), 30, 8, 1e-2, 0)
    assert losses[-1] < losses[0]
    assert w0.checksum() != w.checksum()
