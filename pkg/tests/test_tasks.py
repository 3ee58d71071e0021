import numpy as np
import pytest
from hypothesis import given, strategies as st

from crayon.tasks import (BOS, EOS, PAD, SEP, VOCAB_SIZE, Corpus, Example, Record, TaskSpec, default_tasks,
                          gen_corpus, pack_batch, query_tokens, strip_labels)


def _oracle(gen, prompt, spec):
    """Independent restatement of each generator."""
    if gen == "copy":
        return list(prompt)
    if gen == "reverse":
        return [prompt[i] for i in range(len(prompt) - 1, -1, -1)]
    if gen == "sort-asc":
        out = []
        for letter in range(spec.alphabet_size):
            out += [letter] * prompt.count(letter)
        return out
    if gen == "sort-desc":
        return _oracle("sort-asc", prompt, spec)[::-1]
    if gen == "shift-k":
        return [(p + spec.shift) - spec.alphabet_size if p + spec.shift >= spec.alphabet_size else p + spec.shift
                for p in prompt]
    table = np.random.default_rng(spec.seed).permutation(spec.alphabet_size)
    return [int(table[p]) for p in prompt]


def test_reverse_abc():
    assert TaskSpec("r", "reverse").answer([0, 1, 2]) == [2, 1, 0]


def test_vocabulary_layout():
    assert (PAD, BOS, SEP, EOS, VOCAB_SIZE) == (26, 27, 28, 29, 32)
    assert query_tokens([3, 4]) == [BOS, 3, 4, SEP]


@given(st.sampled_from(["copy", "reverse", "sort-asc", "sort-desc", "shift-k", "cipher"]),
       st.lists(st.integers(0, 25), min_size=1, max_size=8), st.integers(0, 1000))
def test_generators_match_oracle(gen, prompt, seed):
    spec = TaskSpec(gen, gen, seed=seed)
    assert spec.answer(prompt) == _oracle(gen, prompt, spec)


def test_cipher_is_a_permutation():
    t = TaskSpec("c", "cipher", seed=3).cipher_table()
    assert sorted(t.tolist()) == list(range(26))


def test_bad_specs():
    with pytest.raises(ValueError):
        TaskSpec("x", "rot13")
    with pytest.raises(ValueError):
        TaskSpec("x", "copy", window=(5, 30))


COUNTS = {"train": 40, "customization": 10, "eval": 15, "calibration": 12}


def test_corpus_counts_disjointness_and_answers():
    tasks = default_tasks(0)
    c = gen_corpus(tasks, COUNTS, seed=1)
    specs = {t.task_id: t for t in tasks}
    seen = set()
    for split, n in COUNTS.items():
        for t in c.task_ids():
            recs = c.select(split, t)
            assert len(recs) == n
            for r in recs:
                spec = specs[r.task]
                assert list(r.answer) == _oracle(spec.generator, list(r.prompt), spec)
                assert all(spec.window[0] <= p < spec.window[1] for p in r.prompt)
                assert 4 <= len(r.prompt) <= 8
                key = (r.task, r.prompt)
                assert key not in seen
                seen.add(key)
    # training split is interleaved rather than grouped by task
    first = [r.task for r in c.splits["train"][:30]]
    assert len(set(first)) > 1


def test_corpus_files_are_deterministic(tmp_path):
    for d in ("a", "b"):
        gen_corpus(default_tasks(2), COUNTS, seed=2).write(tmp_path / d)
    for name in ("tasks.json", "train.jsonl", "eval.jsonl", "customization.jsonl", "calibration.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    back = Corpus.read(tmp_path / "a")
    assert back.splits["eval"] == gen_corpus(default_tasks(2), COUNTS, seed=2).splits["eval"]
    line = (tmp_path / "a" / "eval.jsonl").read_text().splitlines()[0]
    assert set(__import__("json").loads(line)) == {"task", "prompt", "answer"}


def test_needs_two_tasks():
    with pytest.raises(ValueError):
        gen_corpus(default_tasks()[:1], COUNTS)


def test_strip_labels_drops_task():
    ex = strip_labels([Record("copy", (1, 2), (1, 2))])
    assert ex == [Example((1, 2), (1, 2))]
    assert not hasattr(ex[0], "task")


def test_pack_batch_layout():
    b = pack_batch([Example((1, 2), (2, 1)), Example((5,), (5,))])
    assert b.inputs[0].tolist() == [BOS, 1, 2, SEP, 2, 1]
    assert b.targets[0].tolist() == [1, 2, SEP, 2, 1, EOS]
    assert b.mask[0].tolist() == [False, False, False, True, True, True]
    assert b.inputs[1].tolist() == [BOS, 5, SEP, 5, PAD, PAD]
    assert b.mask[1].tolist() == [False, False, True, True, False, False]
    full = pack_batch([Example((1, 2), (2, 1))], answer_only=False)
    assert full.mask.all()
