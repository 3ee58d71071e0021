"""Synthetic symbolic tasks, corpus splits and sequence packing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import NamedTuple

import numpy as np

N_LETTERS = 26
PAD, BOS, SEP, EOS, UNK, MASK = range(N_LETTERS, N_LETTERS + 6)
VOCAB_SIZE = N_LETTERS + 6

GENERATORS = ("copy", "reverse", "sort-asc", "sort-desc", "shift-k", "cipher")
SPLITS = ("train", "customization", "eval", "calibration")


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    generator: str
    alphabet_size: int = N_LETTERS
    prompt_len: tuple = (4, 8)
    seed: int = 0
    window: tuple = (0, N_LETTERS)   # prompt letters are drawn from [lo, hi)
    shift: int = 3

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        lo, hi = self.window
        if not 0 <= lo < hi <= self.alphabet_size:
            raise ValueError(f"bad window {self.window}")

    def cipher_table(self) -> np.ndarray:
        return np.random.default_rng(self.seed).permutation(self.alphabet_size)

    def answer(self, prompt) -> list[int]:
        p = [int(t) for t in prompt]
        g = self.generator
        if g == "copy":
            return p
        if g == "reverse":
            return p[::-1]
        if g == "sort-asc":
            return sorted(p)
        if g == "sort-desc":
            return sorted(p, reverse=True)
        if g == "shift-k":
            return [(t + self.shift) % self.alphabet_size for t in p]
        table = self.cipher_table()
        return [int(table[t]) for t in p]

    def sample_prompt(self, rng: np.random.Generator) -> list[int]:
        lo, hi = self.prompt_len
        n = int(rng.integers(lo, hi + 1))
        return [int(t) for t in rng.integers(self.window[0], self.window[1], size=n)]


class Record(NamedTuple):
    task: str
    prompt: tuple
    answer: tuple


class Example(NamedTuple):
    """A training pair with no task metadata."""
    prompt: tuple
    answer: tuple


def strip_labels(records) -> list[Example]:
    return [Example(tuple(r.prompt), tuple(r.answer)) for r in records]


@dataclass
class Corpus:
    tasks: list
    splits: dict = field(default_factory=dict)

    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]

    def select(self, split: str, task: str | None = None) -> list[Record]:
        recs = self.splits[split]
        return [r for r in recs if task is None or r.task == task]

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "tasks.json").write_text(json.dumps([asdict(t) for t in self.tasks], indent=1) + "\n")
        for name, recs in self.splits.items():
            write_jsonl(d / f"{name}.jsonl", recs)

    @classmethod
    def read(cls, directory) -> "Corpus":
        d = Path(directory)
        specs = [TaskSpec(**{**t, "prompt_len": tuple(t["prompt_len"]), "window": tuple(t["window"])})
                 for t in json.loads((d / "tasks.json").read_text())]
        splits = {name: read_jsonl(d / f"{name}.jsonl") for name in SPLITS if (d / f"{name}.jsonl").exists()}
        return cls(specs, splits)


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"task": r.task, "prompt": list(r.prompt), "answer": list(r.answer)}) + "\n")


def read_jsonl(path) -> list[Record]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                out.append(Record(o["task"], tuple(o["prompt"]), tuple(o["answer"])))
    return out


def default_tasks(seed: int = 0) -> list[TaskSpec]:
    """Six tasks whose prompt letters come from partly overlapping windows of the alphabet."""
    layout = [("copy", (0, 9)), ("sort-desc", (3, 12)), ("cipher", (7, 16)),
              ("reverse", (10, 19)), ("shift-k", (14, 23)), ("sort-asc", (17, 26))]
    return [TaskSpec(g, g, seed=seed + i, window=win) for i, (g, win) in enumerate(layout)]


def gen_corpus(tasks, counts: dict, seed: int = 0) -> Corpus:
    """Generate disjoint splits with ``counts[split]`` records per task.

    A (task, prompt) pair appears in at most one split. The training split is
    shuffled across tasks with the seed; the other splits stay grouped by task.
    """
    if len(tasks) < 2:
        raise ValueError("need at least two tasks")
    rng = np.random.default_rng(seed)
    seen = set()
    splits = {name: [] for name in SPLITS}
    for name in SPLITS:
        for spec in tasks:
            want = int(counts.get(name, 0))
            got = 0
            attempts = 0
            while got < want:
                attempts += 1
                if attempts > 1000 * want + 1000:
                    raise ValueError(f"cannot draw {want} distinct prompts for {spec.task_id}")
                prompt = tuple(spec.sample_prompt(rng))
                key = (spec.task_id, prompt)
                if key in seen:
                    continue
                seen.add(key)
                splits[name].append(Record(spec.task_id, prompt, tuple(spec.answer(prompt))))
                got += 1
    order = rng.permutation(len(splits["train"]))
    splits["train"] = [splits["train"][i] for i in order]
    return Corpus(list(tasks), splits)


def query_tokens(prompt) -> list[int]:
    """Decoder input for a prompt: BOS prompt SEP."""
    return [BOS, *prompt, SEP]


@dataclass
class Batch:
    inputs: np.ndarray    # (B, T) token ids, PAD after each sequence
    targets: np.ndarray   # (B, T)
    mask: np.ndarray      # (B, T) positions contributing to the loss


def pack_batch(examples, answer_only: bool = True) -> Batch:
    """Right-pad ``BOS prompt SEP answer EOS`` sequences for teacher forcing.

    With ``answer_only`` the loss covers the answer tokens and EOS; otherwise
    every next-token position of the real sequence.
    """
    seqs = []
    starts = []
    for ex in examples:
        s = [BOS, *ex.prompt, SEP, *ex.answer, EOS]
        seqs.append(s)
        starts.append(len(ex.prompt) + 1)
    t = max(len(s) for s in seqs) - 1
    b = len(seqs)
    inputs = np.full((b, t), PAD, dtype=np.int64)
    targets = np.full((b, t), PAD, dtype=np.int64)
    mask = np.zeros((b, t), dtype=bool)
    for i, (s, st) in enumerate(zip(seqs, starts)):
        n = len(s) - 1
        inputs[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
        mask[i, (st if answer_only else 0):n] = True
    return Batch(inputs, targets, mask)
