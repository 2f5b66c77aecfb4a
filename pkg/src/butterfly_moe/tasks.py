"""Seeded synthetic sequence tasks: copy, reverse, sort and arithmetic progression.

Token layout: id 0 is the separator. In a tagged stream (task mixtures) ids
1..4 mark the task and numeric tokens start at 5; otherwise numeric tokens
are 1..vocab-1. A packed training sequence is ``[tag?] input SEP target``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

TASKS = ("copy", "reverse", "sort", "arith")
SEPARATOR = 0
TAG_OFFSET = 1


def task_tag(task: str) -> int:
    return TAG_OFFSET + TASKS.index(task)


def numeric_range(vocab: int, tagged: bool = False) -> tuple[int, int]:
    """``(first_id, count)`` of the numeric sub-vocabulary."""
    lo = TAG_OFFSET + (len(TASKS) if tagged else 0)
    return lo, vocab - lo


@dataclass(frozen=True)
class TaskSample:
    input: tuple[int, ...]
    target: tuple[int, ...]
    task: str

    def packed(self, tagged: bool = False) -> list[int]:
        prefix = [task_tag(self.task)] if tagged else []
        return prefix + list(self.input) + [SEPARATOR] + list(self.target)


def arith_progression(start: int, step: int, length: int, offset: int, modulus: int) -> list[int]:
    """Tokens ``offset + ((start - offset + t*step) mod modulus)`` for ``t < length``."""
    return [offset + (start - offset + t * step) % modulus for t in range(length)]


def expected_target(task: str, inp, offset: int, modulus: int) -> list[int]:
    """Reference answer for ``inp``; used by the brute-force label checker."""
    inp = list(inp)
    if task == "copy":
        return inp
    if task == "reverse":
        return inp[::-1]
    if task == "sort":
        return sorted(inp)
    if task == "arith":
        n = len(inp)
        step = (inp[1] - inp[0]) % modulus if n > 1 else 0
        return arith_progression(inp[0], step, 2 * n, offset, modulus)[n:]
    raise ConfigError(f"unknown task {task!r}")


def _check_args(task: str, seq_len: int, vocab: int, tagged: bool) -> tuple[int, int]:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    if seq_len < 1:
        raise ConfigError(f"seq_len must be positive, got {seq_len}")
    lo, count = numeric_range(vocab, tagged)
    if count < 2:
        raise ConfigError(f"vocab {vocab} leaves fewer than two numeric tokens")
    if task == "arith" and seq_len < 2:
        raise ConfigError("arith needs seq_len >= 2 so the step is recoverable from the input")
    if task == "sort" and count < seq_len:
        raise ConfigError(f"sort without duplicates needs at least {seq_len} numeric tokens, vocab {vocab} has {count}")
    return lo, count


def _one(task: str, rng: np.random.Generator, seq_len: int, lo: int, count: int) -> TaskSample:
    if task == "sort":
        inp = (lo + rng.choice(count, size=seq_len, replace=False)).tolist()
    elif task == "arith":
        start = lo + int(rng.integers(count))
        step = int(rng.integers(1, count))
        seq = arith_progression(start, step, 2 * seq_len, lo, count)
        return TaskSample(tuple(seq[:seq_len]), tuple(seq[seq_len:]), task)
    else:
        inp = (lo + rng.integers(count, size=seq_len)).tolist()
    return TaskSample(tuple(inp), tuple(expected_target(task, inp, lo, count)), task)


def generate(task: str, n_samples: int, seq_len: int, vocab: int, seed, tagged: bool = False) -> list[TaskSample]:
    """``n_samples`` deterministic samples of one task."""
    lo, count = _check_args(task, seq_len, vocab, tagged)
    rng = np.random.default_rng(seed)
    return [_one(task, rng, seq_len, lo, count) for _ in range(n_samples)]


def generate_mixture(n_samples: int, seq_len: int, vocab: int, seed, tasks=TASKS) -> list[TaskSample]:
    """Tagged samples whose task is drawn uniformly per sample."""
    ranges = {t: _check_args(t, seq_len, vocab, True) for t in tasks}
    rng = np.random.default_rng(seed)
    picks = rng.integers(len(tasks), size=n_samples)
    return [_one(tasks[p], rng, seq_len, *ranges[tasks[p]]) for p in picks]


def make_dataset(task: str, n_samples: int, seq_len: int, vocab: int, seed) -> list[TaskSample]:
    """Single task by name, or ``"mix"`` for a tagged uniform mixture of all four."""
    if task == "mix":
        return generate_mixture(n_samples, seq_len, vocab, seed)
    return generate(task, n_samples, seq_len, vocab, seed)


def is_tagged(samples) -> bool:
    return len({s.task for s in samples}) > 1


def check_sample(sample: TaskSample, vocab: int, tagged: bool = False) -> bool:
    lo, count = numeric_range(vocab, tagged)
    toks = list(sample.input) + list(sample.target)
    if any(not lo <= t < vocab for t in toks):
        return False
    if len(sample.target) != len(sample.input):
        return False
    if sample.task == "sort" and len(set(sample.input)) != len(sample.input):
        return False
    return list(sample.target) == expected_target(sample.task, sample.input, lo, count)


def pack(samples, tagged: bool | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing arrays ``(inputs, targets, mask)``, each ``(n, T - 1)``.

    ``mask`` marks the positions whose next token belongs to the target.
    """
    if not samples:
        raise ConfigError("cannot pack an empty dataset")
    tagged = is_tagged(samples) if tagged is None else tagged
    seqs = np.array([s.packed(tagged) for s in samples], dtype=np.int64)
    n_target = len(samples[0].target)
    T = seqs.shape[1]
    mask = np.zeros((len(samples), T - 1), dtype=bool)
    mask[:, T - 1 - n_target:] = True
    return seqs[:, :-1], seqs[:, 1:], mask
