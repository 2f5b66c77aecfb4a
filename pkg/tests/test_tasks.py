import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from butterfly_moe import tasks as tk
from butterfly_moe.errors import ConfigError


def brute_check(task, inp, target, lo, count):
    """Label checker written from the task definitions, independent of expected_target."""
    if task == "copy":
        return list(target) == list(inp)
    if task == "reverse":
        return all(target[i] == inp[len(inp) - 1 - i] for i in range(len(inp)))
    if task == "sort":
        return all(target[i] <= target[i + 1] for i in range(len(target) - 1)) and sorted(inp) == sorted(target)
    if task == "arith":
        seq = list(inp) + list(target)
        steps = {(seq[i + 1] - seq[i]) % count for i in range(len(seq) - 1)}
        return len(steps) == 1 and all(lo <= t < lo + count for t in seq)
    raise AssertionError(task)


@pytest.mark.parametrize("task,expected", [("copy", [5, 3, 7]), ("reverse", [7, 3, 5]), ("sort", [3, 5, 7])])
def test_small_examples(task, expected):
    assert tk.expected_target(task, [5, 3, 7], 1, 31) == expected


def test_arith_progression_example():
    seq = tk.arith_progression(2, 3, 8, offset=1, modulus=31)
    assert seq[:4] == [2, 5, 8, 11] and seq[4:] == [14, 17, 20, 23]
    assert tk.expected_target("arith", [2, 5, 8, 11], 1, 31) == [14, 17, 20, 23]


def test_arith_wraps_into_numeric_range():
    assert tk.arith_progression(30, 3, 3, offset=1, modulus=31) == [30, 2, 5]


@pytest.mark.parametrize("task", tk.TASKS)
def test_generated_labels_valid(task):
    samples = tk.generate(task, 300, 16, 32, seed=4)
    lo, count = tk.numeric_range(32)
    for s in samples:
        assert len(s.input) == len(s.target) == 16
        assert brute_check(task, s.input, s.target, lo, count)
        assert tk.check_sample(s, 32)
        assert all(0 < t < 32 for t in s.input + s.target)
    if task == "sort":
        assert all(len(set(s.input)) == 16 for s in samples)


@pytest.mark.parametrize("task", tk.TASKS)
def test_deterministic(task):
    assert tk.generate(task, 50, 8, 32, 11) == tk.generate(task, 50, 8, 32, 11)
    assert tk.generate(task, 50, 8, 32, 11) != tk.generate(task, 50, 8, 32, 12)


def test_check_sample_rejects_wrong_label():
    s = tk.TaskSample((5, 3, 7), (5, 7, 3), "sort")
    assert not tk.check_sample(s, 32)
    assert not tk.check_sample(tk.TaskSample((5, 40), (5, 40), "copy"), 32)


@pytest.mark.parametrize("kw", [dict(task="nope"), dict(seq_len=0), dict(vocab=2), dict(task="sort", vocab=10),
                                dict(task="arith", seq_len=1)])
def test_bad_arguments(kw):
    args = dict(task="copy", n_samples=2, seq_len=16, vocab=32, seed=0) | kw
    with pytest.raises(ConfigError):
        tk.generate(**args)


def test_mixture_is_tagged_and_uniform():
    samples = tk.generate_mixture(4000, 6, 32, seed=0)
    counts = {t: sum(s.task == t for s in samples) for t in tk.TASKS}
    assert all(abs(c - 1000) < 4 * np.sqrt(4000 * 0.25 * 0.75) for c in counts.values())
    lo, count = tk.numeric_range(32, tagged=True)
    assert lo == 5
    for s in samples[:200]:
        assert tk.check_sample(s, 32, tagged=True)
        assert brute_check(s.task, s.input, s.target, lo, count)
    assert tk.make_dataset("mix", 20, 6, 32, 3) == tk.generate_mixture(20, 6, 32, 3)


def test_pack_layout():
    samples = [tk.TaskSample((5, 3, 7), (7, 3, 5), "reverse")]
    inputs, targets, mask = tk.pack(samples)
    assert inputs.tolist() == [[5, 3, 7, 0, 7, 3]]
    assert targets.tolist() == [[3, 7, 0, 7, 3, 5]]
    assert mask.tolist() == [[False, False, False, True, True, True]]


def test_pack_mask_covers_exactly_targets():
    samples = tk.generate("copy", 5, 4, 32, 0)
    inputs, targets, mask = tk.pack(samples)
    assert inputs.shape == targets.shape == mask.shape == (5, 8)
    for s, y, m in zip(samples, targets, mask):
        assert y[m].tolist() == list(s.target)


def test_pack_tagged_prefix():
    samples = [tk.TaskSample((6, 7), (6, 7), "copy"), tk.TaskSample((6, 7), (7, 6), "reverse")]
    inputs, _, _ = tk.pack(samples)
    assert inputs[:, 0].tolist() == [tk.task_tag("copy"), tk.task_tag("reverse")]


def test_pack_empty():
    with pytest.raises(ConfigError):
        tk.pack([])


@settings(max_examples=40, deadline=None)
@given(task=st.sampled_from(tk.TASKS), seq_len=st.integers(1, 12), vocab=st.integers(14, 64), seed=st.integers(0, 10 ** 6))
def test_labels_valid_property(task, seq_len, vocab, seed):
    seq_len = max(seq_len, 2) if task == "arith" else seq_len
    lo, count = tk.numeric_range(vocab)
    for s in tk.generate(task, 10, seq_len, vocab, seed):
        assert tk.check_sample(s, vocab)
        assert brute_check(task, s.input, s.target, lo, count)
