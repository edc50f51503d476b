"""Synthetic parallel corpora with controllable token frequencies.

Source and target share one id space: index 0 is the end-of-sequence token
(never emitted on the source side) and ids ``1..V-1`` are content tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..embedspace import Vocab
from ..errors import InvalidArgumentError

EOS = 0
EOS_TOKEN = "</s>"
TASK_KINDS = ("copy", "reverse", "lexicon")


@dataclass(frozen=True)
class ToyTask:
    kind: str = "lexicon"
    vocab_size: int = 2000
    zipf: float = 1.2
    min_len: int = 1
    max_len: int = 4
    n_pairs: int = 4000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InvalidArgumentError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.vocab_size < 2:
            raise InvalidArgumentError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if not 1 <= self.min_len <= self.max_len:
            raise InvalidArgumentError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.n_pairs < 1:
            raise InvalidArgumentError("n_pairs must be positive")
        if self.kind == "lexicon" and self.zipf <= 0:
            raise InvalidArgumentError("zipf exponent must be positive")


@dataclass(frozen=True)
class TaskData:
    task: ToyTask
    pairs: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]
    vocab: Vocab
    mapping: np.ndarray  # source id -> target id

    @property
    def srcs(self):
        return [p[0] for p in self.pairs]

    @property
    def tgts(self):
        return [p[1] for p in self.pairs]

    def __len__(self) -> int:
        return len(self.pairs)

    def subset(self, idx) -> "TaskData":
        pairs = tuple(self.pairs[i] for i in idx)
        return replace(self, pairs=pairs, vocab=target_vocab(self.task.vocab_size, pairs))

    def split(self, held_out: float = 0.2) -> tuple["TaskData", "TaskData"]:
        """Deterministic split: the last ``held_out`` share of pairs is held out.

        Each part carries frequencies counted on its own pairs.
        """
        n_test = int(round(held_out * len(self.pairs)))
        if not 0 < n_test < len(self.pairs):
            raise InvalidArgumentError(f"held-out share {held_out} leaves an empty split")
        cut = len(self.pairs) - n_test
        return self.subset(range(cut)), self.subset(range(cut, len(self.pairs)))


def token_names(vocab_size: int) -> tuple[str, ...]:
    return (EOS_TOKEN,) + tuple(f"w{i}" for i in range(1, vocab_size))


def target_vocab(vocab_size: int, pairs) -> Vocab:
    """Target-side counts; every target sequence contributes one EOS."""
    counts = np.zeros(vocab_size, dtype=np.int64)
    for _, tgt in pairs:
        for t in tgt:
            counts[t] += 1
        counts[EOS] += 1
    return Vocab(token_names(vocab_size), counts)


def zipf_probs(n: int, s: float) -> np.ndarray:
    p = np.arange(1, n + 1, dtype=np.float64) ** -s
    return p / p.sum()


def _check_zipf_sample(draws: np.ndarray, probs: np.ndarray) -> None:
    """Chi-square sanity check of sampled ranks against the Zipf law.

    Bins with expected count < 5 are pooled into one tail bin. Fails only on a
    gross mismatch (normal approximation z > 6), i.e. a sampler bug.
    """
    counts = np.bincount(draws, minlength=probs.size)
    expected = probs * draws.size
    big = expected >= 5
    obs = np.append(counts[big], counts[~big].sum())
    exp = np.append(expected[big], expected[~big].sum())
    keep = exp > 0
    chi2 = float((((obs - exp) ** 2)[keep] / exp[keep]).sum())
    dof = max(int(keep.sum()) - 1, 1)
    z = (chi2 - dof) / math.sqrt(2 * dof)
    if z > 6:
        raise RuntimeError(f"Zipf sample fails chi-square check (chi2={chi2:.1f}, dof={dof})")


def gen_task(task: ToyTask) -> TaskData:
    rng = np.random.default_rng(task.seed)
    n_content = task.vocab_size - 1
    lengths = rng.integers(task.min_len, task.max_len + 1, size=task.n_pairs)
    if task.kind == "lexicon":
        probs = zipf_probs(n_content, task.zipf)
        draws = rng.choice(n_content, size=int(lengths.sum()), p=probs)
        _check_zipf_sample(draws, probs)
        flat = draws + 1  # source id = Zipf rank
        mapping = np.zeros(task.vocab_size, dtype=np.int64)
        mapping[1:] = rng.permutation(n_content) + 1
    else:
        flat = rng.integers(1, task.vocab_size, size=int(lengths.sum()))
        mapping = np.arange(task.vocab_size)

    pairs = []
    pos = 0
    for n in lengths:
        src = tuple(int(x) for x in flat[pos : pos + n])
        pos += n
        if task.kind == "reverse":
            tgt = src[::-1]
        else:
            tgt = tuple(int(mapping[s]) for s in src)
        pairs.append((src, tgt))
    pairs = tuple(pairs)
    return TaskData(task, pairs, target_vocab(task.vocab_size, pairs), mapping)
