"""Corpus BLEU and position-wise token F1 aggregated by frequency bucket or class.

Sequences are lists of tokens (ids or strings); no re-tokenization happens here.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from .embedspace import Vocab
from .errors import InvalidArgumentError

OOV = "oov"


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu_stats(hyps, refs, max_n: int = 4):
    if len(hyps) != len(refs):
        raise InvalidArgumentError(f"{len(hyps)} hypotheses but {len(refs)} references")
    correct = [0] * max_n
    total = [0] * max_n
    sys_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp, ref = list(hyp), list(ref)
        sys_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            correct[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    return correct, total, sys_len, ref_len


def corpus_bleu(hyps, refs, max_n: int = 4, smoothing: str = "exp") -> float:
    """Corpus-level BLEU on a 0-100 scale.

    ``smoothing="exp"`` replaces the k-th zero n-gram precision by
    ``1 / (2**k * max(total_n, 1))``, so orders the hypothesis is too short to
    contain are smoothed as well. ``"none"`` leaves zero precisions at zero.
    """
    if smoothing not in ("exp", "none"):
        raise InvalidArgumentError(f"unknown smoothing {smoothing!r}")
    correct, total, sys_len, ref_len = bleu_stats(hyps, refs, max_n)
    if ref_len == 0:
        raise InvalidArgumentError("all references are empty")
    if sys_len == 0:
        return 0.0
    log_p = 0.0
    halvings = 0
    for c, t in zip(correct, total):
        if c == 0:
            if smoothing == "none":
                return 0.0
            halvings += 1
            log_p += -halvings * math.log(2.0) - math.log(max(t, 1))
        else:
            log_p += math.log(c / t)
    bp = 1.0 if sys_len >= ref_len else math.exp(1.0 - ref_len / sys_len)
    return 100.0 * bp * math.exp(log_p / max_n)


# ------------------------------------------------------------------- token F1


@dataclass(frozen=True)
class BucketSpec:
    """Frequency boundaries ``b_1 < ... < b_m``; bucket i covers ``[b_i, b_{i+1})``
    with ``b_0 = 0`` and the last bucket open-ended."""

    boundaries: tuple[int, ...]

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        if any(x <= 0 for x in b) or any(y <= x for x, y in zip(b, b[1:])):
            raise InvalidArgumentError(f"bucket boundaries must be positive and strictly increasing: {b}")
        object.__setattr__(self, "boundaries", b)

    @property
    def labels(self) -> list[str]:
        edges = (0,) + self.boundaries
        out = [f"[{a},{b})" for a, b in zip(edges, self.boundaries)]
        out.append(f"[{edges[-1]},inf)")
        return out

    def bucket(self, freq: int) -> str:
        return self.labels[int(np.searchsorted(self.boundaries, freq, side="right"))]

    @classmethod
    def parse(cls, text: str) -> "BucketSpec":
        try:
            return cls(tuple(int(x) for x in text.split(",") if x.strip()))
        except ValueError:
            raise InvalidArgumentError(f"bad bucket list {text!r}") from None

    @classmethod
    def from_mass(cls, vocab: Vocab, n_buckets: int = 3, exclude=()) -> "BucketSpec":
        """Boundaries splitting the corpus occurrence mass into roughly equal parts.

        Tokens are taken in ascending frequency; a boundary is placed at the
        frequency of the token where the cumulative mass first reaches
        ``i / n_buckets``. Coinciding boundaries are bumped to stay increasing.
        Token ids in ``exclude`` (e.g. end-of-sequence) do not count toward the mass.
        """
        freq = vocab.freq.copy()
        freq[list(exclude)] = 0
        freq = np.sort(freq[freq > 0])
        if freq.size == 0:
            raise InvalidArgumentError("vocab has no observed tokens")
        cum = np.cumsum(freq) / freq.sum()
        bounds: list[int] = []
        for i in range(1, n_buckets):
            f = int(freq[int(np.searchsorted(cum, i / n_buckets))])
            f = max(f, 1, bounds[-1] + 1 if bounds else 1)
            bounds.append(f)
        return cls(tuple(bounds))


@dataclass(frozen=True)
class BucketScore:
    tp: int
    fp: int
    fn: int
    gold: int
    predicted: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def as_dict(self) -> dict:
        return {**asdict(self), "precision": self.precision, "recall": self.recall, "f1": self.f1}


class F1Report(dict):
    """Mapping from bucket (or class) label to :class:`BucketScore`."""

    def micro(self) -> BucketScore:
        tot = [0] * 5
        for s in self.values():
            for i, v in enumerate((s.tp, s.fp, s.fn, s.gold, s.predicted)):
                tot[i] += v
        return BucketScore(*tot)

    def to_tsv(self) -> str:
        lines = ["bucket\ttp\tfp\tfn\tgold\tpredicted\tprecision\trecall\tf1"]
        for label, s in self.items():
            lines.append(
                f"{label}\t{s.tp}\t{s.fp}\t{s.fn}\t{s.gold}\t{s.predicted}"
                f"\t{s.precision:.6f}\t{s.recall:.6f}\t{s.f1:.6f}"
            )
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({k: v.as_dict() for k, v in self.items()}, sort_keys=False)


def position_f1(hyps, refs, label_of: Callable[[Hashable], str], labels: Sequence[str] = ()) -> F1Report:
    """Position-wise matching: hyp token i is correct iff ref token i is identical.

    Unmatched hyp tokens count as false positives under the hyp token's label,
    unmatched ref tokens as false negatives under the ref token's label.
    """
    if len(hyps) != len(refs):
        raise InvalidArgumentError(f"{len(hyps)} hypotheses but {len(refs)} references")
    counts: dict[str, list[int]] = {lab: [0, 0, 0, 0, 0] for lab in labels}

    def slot(tok):
        return counts.setdefault(label_of(tok), [0, 0, 0, 0, 0])

    for hyp, ref in zip(hyps, refs):
        hyp, ref = list(hyp), list(ref)
        for i in range(max(len(hyp), len(ref))):
            h = hyp[i] if i < len(hyp) else None
            r = ref[i] if i < len(ref) else None
            if r is not None:
                slot(r)[3] += 1
            if h is not None:
                slot(h)[4] += 1
            if h is not None and r is not None and h == r:
                slot(r)[0] += 1
                continue
            if h is not None:
                slot(h)[1] += 1
            if r is not None:
                slot(r)[2] += 1
    return F1Report((lab, BucketScore(*c)) for lab, c in counts.items())


def _freq_lookup(vocab: Vocab):
    index = vocab.index

    def freq_of(tok):
        if isinstance(tok, (int, np.integer)) and not isinstance(tok, bool):
            return int(vocab.freq[tok]) if 0 <= tok < len(vocab) else None
        i = index.get(tok)
        return None if i is None else int(vocab.freq[i])

    return freq_of


def token_f1_by_bucket(hyps, refs, vocab: Vocab, spec: BucketSpec) -> F1Report:
    """Token F1 grouped by the training frequency of each token.

    Tokens missing from ``vocab`` go to the ``"oov"`` bucket.
    """
    freq_of = _freq_lookup(vocab)

    def label(tok):
        f = freq_of(tok)
        return OOV if f is None else spec.bucket(f)

    return position_f1(hyps, refs, label, spec.labels)


def class_f1(hyps, refs, class_of: Callable[[Hashable], str] | Mapping) -> F1Report:
    """Token F1 grouped by an arbitrary token class (e.g. word start vs continuation)."""
    fn = class_of.__getitem__ if isinstance(class_of, Mapping) else class_of
    labels = sorted(set(class_of.values())) if isinstance(class_of, Mapping) else ()
    return position_f1(hyps, refs, fn, labels)


def token_accuracy(hyps, refs) -> float:
    """Share of reference positions whose token the hypothesis reproduces."""
    gold = sum(len(r) for r in refs)
    hit = sum(sum(1 for h, r in zip(hyp, ref) if h == r) for hyp, ref in zip(hyps, refs))
    return hit / gold if gold else 0.0
