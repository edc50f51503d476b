"""Mapping predicted hidden states back to tokens.

Exact flat search scans the table in shards; each shard computes its cosines
with a row-wise reduction whose result for a row does not depend on which
other rows share the shard, so answers are byte-identical for any shard count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from .embedspace import BitPackedTable, EmbeddingTable
from .errors import InvalidArgumentError, UnsupportedIndexError
from .scoring import DEFAULT_KAPPA, _norm_checked, _sign_value, log_c_d

LENGTH_NORMS = ("none", "per-token")


@dataclass(frozen=True, eq=False)
class NNIndex:
    table: EmbeddingTable
    planes: BitPackedTable | None = None
    shards: int = 1
    workers: int = 1

    @property
    def size(self) -> int:
        return self.table.size

    def shard_bounds(self) -> list[tuple[int, int]]:
        edges = np.linspace(0, self.size, self.shards + 1).astype(int)
        return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def build_index(table: EmbeddingTable, shards: int = 1, workers: int = 1) -> NNIndex:
    """Flat exact index; hypercube tables also get packed sign planes."""
    if shards < 1:
        raise InvalidArgumentError(f"shards must be >= 1, got {shards}")
    planes = BitPackedTable.from_table(table) if table.kind == "hypercube" else None
    return NNIndex(table, planes, shards=shards, workers=workers)


def _row_dots(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.einsum("ij,j->i", rows, q)


def _select(idx: np.ndarray, cos: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((idx, -cos))[:k]
    return idx[order], cos[order]


def _unit_query(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    return h / _norm_checked(h)


def _check_k(index: NNIndex, k: int) -> None:
    if not 1 <= k <= index.size:
        raise InvalidArgumentError(f"k must satisfy 1 <= k <= |V| = {index.size}, got {k}")


def nearest(index: NNIndex, h, k: int = 1) -> list[tuple[int, float]]:
    """Exact top-k tokens by cosine to ``h``; ties go to the lower token index."""
    _check_k(index, k)
    q = _unit_query(h)
    unit = index.table.unit

    def scan(bounds):
        a, b = bounds
        cos = _row_dots(unit[a:b], q)
        kk = min(k, b - a)
        part = np.argpartition(-cos, kk - 1)[:kk] if kk < b - a else np.arange(b - a)
        # keep everything tied with the shard's k-th value
        thr = cos[part].min()
        cand = np.flatnonzero(cos >= thr)
        return cand + a, cos[cand]

    bounds = index.shard_bounds()
    if index.workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=index.workers) as pool:
            parts = list(pool.map(scan, bounds))
    else:
        parts = [scan(b) for b in bounds]
    idx = np.concatenate([p[0] for p in parts])
    cos = np.concatenate([p[1] for p in parts])
    idx, cos = _select(idx, cos, k)
    return [(int(i), float(c)) for i, c in zip(idx, cos)]


def nearest_batch(index: NNIndex, hs, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Top-k for many queries at once with a single matrix product.

    Same contract as :func:`nearest`, but cosines come from BLAS and may differ
    from it in the last bit, which matters only for exact ties.
    """
    from .geometry import topk_desc

    _check_k(index, k)
    hs = np.asarray(hs, dtype=np.float64)
    norms = np.linalg.norm(hs, axis=1)
    if (norms <= 1e-12).any():
        _norm_checked(hs[int(np.argmin(norms))])
    sims = (hs / norms[:, None]) @ index.table.unit.T
    return topk_desc(sims, k)


def query_bits(h) -> np.ndarray:
    """Sign pattern of ``h`` packed like the table planes (zero counts as positive)."""
    h = np.asarray(h, dtype=np.float64)
    return BitPackedTable.from_signs((h >= 0)[None, :]).planes[0]


def hamming_distances(index: NNIndex, h) -> np.ndarray:
    if index.planes is None:
        raise UnsupportedIndexError("Hamming prefilter needs a hypercube table index")
    x = np.bitwise_xor(index.planes.planes, query_bits(h)[None, :])
    return np.bitwise_count(x).sum(axis=1, dtype=np.int64)


def nearest_prefiltered(index: NNIndex, h, k: int = 1, m: int = 64) -> list[tuple[int, float]]:
    """Hamming-prefiltered search: popcount ranking, then exact cosine rerank of the top ``m``."""
    if index.planes is None:
        raise UnsupportedIndexError("Hamming prefilter needs a hypercube table index")
    _check_k(index, k)
    if not k <= m <= index.size:
        raise InvalidArgumentError(f"need k <= m <= |V|, got k={k}, m={m}, |V|={index.size}")
    q = _unit_query(h)
    ham = hamming_distances(index, h)
    cand = np.argsort(ham, kind="stable")[:m]
    cos = _row_dots(index.table.unit[cand], q)
    idx, cos = _select(cand.astype(np.int64), cos, k)
    return [(int(i), float(c)) for i, c in zip(idx, cos)]


# -------------------------------------------------------------------- decoding


class StepModel(Protocol):
    """Incremental decoder: ``start`` encodes the source, ``step`` consumes the
    previously emitted token (``None`` at the first step) and returns the next
    hidden state with the updated decoder state."""

    def start(self, src: Sequence[int]) -> Any: ...

    def step(self, state: Any, prev_token: int | None) -> tuple[np.ndarray, Any]: ...


class PrefixModel:
    """Adapts a stateless ``fn(src, prefix) -> h`` to the :class:`StepModel` interface."""

    def __init__(self, fn: Callable[[Sequence[int], tuple[int, ...]], np.ndarray]):
        self.fn = fn

    def start(self, src):
        return (tuple(src), ())

    def step(self, state, prev_token):
        src, prefix = state
        if prev_token is not None:
            prefix = prefix + (prev_token,)
        return np.asarray(self.fn(src, prefix), dtype=np.float64), (src, prefix)


def greedy_decode(model: StepModel, index: NNIndex, src, eos: int, max_extra: int = 200) -> list[int]:
    """Emit the nearest token at every step until ``eos`` or ``len(src) + max_extra`` tokens."""
    out: list[int] = []
    state = model.start(src)
    prev = None
    for _ in range(len(src) + max_extra):
        h, state = model.step(state, prev)
        tok = nearest(index, h, 1)[0][0]
        if tok == eos:
            break
        out.append(tok)
        prev = tok
    return out


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    step_scores: tuple[float, ...]
    score: float
    finished: bool
    state: Any = field(default=None, repr=False, compare=False)

    def extend(self, tok: int, step_score: float, state, eos: int) -> "Hypothesis":
        if self.finished:
            raise RuntimeError("finished hypotheses cannot be extended")
        done = tok == eos
        return Hypothesis(
            self.tokens if done else self.tokens + (tok,),
            self.step_scores + (step_score,),
            self.score + step_score,
            done,
            None if done else state,
        )

    def normalized(self, length_norm: str) -> float:
        if length_norm == "per-token" and self.step_scores:
            return self.score / len(self.step_scores)
        return self.score


@dataclass(frozen=True)
class BeamResult:
    best: Hypothesis
    nbest: list[Hypothesis]

    @property
    def tokens(self) -> list[int]:
        return list(self.best.tokens)


def beam_decode(
    model: StepModel,
    index: NNIndex,
    src,
    beam: int,
    eos: int,
    max_extra: int = 200,
    length_norm: str = "none",
    kappa: float = DEFAULT_KAPPA,
    score_sign="plus",
    nbest: int = 1,
) -> BeamResult:
    """Beam search over summed vMF log-likelihoods.

    Each live hypothesis proposes its ``beam`` best-scoring tokens; the pooled
    candidates are ranked by cumulative score and the first ``beam`` non-EOS
    candidates stay live, while every proposed EOS candidate finishes.
    At the length cap every live hypothesis is closed with ``eos``, so all
    returned hypotheses are finished and their scores include the EOS step.

    Search stops early when no live hypothesis can still overtake the best
    finished one (``length_norm="none"`` and non-positive step scores), or once
    ``beam`` hypotheses have finished (``length_norm="per-token"``).
    """
    if beam < 1:
        raise InvalidArgumentError(f"beam width must be >= 1, got {beam}")
    if length_norm not in LENGTH_NORMS:
        raise InvalidArgumentError(f"length_norm must be one of {LENGTH_NORMS}, got {length_norm!r}")
    sign = _sign_value(score_sign)
    logc = log_c_d(index.table.d, kappa)
    max_step_score = kappa + logc
    width = min(beam, index.size)
    max_len = len(src) + max_extra

    live = [Hypothesis((), (), 0.0, False, model.start(src))]
    finished: list[Hypothesis] = []
    unit = index.table.unit
    for t in range(max_len + 1):
        pool = []
        for hi, hyp in enumerate(live):
            h, state = model.step(hyp.state, hyp.tokens[-1] if hyp.tokens else None)
            if t == max_len:
                # length cap reached: the only continuation is end-of-sequence
                top = [(eos, float(_row_dots(unit[eos : eos + 1], _unit_query(h))[0]))]
            else:
                # with the minus sign the best-scoring tokens are the farthest ones
                top = nearest(index, h if sign > 0 else -np.asarray(h, dtype=np.float64), width)
            for ci, (tok, c) in enumerate(top):
                if t < max_len and sign < 0:
                    c = -c
                step_score = sign * kappa * c + logc
                pool.append((hyp.score + step_score, hi, ci, tok, step_score, state))
        pool.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live: list[Hypothesis] = []
        for total, hi, ci, tok, step_score, state in pool:
            if tok == eos:
                finished.append(live[hi].extend(tok, step_score, state, eos))
            elif len(next_live) < beam:
                next_live.append(live[hi].extend(tok, step_score, state, eos))
        live = next_live
        if not live:
            break
        if length_norm == "none":
            if finished and max_step_score <= 0 and max(f.score for f in finished) >= live[0].score:
                break
        elif len(finished) >= beam:
            break
    final = finished
    ranked = sorted(
        range(len(final)), key=lambda i: (-final[i].normalized(length_norm), i)
    )
    best = [final[i] for i in ranked[: max(1, nbest)]]
    return BeamResult(best[0], best)


def sequence_log_likelihood(
    model: StepModel,
    index: NNIndex,
    src,
    tokens: Sequence[int],
    eos: int,
    finished: bool = True,
    kappa: float = DEFAULT_KAPPA,
    score_sign="plus",
) -> float:
    """Model log-likelihood of emitting ``tokens`` (plus ``eos`` when ``finished``)."""
    sign = _sign_value(score_sign)
    logc = log_c_d(index.table.d, kappa)
    unit = index.table.unit
    state = model.start(src)
    prev = None
    total = 0.0
    for tok in list(tokens) + ([eos] if finished else []):
        h, state = model.step(state, prev)
        q = _unit_query(h)
        total += sign * kappa * float(_row_dots(unit[tok : tok + 1], q)[0]) + logc
        prev = tok
    return total


def write_nbest(path_or_fh, results: Sequence[BeamResult], token_names=None) -> None:
    """TSV with columns ``sent, rank, score, tokens``."""
    own = isinstance(path_or_fh, (str, bytes)) or hasattr(path_or_fh, "__fspath__")
    fh = open(path_or_fh, "w", encoding="utf-8") if own else path_or_fh
    try:
        fh.write("sent\trank\tscore\ttokens\n")
        for s, res in enumerate(results):
            for r, hyp in enumerate(res.nbest, 1):
                toks = [token_names[t] for t in hyp.tokens] if token_names else [str(t) for t in hyp.tokens]
                fh.write(f"{s}\t{r}\t{hyp.score:.10g}\t{' '.join(toks)}\n")
    finally:
        if own:
            fh.close()
