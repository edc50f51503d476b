"""Exact neighborhood statistics of an embedding table, keyed by frequency rank."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .embedspace import EmbeddingTable, Vocab
from .errors import InvalidArgumentError

BLOCK_ROWS = 1024


@dataclass(frozen=True)
class NeighborProfile:
    """k nearest neighbors of every token, most similar first, self excluded."""

    indices: np.ndarray  # (|V|, k) int64
    sims: np.ndarray  # (|V|, k) float64

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclass(frozen=True)
class BinnedSeries:
    """Per-bin summary of ``y`` over contiguous rank bins ``[start, stop)``."""

    start: np.ndarray
    stop: np.ndarray
    count: np.ndarray
    mean: np.ndarray
    p25: np.ndarray
    median: np.ndarray
    p75: np.ndarray

    def __len__(self) -> int:
        return self.start.shape[0]


def topk_desc(scores: np.ndarray, k: int, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise top-k of a score matrix, ties broken by lower column index.

    Columns are reported shifted by ``offset``.
    """
    n, m = scores.shape
    if k > m:
        raise InvalidArgumentError(f"k={k} exceeds the {m} available columns")
    part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(scores, part, axis=1)
    thr = vals.min(axis=1)
    at_or_above = (scores >= thr[:, None]).sum(axis=1)
    out_idx = np.empty((n, k), dtype=np.int64)
    out_val = np.empty((n, k), dtype=np.float64)
    for r in range(n):
        if at_or_above[r] == k:
            cand = part[r]
        else:
            # boundary ties: argpartition may have dropped a lower index
            cand = np.flatnonzero(scores[r] >= thr[r])
        order = np.lexsort((cand, -scores[r, cand]))[:k]
        out_idx[r] = cand[order]
        out_val[r] = scores[r, cand[order]]
    return out_idx + offset, out_val


def _blocks(n: int, size: int = BLOCK_ROWS):
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def _map_blocks(fn, n: int, workers: int | None):
    blocks = _blocks(n)
    workers = workers or os.cpu_count() or 1
    if workers == 1 or len(blocks) == 1:
        return [fn(a, b) for a, b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), blocks))


def knn_profile(table: EmbeddingTable, k: int = 5, workers: int | None = None) -> NeighborProfile:
    """Exact k-NN by cosine for every token.

    Rows are processed in fixed blocks, so the result does not depend on the
    number of worker threads.
    """
    n = table.size
    if n < 2:
        raise InvalidArgumentError("a single-token table has no neighbors")
    if not 1 <= k < n:
        raise InvalidArgumentError(f"k must satisfy 1 <= k < |V| = {n}, got {k}")
    unit = table.unit

    def block(a, b):
        sims = unit[a:b] @ unit.T
        sims[np.arange(b - a), np.arange(a, b)] = -np.inf
        return topk_desc(sims, k)

    parts = _map_blocks(block, n, workers)
    idx = np.concatenate([p[0] for p in parts])
    sims = np.clip(np.concatenate([p[1] for p in parts]), -1.0, 1.0)
    return NeighborProfile(idx, sims)


@dataclass(frozen=True)
class NeighborRanks:
    nn_rank: np.ndarray
    kth_rank: np.ndarray


def neighbor_rank_profile(profile: NeighborProfile, vocab: Vocab) -> NeighborRanks:
    """Frequency ranks of each token's nearest and k-th nearest neighbor."""
    if len(vocab) < 2:
        raise InvalidArgumentError("need at least two tokens to have a neighbor")
    if len(profile) != len(vocab):
        raise InvalidArgumentError(
            f"profile covers {len(profile)} tokens but vocab has {len(vocab)}"
        )
    rank = vocab.rank
    return NeighborRanks(rank[profile.indices[:, 0]], rank[profile.indices[:, -1]])


def binned_stats(x, y, bin_size: int = 500) -> BinnedSeries:
    """Median and interquartile band of ``y`` over bins of ``bin_size`` consecutive ranks ``x``.

    Bins cover ``0 .. max(x)``; empty bins report NaN statistics.
    """
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0:
        raise InvalidArgumentError("binned_stats needs at least one point")
    if x.shape != y.shape:
        raise InvalidArgumentError(f"x and y differ in shape: {x.shape} vs {y.shape}")
    if bin_size < 1:
        raise InvalidArgumentError(f"bin_size must be >= 1, got {bin_size}")
    if (x < 0).any():
        raise InvalidArgumentError("ranks must be nonnegative")
    n_bins = int(x.max()) // bin_size + 1
    which = x // bin_size
    cols = {name: np.full(n_bins, np.nan) for name in ("mean", "p25", "median", "p75")}
    count = np.bincount(which, minlength=n_bins)
    for b in range(n_bins):
        vals = y[which == b]
        if vals.size:
            cols["mean"][b] = vals.mean()
            cols["p25"][b], cols["median"][b], cols["p75"][b] = np.percentile(vals, [25, 50, 75])
    start = np.arange(n_bins) * bin_size
    stop = np.minimum(start + bin_size, int(x.max()) + 1)
    return BinnedSeries(start, stop, count, **cols)


def near_duplicates(table: EmbeddingTable, eps: float = 1e-4) -> list[tuple[int, int]]:
    """All pairs ``i < j`` with ``cos(e_i, e_j) >= 1 - eps``, in lexicographic order."""
    unit = table.unit
    thr = 1.0 - eps
    pairs: list[tuple[int, int]] = []
    for a, b in _blocks(table.size):
        sims = unit[a:b] @ unit.T
        rows, cols = np.nonzero(sims >= thr)
        rows = rows + a
        keep = cols > rows
        pairs.extend(zip(rows[keep].tolist(), cols[keep].tolist()))
    return pairs


def mean_pairwise_cosine(rows: np.ndarray) -> float:
    """Mean cosine over all unordered pairs of distinct rows."""
    unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    n = unit.shape[0]
    s = unit.sum(axis=0)
    return float((s @ s - n) / (n * (n - 1)))


# ------------------------------------------------------------------ reporting

TOKEN_COLUMNS = ("rank", "nn_sim", "nn5_sim", "nn_rank", "nn5_rank")
SERIES = ("nn_sim", "nn5_sim", "nn_rank", "nn5_rank")


def profile_table(table: EmbeddingTable, vocab: Vocab, k: int = 5, bin_size: int = 500, workers=None):
    """Per-token rows (sorted by frequency rank) and per-series binned summaries."""
    if len(vocab) != table.size:
        raise InvalidArgumentError(f"vocab has {len(vocab)} tokens, table has {table.size}")
    prof = knn_profile(table, k, workers=workers)
    ranks = neighbor_rank_profile(prof, vocab)
    order = vocab.order
    per_token = {
        "rank": np.arange(table.size),
        "nn_sim": prof.sims[order, 0],
        "nn5_sim": prof.sims[order, -1],
        "nn_rank": ranks.nn_rank[order],
        "nn5_rank": ranks.kth_rank[order],
    }
    binned = {name: binned_stats(per_token["rank"], per_token[name], bin_size) for name in SERIES}
    return per_token, binned


def write_profile(prefix, per_token: dict, binned: dict) -> tuple[str, str]:
    tokens_path = f"{prefix}.tokens.tsv"
    binned_path = f"{prefix}.binned.tsv"
    with open(tokens_path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(TOKEN_COLUMNS) + "\n")
        for i in range(len(per_token["rank"])):
            fh.write(
                f"{per_token['rank'][i]}\t{per_token['nn_sim'][i]:.6f}\t{per_token['nn5_sim'][i]:.6f}"
                f"\t{per_token['nn_rank'][i]}\t{per_token['nn5_rank'][i]}\n"
            )
    with open(binned_path, "w", encoding="utf-8") as fh:
        header = ["bin_start", "bin_stop", "count"]
        for name in SERIES:
            header += [f"{name}_mean", f"{name}_p25", f"{name}_median", f"{name}_p75"]
        fh.write("\t".join(header) + "\n")
        first = binned[SERIES[0]]
        for b in range(len(first)):
            cells = [str(first.start[b]), str(first.stop[b]), str(first.count[b])]
            for name in SERIES:
                s = binned[name]
                cells += [f"{v:.6f}" for v in (s.mean[b], s.p25[b], s.median[b], s.p75[b])]
            fh.write("\t".join(cells) + "\n")
    return tokens_path, binned_path
