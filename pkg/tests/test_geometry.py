import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conmt.embedspace import EmbeddingTable, Vocab, gen_clumped, gen_uniform
from conmt.errors import InvalidArgumentError
from conmt.geometry import (
    binned_stats,
    knn_profile,
    mean_pairwise_cosine,
    near_duplicates,
    neighbor_rank_profile,
    profile_table,
    topk_desc,
    write_profile,
)


def brute_knn(unit, k):
    n = unit.shape[0]
    idx = np.empty((n, k), dtype=int)
    sims = np.empty((n, k))
    for i in range(n):
        cand = [(-float(unit[i] @ unit[j]), j) for j in range(n) if j != i]
        cand.sort()
        idx[i] = [j for _, j in cand[:k]]
        sims[i] = [-s for s, _ in cand[:k]]
    return idx, sims


def test_duplicate_rows_see_each_other():
    rows = np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0]], dtype=np.float32)
    p = knn_profile(EmbeddingTable(rows, "imported"), 1)
    assert p.indices[0, 0] == 2 and p.indices[2, 0] == 0
    assert p.sims[0, 0] == 1.0


def test_orthonormal_basis():
    p = knn_profile(EmbeddingTable(np.eye(6, dtype=np.float32), "imported"), 3)
    assert np.all(p.sims == 0.0)
    # all ties: lower index first, self excluded
    assert p.indices[0].tolist() == [1, 2, 3] and p.indices[2].tolist() == [0, 1, 3]


def test_hand_table_matches_brute_force():
    rows = np.array([[1, 0, 0], [0.8, 0.6, 0], [0, 1, 0], [0, 0.6, 0.8], [0.6, 0, -0.8]], dtype=np.float32)
    t = EmbeddingTable(rows, "imported")
    p = knn_profile(t, 4)
    idx, sims = brute_knn(t.unit, 4)
    assert np.array_equal(p.indices, idx)
    assert np.allclose(p.sims, sims, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 300), st.integers(2, 24), st.integers(0, 2**32))
def test_k1_equals_row_max(v, d, seed):
    t = gen_uniform(v, d, seed)
    p = knn_profile(t, 1)
    sims = t.unit @ t.unit.T
    np.fill_diagonal(sims, -np.inf)
    assert np.allclose(p.sims[:, 0], sims.max(axis=1), atol=1e-12)
    assert np.all(p.sims[:, 0] <= 1.0) and np.all(p.sims[:, 0] >= -1.0)


def test_large_table_row_max_and_blocks():
    t = gen_uniform(2000, 16, seed=1)
    p = knn_profile(t, 5, workers=1)
    q = knn_profile(t, 5, workers=3)
    assert np.array_equal(p.indices, q.indices) and p.sims.tobytes() == q.sims.tobytes()
    sims = t.unit @ t.unit.T
    np.fill_diagonal(sims, -np.inf)
    assert np.allclose(p.sims[:, 0], sims.max(axis=1), atol=1e-12)
    assert np.all(p.sims[:, 4] <= p.sims[:, 0])
    assert np.all(np.diff(p.sims, axis=1) <= 0)


def test_rotation_invariance():
    rng = np.random.default_rng(0)
    t = gen_uniform(300, 12, seed=2)
    q, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    r = EmbeddingTable((t.unit @ q).astype(np.float32), "imported")
    a, b = knn_profile(t, 5), knn_profile(r, 5)
    assert np.array_equal(a.indices, b.indices)
    assert np.abs(a.sims - b.sims).max() < 1e-5


def test_knn_errors():
    t = gen_uniform(4, 3, seed=0)
    with pytest.raises(InvalidArgumentError):
        knn_profile(t, 4)
    with pytest.raises(InvalidArgumentError):
        knn_profile(gen_uniform(1, 3, seed=0), 1)


def test_topk_ties_lower_index():
    s = np.array([[0.5, 0.9, 0.5, 0.5, 0.1]])
    idx, val = topk_desc(s, 3)
    assert idx.tolist() == [[1, 0, 2]]


def test_neighbor_ranks_clumped_rare_bin():
    t = gen_clumped(2000, 32, seed=3, clump_fraction=0.5, clump_cos=0.99)
    vocab = Vocab.uniform_ranked(2000)
    ranks = neighbor_rank_profile(knn_profile(t, 5), vocab)
    # rarest bin of 500 ranks: nearest neighbors sit in the rare half
    assert np.median(ranks.nn_rank[1500:]) >= 1000


def test_neighbor_ranks_uniform_are_uniform():
    # Monte Carlo over 10 seeds: NN ranks of a uniform table follow the uniform law
    ks = []
    for seed in range(10):
        t = gen_uniform(5000, 32, seed=seed)
        ranks = neighbor_rank_profile(knn_profile(t, 1), Vocab.uniform_ranked(5000))
        ks.append(stats.kstest(ranks.nn_rank / 5000, "uniform").statistic)
    assert np.mean(ks) < 0.05


def test_neighbor_rank_errors():
    t = gen_uniform(5, 3, seed=0)
    with pytest.raises(InvalidArgumentError):
        neighbor_rank_profile(knn_profile(t, 1), Vocab.uniform_ranked(6))
    with pytest.raises(InvalidArgumentError):
        neighbor_rank_profile(knn_profile(t, 1), Vocab.uniform_ranked(1))


def test_binned_constant_and_monotone():
    x = np.arange(1500)
    b = binned_stats(x, np.full(1500, 0.4), 500)
    assert len(b) == 3 and b.count.tolist() == [500, 500, 500]
    assert np.allclose(b.median, 0.4) and np.allclose(b.p75 - b.p25, 0)
    m = binned_stats(x, x.astype(float), 500).median
    assert np.all(np.diff(m) > 0)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=200), st.integers(1, 50))
def test_binned_partition(ys, size):
    x = np.arange(len(ys))
    b = binned_stats(x, np.array(ys), size)
    assert b.count.sum() == len(ys)
    assert np.all(b.p25 <= b.median + 1e-12) and np.all(b.median <= b.p75 + 1e-12)
    assert b.start[0] == 0 and b.stop[-1] == len(ys)


def test_binned_errors():
    with pytest.raises(InvalidArgumentError):
        binned_stats([], [])
    with pytest.raises(InvalidArgumentError):
        binned_stats([0, 1], [1.0], 2)
    with pytest.raises(InvalidArgumentError):
        binned_stats([0], [1.0], 0)


def test_near_duplicates():
    t = gen_uniform(10000, 128, seed=0)
    assert near_duplicates(t) == []
    rows = np.array(gen_uniform(20, 8, seed=1).rows)
    rows[13] = rows[4]
    assert near_duplicates(EmbeddingTable(rows, "imported")) == [(4, 13)]
    small = gen_uniform(7, 4, seed=2)
    assert len(near_duplicates(small, eps=2)) == 21


def test_mean_pairwise_cosine():
    rows = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    brute = np.mean([0.0, 1 / np.sqrt(2), 1 / np.sqrt(2)])
    assert mean_pairwise_cosine(rows) == pytest.approx(brute, abs=1e-15)


def test_profile_outputs(tmp_path):
    t = gen_uniform(1200, 16, seed=4)
    v = Vocab(tuple(str(i) for i in range(1200)), np.random.default_rng(0).integers(0, 50, 1200))
    per_token, binned = profile_table(t, v, 5, 500)
    a, b = write_profile(tmp_path / "p", per_token, binned)
    lines = open(a).read().splitlines()
    assert lines[0] == "rank\tnn_sim\tnn5_sim\tnn_rank\tnn5_rank" and len(lines) == 1201
    head = open(b).read().splitlines()
    assert head[0].startswith("bin_start\tbin_stop\tcount\tnn_sim_mean\tnn_sim_p25\tnn_sim_median\tnn_sim_p75")
    assert len(head) == 4
