from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bitext_miner.index import (
    ExactIndex,
    VectorIndexError,
    build_approx,
    build_exact,
    load_index,
    recall_vs_exact,
    unit_rows,
)


def random_unit(n, d, seed):
    return unit_rows(np.random.default_rng(seed).normal(size=(n, d)).astype(np.float32))


def ids_for(n):
    return [f"id{i:05d}" for i in range(n)]


def brute_topk(X, ids, q, k):
    scores = X @ q
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))[:k]
    return [ids[i] for i in order]


# -- exact ------------------------------------------------------------------------


def test_empty_and_singleton():
    empty = build_exact(np.zeros((0, 3), np.float32), [])
    assert len(empty.query_topk(np.ones(3), 5)) == 0
    one = build_exact(np.array([[0.0, 1.0, 0.0]]), ["only"])
    assert one.query_topk(np.array([1.0, 0, 0]), 3).ids == ["only"]


def test_exact_contract_errors():
    with pytest.raises(VectorIndexError):
        build_exact(np.eye(2), ["a", "a"])
    with pytest.raises(VectorIndexError):
        build_exact(np.eye(2), ["a"])
    idx = build_exact(np.eye(2), ["a", "b"])
    with pytest.raises(ValueError):
        idx.query_topk(np.ones(2), 0)
    with pytest.raises(ValueError):
        idx.query_topk(np.ones(3), 1)


def test_exact_examples():
    idx = build_exact(np.eye(2), ["e1", "e2"])
    res = idx.query_topk(np.array([0.6, 0.8]), 2)
    assert res.ids == ["e2", "e1"]
    assert [s for _, s in res.neighbors] == pytest.approx([0.8, 0.6])
    X = random_unit(10, 4, 0)
    idx = build_exact(X, ids_for(10))
    top = idx.query_topk(X[3], 1).neighbors[0]
    assert top[0] == "id00003" and top[1] == pytest.approx(1.0, abs=1e-6)


def test_ties_go_to_lower_id():
    X = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    idx = build_exact(X, ["b", "a", "c"])
    assert idx.query_topk(np.array([1.0, 0.0]), 2).ids == ["a", "b"]
    assert idx.query_topk(np.array([1.0, 0.0]), 1).ids == ["a"]


@settings(max_examples=30)
@given(st.integers(1, 40), st.integers(1, 12), st.integers(0, 1000))
def test_exact_matches_brute_force(n, k, seed):
    # coarse values force plenty of ties
    X = np.round(random_unit(n, 3, seed) * 2) / 2
    ids = ids_for(n)[::-1]
    idx = build_exact(X, ids)
    q = np.round(random_unit(1, 3, seed + 1)[0] * 2) / 2
    res = idx.query_topk(q, k)
    assert res.ids == brute_topk(X.astype(np.float32), ids, q.astype(np.float32), k)
    scores = [s for _, s in res.neighbors]
    assert scores == sorted(scores, reverse=True)
    assert len(set(res.ids)) == len(res.ids) == min(k, n)


# -- approximate --------------------------------------------------------------------


def test_single_list_equals_exact():
    X = random_unit(200, 8, 1)
    Q = random_unit(30, 8, 2)
    approx = build_approx(X, ids_for(200), 1, seed=0)
    exact = build_exact(X, ids_for(200))
    assert approx.lists() == [exact.ids]
    assert [r.ids for r in approx.query_batch(Q, 5)] == [r.ids for r in exact.query_batch(Q, 5)]


def test_singleton_lists():
    X = random_unit(12, 4, 3)
    approx = build_approx(X, ids_for(12), 12, seed=0)
    lists = approx.lists()
    assert all(len(lst) == 1 for lst in lists)
    assert sorted(i for lst in lists for i in lst) == ids_for(12)


def test_partition_deterministic_and_complete():
    X = random_unit(500, 8, 4)
    a = build_approx(X, ids_for(500), 16, seed=7).lists()
    b = build_approx(X, ids_for(500), 16, seed=7).lists()
    assert a == b
    flat = [i for lst in a for i in lst]
    assert sorted(flat) == ids_for(500)


def test_approx_errors():
    X = random_unit(5, 3, 0)
    with pytest.raises(VectorIndexError):
        build_approx(X, ids_for(5), 6)
    with pytest.raises(VectorIndexError):
        build_approx(X, ids_for(5), 0)
    with pytest.raises(VectorIndexError):
        build_approx(X, ids_for(5), 2, probe_count=3)


def test_full_probe_is_exact():
    X = random_unit(1000, 16, 5)
    Q = random_unit(50, 16, 6)
    approx = build_approx(X, ids_for(1000), 32, seed=0)
    exact = build_exact(X, ids_for(1000))
    assert recall_vs_exact(approx, exact, Q, 10, probe=32) == 1.0
    assert [r.ids for r in approx.query_batch(Q, 10, probe=32)] == [r.ids for r in exact.query_batch(Q, 10)]


def test_recall_monotone_in_probe():
    X = random_unit(1000, 16, 8)
    Q = random_unit(100, 16, 9)
    approx = build_approx(X, ids_for(1000), 32, seed=0)
    exact = build_exact(X, ids_for(1000))
    recalls = [recall_vs_exact(approx, exact, Q, 10, probe=p) for p in (1, 2, 4, 8, 16, 32)]
    assert all(b >= a for a, b in zip(recalls, recalls[1:]))
    assert recalls[-1] == 1.0


def test_recall_probe_tuned_on_thousand_vectors():
    X = random_unit(1000, 32, 10)
    Q = random_unit(200, 32, 11)
    approx = build_approx(X, ids_for(1000), 32, seed=0)
    exact = build_exact(X, ids_for(1000))
    r8 = recall_vs_exact(approx, exact, Q, 10, probe=8)
    assert 0 < r8 <= 1
    tuned = next(p for p in range(1, 33) if recall_vs_exact(approx, exact, Q, 10, probe=p) >= 0.95)
    assert tuned <= 32


def test_score_integrity():
    X = random_unit(300, 8, 12)
    Q = random_unit(20, 8, 13)
    approx = build_approx(X, ids_for(300), 10, seed=0, probe_count=2)
    row = {i: X[n] for n, i in enumerate(ids_for(300))}
    for q, res in zip(Q, approx.query_batch(Q, 7)):
        for i, s in res.neighbors:
            assert s == pytest.approx(float(row[i] @ q), abs=1e-6)
        scores = [s for _, s in res.neighbors]
        assert scores == sorted(scores, reverse=True)


# -- persistence ----------------------------------------------------------------------


def test_save_load_roundtrip(tmp_path):
    X = random_unit(100, 8, 14)
    Q = random_unit(10, 8, 15)
    approx = build_approx(X, ids_for(100), 8, seed=1, probe_count=3)
    approx.save(tmp_path / "a.npz")
    back = load_index(tmp_path / "a.npz")
    assert back.lists() == approx.lists() and back.probe_count == 3
    assert [r.neighbors for r in back.query_batch(Q, 5)] == [r.neighbors for r in approx.query_batch(Q, 5)]
    exact = build_exact(X, ids_for(100))
    exact.save(tmp_path / "e.npz")
    assert isinstance(load_index(tmp_path / "e.npz"), ExactIndex)


def test_load_rejects_bad_files(tmp_path):
    (tmp_path / "junk.npz").write_bytes(b"not an index")
    with pytest.raises(VectorIndexError):
        load_index(tmp_path / "junk.npz")
    np.savez(tmp_path / "nohdr.npz", x=np.zeros(1))
    with pytest.raises(VectorIndexError):
        load_index(tmp_path / "nohdr.npz")
    X = random_unit(4, 2, 0)
    build_exact(X, ids_for(4)).save(tmp_path / "v.npz")
    with np.load(tmp_path / "v.npz") as z:
        parts = dict(z)
    parts["header"] = parts["header"].copy()
    parts["header"][0] = 99
    np.savez(tmp_path / "v2.npz", **parts)
    with pytest.raises(VectorIndexError, match="version"):
        load_index(tmp_path / "v2.npz")


def test_near_duplicates_survive_full_probe():
    # tight clusters put many scores within float32 rounding of the pruning bound
    rng = np.random.default_rng(0)
    base = rng.normal(size=(34, 32))
    X = unit_rows((base[rng.integers(0, 34, 343)] + 0.05 * rng.normal(size=(343, 32))).astype(np.float32))
    Q = X[rng.permutation(343)[:100]]
    exact = build_exact(X, ids_for(343))
    for lists in (4, 8):
        approx = build_approx(X, ids_for(343), lists, seed=0)
        rows, _ = approx.search(Q, 5, probe=lists)
        assert (rows >= 0).all()
        assert recall_vs_exact(approx, exact, Q, 5, probe=lists) == 1.0
