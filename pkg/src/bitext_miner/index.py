"""Nearest-neighbour search over embedding matrices.

``ExactIndex`` is the brute-force oracle. ``ApproxIndex`` partitions rows with
seeded spherical k-means and only scans the ``probe_count`` partitions whose
centroids score highest for a query (an inverted-file scheme).

Scores are dot products, i.e. cosine similarity for unit-norm rows. Results
are ordered by score descending with ties going to the lexicographically
smaller id; rows are stored sorted by id so that rule is a row-order rule.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse

INDEX_VERSION = 1
_QUERY_CHUNK = 256
_BOUND_SLACK = 1e-5


class VectorIndexError(ValueError):
    """Raised for invalid index construction or persistence problems."""


@dataclass(frozen=True)
class QueryResult:
    neighbors: list[tuple[str, float]]

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.neighbors]

    def __len__(self) -> int:
        return len(self.neighbors)


def _topk_columns(S: np.ndarray, k: int, tiebreak: np.ndarray | None = None) -> np.ndarray:
    """Column indices of the k largest entries per row.

    Ordered by score descending, then by ``tiebreak`` ascending (the column
    index when omitted). Exact under ties: k + 1 entries are selected, and a
    row whose (k+1)-th score equals its k-th is re-ranked in full.
    """
    m, n = S.shape
    tb = np.broadcast_to(np.arange(n), (m, n)) if tiebreak is None else tiebreak
    if k >= n:
        return np.lexsort((tb, -S), axis=1)
    if k + 1 < n:
        part = np.argpartition(S, n - k - 1, axis=1)[:, n - k - 1:]
    else:
        part = np.broadcast_to(np.arange(n), (m, n)).copy()
    vals = np.take_along_axis(S, part, 1)
    order = np.lexsort((np.take_along_axis(tb, part, 1), -vals), axis=1)
    part = np.take_along_axis(part, order, 1)
    vals = np.take_along_axis(vals, order, 1)
    out = part[:, :k].copy()
    for r in np.flatnonzero(vals[:, k] == vals[:, k - 1]):
        cand = np.flatnonzero(S[r] >= vals[r, k - 1])
        out[r] = cand[np.lexsort((tb[r, cand], -S[r, cand]))[:k]]
    return out


class ExactIndex:
    def __init__(self, vectors: np.ndarray, ids: Sequence[str]):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise VectorIndexError("embedding rows and ids must have equal length")
        ids = [str(i) for i in ids]
        if len(set(ids)) != len(ids):
            raise VectorIndexError("duplicate ids in index")
        order = sorted(range(len(ids)), key=ids.__getitem__)
        self.ids = [ids[i] for i in order]
        self.vectors = np.ascontiguousarray(vectors[order], dtype=np.float32)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def _check(self, Q: np.ndarray, k: int) -> np.ndarray:
        if k < 1:
            raise ValueError("k must be >= 1")
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float32))
        if Q.shape[1] != self.dim:
            raise ValueError(f"query dim {Q.shape[1]} != index dim {self.dim}")
        return Q

    def search(self, Q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Batched top-k: (row indices [nq, k'], scores [nq, k']), k' = min(k, size)."""
        Q = self._check(Q, k)
        k = min(k, len(self))
        rows = np.zeros((len(Q), k), dtype=np.int64)
        scores = np.zeros((len(Q), k), dtype=np.float32)
        if k == 0:
            return rows, scores
        for s in range(0, len(Q), _QUERY_CHUNK):
            S = Q[s:s + _QUERY_CHUNK] @ self.vectors.T
            cols = _topk_columns(S, k)
            rows[s:s + len(S)] = cols
            scores[s:s + len(S)] = np.take_along_axis(S, cols, 1)
        return rows, scores

    def query_topk(self, q: np.ndarray, k: int) -> QueryResult:
        return self.query_batch(np.atleast_2d(q), k)[0]

    def query_batch(self, Q: np.ndarray, k: int) -> list[QueryResult]:
        rows, scores = self.search(Q, k)
        return [QueryResult([(self.ids[r], float(s)) for r, s in zip(rr, ss)])
                for rr, ss in zip(rows, scores)]

    def save(self, path: str | Path) -> None:
        _save(path, self.ids, self.vectors, np.zeros((0, self.dim), np.float32),
              np.zeros(1, np.int64), 0)

    @classmethod
    def load(cls, path: str | Path) -> "ExactIndex":
        idx = load_index(path)
        if not isinstance(idx, ExactIndex):
            raise VectorIndexError(f"{path}: not an exact index")
        return idx


def build_exact(embeddings: np.ndarray, ids: Sequence[str]) -> ExactIndex:
    return ExactIndex(embeddings, ids)


def spherical_kmeans(X: np.ndarray, C: int, seed: int, n_iter: int = 10) -> np.ndarray:
    """Unit-norm centroids from seeded k-means on dot-product similarity.

    Initialized from C distinct rows; empty clusters keep their previous centroid.
    """
    n = len(X)
    rng = np.random.default_rng(seed)
    cen = X[np.sort(rng.choice(n, size=C, replace=False))].astype(np.float32)
    cen = unit_rows(cen)
    for _ in range(n_iter):
        assign = assign_to_centroids(X, cen)
        onehot = scipy.sparse.csr_matrix(
            (np.ones(n, dtype=np.float32), (assign, np.arange(n))), shape=(C, n))
        sums = np.asarray(onehot @ X, dtype=np.float32)
        norms = np.linalg.norm(sums, axis=1)
        ok = norms > 0
        cen[ok] = sums[ok] / norms[ok, None]
    return cen


def assign_to_centroids(X: np.ndarray, cen: np.ndarray) -> np.ndarray:
    out = np.empty(len(X), dtype=np.int64)
    for s in range(0, len(X), 8192):
        out[s:s + 8192] = np.argmax(X[s:s + 8192] @ cen.T, axis=1)
    return out


def unit_rows(X: np.ndarray) -> np.ndarray:
    """Rows scaled to unit L2 norm (zero rows left as is)."""
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(n > 0, n, 1.0)


class ApproxIndex:
    """Inverted-file index. Rows are regrouped so each list is a contiguous block."""

    def __init__(self, exact: ExactIndex, centroids: np.ndarray, assign: np.ndarray, probe_count: int):
        C = len(centroids)
        if not 1 <= probe_count <= C:
            raise VectorIndexError("probe_count must be in [1, C]")
        self.exact = exact
        self.centroids = np.ascontiguousarray(centroids, dtype=np.float32)
        self.probe_count = probe_count
        # stable sort keeps rows ascending within each list
        self.perm = np.argsort(assign, kind="stable")
        counts = np.bincount(assign, minlength=C)
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.blocked = np.ascontiguousarray(exact.vectors[self.perm])

    @property
    def ids(self) -> list[str]:
        return self.exact.ids

    @property
    def num_lists(self) -> int:
        return len(self.centroids)

    def __len__(self) -> int:
        return len(self.exact)

    @property
    def dim(self) -> int:
        return self.exact.dim

    def lists(self) -> list[list[str]]:
        """Ids per inverted list."""
        return [[self.ids[r] for r in self.perm[self.offsets[c]:self.offsets[c + 1]]]
                for c in range(self.num_lists)]

    def search(self, Q: np.ndarray, k: int, probe: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Batched approximate top-k, same output layout as ExactIndex.search.

        Each query's best list gives a lower bound on its k-th score; every
        probed list block is then scored with one matrix product against the
        queries that probe it, and only entries reaching the bound are kept.
        The result is the exact top-k of the probed lists. Slots a query
        cannot fill (fewer than k reachable rows) hold row -1.
        """
        Q = self.exact._check(Q, k)
        probe = self.probe_count if probe is None else probe
        if not 1 <= probe <= self.num_lists:
            raise ValueError("probe must be in [1, C]")
        nq, C = len(Q), self.num_lists
        k = min(k, len(self))
        probed = _topk_columns(Q @ self.centroids.T, probe)      # [nq, probe]

        bound = np.full(nq, -np.inf, dtype=np.float32)
        for c, qi in self._group(probed[:, 0]):
            S = Q[qi] @ self._block(c).T
            if S.shape[1] >= k:
                bound[qi] = np.partition(S, S.shape[1] - k, axis=1)[:, S.shape[1] - k]
        # the second pass recomputes these products in differently shaped
        # matmuls, whose float32 results may differ in the last bits
        bound -= _BOUND_SLACK

        hit_q, hit_r, hit_s = [], [], []
        for c, qi in self._group(probed.ravel(), nq_stride=probe):
            S = Q[qi] @ self._block(c).T
            r, col = np.nonzero(S >= bound[qi, None])
            hit_q.append(qi[r])
            hit_r.append(self.perm[self.offsets[c] + col])
            hit_s.append(S[r, col])
        hq = np.concatenate(hit_q) if hit_q else np.zeros(0, np.int64)
        hr = np.concatenate(hit_r) if hit_r else np.zeros(0, np.int64)
        hs = np.concatenate(hit_s) if hit_s else np.zeros(0, np.float32)
        order = np.lexsort((hr, -hs, hq))
        hq, hr, hs = hq[order], hr[order], hs[order]
        first = np.searchsorted(hq, np.arange(nq))
        rank = np.arange(len(hq)) - first[hq]
        keep = rank < k
        rows = np.full((nq, k), -1, dtype=np.int64)
        scores = np.full((nq, k), -np.inf, dtype=np.float32)
        rows[hq[keep], rank[keep]] = hr[keep]
        scores[hq[keep], rank[keep]] = hs[keep]
        return rows, scores

    def _block(self, c: int) -> np.ndarray:
        return self.blocked[self.offsets[c]:self.offsets[c + 1]]

    def _group(self, lists: np.ndarray, nq_stride: int = 1):
        """Yield (list id, query indices probing it) for nonempty lists."""
        order = np.argsort(lists, kind="stable")
        queries = order // nq_stride
        bounds = np.searchsorted(lists[order], np.arange(self.num_lists + 1))
        for c in range(self.num_lists):
            lo, hi = bounds[c], bounds[c + 1]
            if lo < hi and self.offsets[c] < self.offsets[c + 1]:
                yield c, queries[lo:hi]

    def query_batch(self, Q: np.ndarray, k: int, probe: int | None = None) -> list[QueryResult]:
        rows, scores = self.search(Q, k, probe)
        return [QueryResult([(self.ids[r], float(s)) for r, s in zip(rr, ss) if r >= 0])
                for rr, ss in zip(rows, scores)]

    def query_topk(self, q: np.ndarray, k: int, probe: int | None = None) -> QueryResult:
        return self.query_batch(np.atleast_2d(q), k, probe)[0]

    def save(self, path: str | Path) -> None:
        assign = np.empty(len(self), dtype=np.int64)
        for c in range(self.num_lists):
            assign[self.perm[self.offsets[c]:self.offsets[c + 1]]] = c
        _save(path, self.ids, self.exact.vectors, self.centroids, assign, self.probe_count)


def build_approx(embeddings: np.ndarray, ids: Sequence[str], C: int, seed: int = 0,
                 probe_count: int | None = None, n_iter: int = 10) -> ApproxIndex:
    exact = ExactIndex(embeddings, ids)
    if C < 1:
        raise VectorIndexError("C must be >= 1")
    if C > len(exact):
        raise VectorIndexError(f"C={C} exceeds the number of rows ({len(exact)})")
    X = exact.vectors
    cen = spherical_kmeans(X, C, seed, n_iter)
    assign = assign_to_centroids(X, cen)
    return ApproxIndex(exact, cen, assign, probe_count or max(1, C // 8))


def recall_vs_exact(approx: ApproxIndex, exact: ExactIndex, queries: np.ndarray, k: int,
                    probe: int | None = None) -> float:
    """Mean over queries of |approx top-k & exact top-k| / min(k, size)."""
    a_rows, _ = approx.search(queries, k, probe)
    e_rows, _ = exact.search(queries, k)
    a_ids = [{approx.ids[r] for r in row if r >= 0} for row in a_rows]
    e_ids = [{exact.ids[r] for r in row} for row in e_rows]
    denom = min(k, len(exact))
    return float(np.mean([len(a & e) / denom for a, e in zip(a_ids, e_ids)]))


def throughput(index, queries: np.ndarray, k: int, **kwargs) -> float:
    """Queries per second of a batched search (single timed pass)."""
    t0 = time.perf_counter()
    index.search(queries, k, **kwargs)
    return len(queries) / (time.perf_counter() - t0)


# -- persistence ----------------------------------------------------------------


def _save(path, ids, vectors, centroids, assign, probe_count) -> None:
    header = np.array([INDEX_VERSION, vectors.shape[1], vectors.shape[0], len(centroids), probe_count],
                      dtype=np.int64)
    with open(path, "wb") as f:
        np.savez(f, header=header, ids=np.array(ids, dtype=str), vectors=vectors,
                 centroids=centroids, assign=assign)


def load_index(path: str | Path):
    """Load an ExactIndex (C = 0) or ApproxIndex, validating version and shapes."""
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise VectorIndexError(f"{path}: cannot read index file ({exc})") from exc
    with z:
        if "header" not in z.files:
            raise VectorIndexError(f"{path}: missing index header")
        version, dim, count, C, probe = (int(v) for v in z["header"])
        if version != INDEX_VERSION:
            raise VectorIndexError(f"{path}: unsupported index version {version}")
        ids, vectors = [str(i) for i in z["ids"]], z["vectors"]
        centroids, assign = z["centroids"], z["assign"]
    if vectors.shape != (count, dim) or len(ids) != count:
        raise VectorIndexError(f"{path}: embedding block does not match header")
    exact = ExactIndex(vectors, ids)
    if C == 0:
        return exact
    if centroids.shape != (C, dim) or assign.shape != (count,) or assign.min(initial=0) < 0 \
            or assign.max(initial=0) >= C:
        raise VectorIndexError(f"{path}: centroid/list block does not match header")
    return ApproxIndex(exact, centroids, assign, probe)
