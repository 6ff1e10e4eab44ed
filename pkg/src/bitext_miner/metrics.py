"""Retrieval and mining metrics: P@N, thresholded P/R/F1, PR curve and AP,
and the positive/rank-2-negative cosine separation statistic.

Scored pairs are anything exposing ``src_id``, ``tgt_id`` and ``score``
(see :class:`bitext_miner.miner.CandidatePair`). A pair listed more than
once counts once, at its highest score.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

GoldMap = set  # set of (src_id, tgt_id)


def _gold_targets(gold: Iterable[tuple[str, str]]) -> dict[str, set[str]]:
    out: dict[str, set[str]] = defaultdict(set)
    for s, t in gold:
        out[s].add(t)
    return out


def precision_at_n(results: Mapping[str, Sequence[str]], gold: Iterable[tuple[str, str]], n: int) -> float:
    """Fraction of queries whose gold target is among their first ``n`` results."""
    if n < 1:
        raise ValueError("N must be >= 1")
    targets = _gold_targets(gold)
    if not results:
        raise ValueError("no queries to evaluate")
    hits = 0
    for query, ranked in results.items():
        if query not in targets:
            raise ValueError(f"query {query!r} has no gold target")
        if targets[query].intersection(ranked[:n]):
            hits += 1
    return hits / len(results)


def _unique_scored(pairs) -> dict[tuple[str, str], float]:
    best: dict[tuple[str, str], float] = {}
    for p in pairs:
        key = (p.src_id, p.tgt_id)
        s = p.score
        if key not in best or s > best[key]:
            best[key] = s
    return best


def _prf(hits: int, predicted: int, gold: int) -> tuple[float, float, float]:
    p = hits / predicted if predicted else 1.0
    r = hits / gold
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def prf_at_threshold(pairs, gold: Iterable[tuple[str, str]], tau: float) -> tuple[float, float, float]:
    """Precision, recall, F1 of the pairs scoring >= tau.

    An empty prediction set has precision 1.0 by convention (and F1 0).
    """
    gold = set(gold)
    if not gold:
        raise ValueError("gold set is empty")
    predicted = [k for k, s in _unique_scored(pairs).items() if s >= tau]
    hits = sum(1 for k in predicted if k in gold)
    return _prf(hits, len(predicted), len(gold))


def _ranked(scored: dict[tuple[str, str], float]) -> list[tuple[tuple[str, str], float]]:
    return sorted(scored.items(), key=lambda kv: (-kv[1], kv[0]))


def optimize_threshold(pairs, gold: Iterable[tuple[str, str]]) -> tuple[float, float]:
    """Sweep every distinct pair score as a threshold; return (tau*, F*).

    Ties in F go to the larger threshold. Linear after one sort.
    """
    gold = set(gold)
    if not gold:
        raise ValueError("gold set is empty")
    ranked = _ranked(_unique_scored(pairs))
    if not ranked:
        raise ValueError("need at least one pair")
    best_tau, best_f = None, -1.0
    hits = 0
    for i, (key, s) in enumerate(ranked):
        hits += key in gold
        if i + 1 < len(ranked) and ranked[i + 1][1] == s:
            continue  # threshold s admits every pair tied at s
        _, _, f = _prf(hits, i + 1, len(gold))
        if f > best_f:  # scores descend, so strict > keeps the larger tau on ties
            best_tau, best_f = s, f
    return best_tau, best_f


def pr_curve_ap(pairs, gold: Iterable[tuple[str, str]]) -> tuple[list[tuple[float, float]], float]:
    """Ranked (recall, precision) points and average precision.

    Pairs are ranked by score descending, ties by (src_id, tgt_id). AP averages
    the precision at each gold hit over all gold pairs, so gold pairs that were
    never retrieved contribute zero.
    """
    gold = set(gold)
    if not gold:
        raise ValueError("gold set is empty")
    points = []
    hits = 0
    ap = 0.0
    for rank, (key, _) in enumerate(_ranked(_unique_scored(pairs)), start=1):
        if key in gold:
            hits += 1
            ap += hits / rank
        points.append((hits / len(gold), hits / rank))
    return points, ap / len(gold)


# -- cosine separation -----------------------------------------------------------


def rank2_negatives(src_vecs: np.ndarray, src_ids: Sequence[str], tgt_vecs: np.ndarray,
                    tgt_ids: Sequence[str], gold: Iterable[tuple[str, str]]) -> list[tuple[str, str, float]]:
    """For every source whose rank-1 retrieval is its gold target, the rank-2 pair.

    Exact search with lower-row tie-break. Returns (src_id, tgt_id, cosine).
    """
    if len(tgt_ids) < 2:
        raise ValueError("need at least two targets to form rank-2 negatives")
    targets = _gold_targets(gold)
    out = []
    for start in range(0, len(src_ids), 512):
        S = src_vecs[start:start + 512] @ tgt_vecs.T
        for r, row in enumerate(S):
            sid = src_ids[start + r]
            top = np.argpartition(-row, 2)[:3] if len(row) > 3 else np.arange(len(row))
            top = top[np.lexsort((top, -row[top]))]
            if tgt_ids[top[0]] in targets.get(sid, ()):
                out.append((sid, tgt_ids[top[1]], float(row[top[1]])))
    return out


def cosine_separation(positive: Sequence[float], negative: Sequence[float]) -> tuple[float, float]:
    """(mean positive cosine, mean negative cosine)."""
    if len(positive) == 0 or len(negative) == 0:
        raise ValueError("both positive and negative sets must be nonempty")
    return float(np.mean(positive)), float(np.mean(negative))


def pair_cosines(pairs: Iterable[tuple[str, str]], src_vecs: np.ndarray, src_ids: Sequence[str],
                 tgt_vecs: np.ndarray, tgt_ids: Sequence[str]) -> list[float]:
    """Cosine of each (src_id, tgt_id) pair, normalizing the stored rows."""
    spos = {s: i for i, s in enumerate(src_ids)}
    tpos = {t: i for i, t in enumerate(tgt_ids)}
    out = []
    for s, t in pairs:
        a, b = src_vecs[spos[s]], tgt_vecs[tpos[t]]
        out.append(float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))))
    return out


# -- report ---------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        if math.isinf(v):
            return "-inf" if v < 0 else "inf"
        return f"{v:.6f}"
    return str(v)


@dataclass
class EvalReport:
    p_at: dict[int, float] = field(default_factory=dict)
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    best_threshold: float | None = None
    pr_points: list[tuple[float, float]] = field(default_factory=list)
    average_precision: float | None = None
    mean_pos: float | None = None
    mean_neg: float | None = None
    num_pairs: int = 0
    num_gold: int = 0

    def lines(self) -> list[tuple[str, str]]:
        rows = [("num_pairs", str(self.num_pairs)), ("num_gold", str(self.num_gold))]
        rows += [(f"p@{n}", _fmt(v)) for n, v in sorted(self.p_at.items())]
        rows += [("best_threshold", _fmt(self.best_threshold)), ("precision", _fmt(self.precision)),
                 ("recall", _fmt(self.recall)), ("f1", _fmt(self.f1)),
                 ("average_precision", _fmt(self.average_precision))]
        if self.mean_pos is not None:
            rows += [("mean_pos_cosine", _fmt(self.mean_pos)), ("mean_neg_cosine", _fmt(self.mean_neg))]
        return rows

    def to_tsv(self) -> str:
        """Machine-readable ``metric<TAB>value`` lines."""
        return "".join(f"{k}\t{v}\n" for k, v in self.lines())

    def to_table(self) -> str:
        rows = self.lines()
        width = max(len(k) for k, _ in rows)
        return "".join(f"{k.ljust(width)}  {v}\n" for k, v in rows)

    def pr_csv(self) -> str:
        return "recall,precision\n" + "".join(f"{r:.6f},{p:.6f}\n" for r, p in self.pr_points)


def evaluate_pairs(pairs, gold: Iterable[tuple[str, str]]) -> EvalReport:
    """Threshold-optimized P/R/F1 plus PR curve / AP for a candidate list.

    With no candidates the report carries R = F = 0 and no threshold.
    """
    gold = set(gold)
    pairs = list(pairs)
    report = EvalReport(num_pairs=len(_unique_scored(pairs)), num_gold=len(gold))
    if not pairs:
        report.precision, report.recall, report.f1 = 1.0, 0.0, 0.0
        report.average_precision = 0.0
        return report
    tau, _ = optimize_threshold(pairs, gold)
    report.best_threshold = tau
    report.precision, report.recall, report.f1 = prf_at_threshold(pairs, gold, tau)
    report.pr_points, report.average_precision = pr_curve_ap(pairs, gold)
    return report
