"""Ranking objective for the dual encoder.

In-batch sampled softmax over dot-product scores, optional additive margin
on the positive logit, optional backward (target -> source) term, and
appended hard-negative columns. All losses are negative log-likelihoods
averaged over rows, computed with a max-shifted log-sum-exp.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch


@dataclass(frozen=True)
class MarginConfig:
    m: float = 0.3
    bidirectional: bool = True

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("margin must be non-negative")


def score_matrix(X: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    """scores[i, j] = X_i . Y_j (cosine when rows are unit norm)."""
    if X.ndim != 2 or Y.ndim != 2:
        raise ValueError("score_matrix expects 2-D inputs")
    if X.shape != Y.shape:
        raise ValueError(f"shape mismatch: X {tuple(X.shape)} vs Y {tuple(Y.shape)}")
    return X @ Y.T


def append_hard_negatives(scores: torch.Tensor, queries: torch.Tensor, negatives: torch.Tensor) -> torch.Tensor:
    """Append per-row hard-negative columns.

    ``negatives[i]`` holds the M negative embeddings for query row ``i``;
    column ``N + j`` of row ``i`` becomes ``queries[i] . negatives[i, j]``.
    """
    if negatives.ndim != 3 or negatives.shape[0] != queries.shape[0]:
        raise ValueError("negatives must be [N, M, dim] aligned with the queries")
    extra = torch.einsum("nd,nmd->nm", queries, negatives)
    return torch.cat([scores, extra], dim=1)


def apply_additive_margin(S: torch.Tensor, m: float) -> torch.Tensor:
    """Subtract ``m`` from the positive logits S[i, i]; everything else untouched."""
    N = S.shape[0]
    if S.shape[1] < N:
        raise ValueError("score matrix needs at least N columns")
    if m == 0:
        return S
    shift = torch.zeros_like(S)
    idx = torch.arange(N)
    shift[idx, idx] = m
    return S - shift


def directional_ams_loss(S: torch.Tensor, m: float = 0.0) -> torch.Tensor:
    """Mean over rows of -log softmax(S'_i)[i], S' = S with margin on the diagonal.

    Columns beyond N (hard negatives) enter the denominator only.
    """
    N, cols = S.shape
    if cols < 2:
        raise ValueError("each row needs at least one negative column")
    Sm = apply_additive_margin(S, m)
    idx = torch.arange(N)
    return (torch.logsumexp(Sm, dim=1) - Sm[idx, idx]).mean()


def bidirectional_ams_loss(X: torch.Tensor, Y: torch.Tensor, cfg: MarginConfig,
                           hard_targets: torch.Tensor | None = None,
                           hard_sources: torch.Tensor | None = None) -> torch.Tensor:
    """Forward loss (X ranks Y) plus, when bidirectional, backward loss (Y ranks X).

    Args:
        X, Y: [N, d] aligned source / target embeddings.
        hard_targets: optional [N, M, d] negative targets per source.
        hard_sources: optional [N, M', d] negative sources per target (backward term).
    """
    S = score_matrix(X, Y)
    fwd = S if hard_targets is None else append_hard_negatives(S, X, hard_targets)
    loss = directional_ams_loss(fwd, cfg.m)
    if cfg.bidirectional:
        bwd = S.T if hard_sources is None else append_hard_negatives(S.T, Y, hard_sources)
        loss = loss + directional_ams_loss(bwd, cfg.m)
    return loss


def length_penalty(pre_norm_l2s: torch.Tensor | Sequence[float], weight: float) -> torch.Tensor:
    """``weight`` times the mean pre-normalization L2 norm (pass both batch sides)."""
    if weight < 0:
        raise ValueError("length penalty weight must be non-negative")
    norms = torch.as_tensor(pre_norm_l2s, dtype=torch.float64) if not torch.is_tensor(pre_norm_l2s) else pre_norm_l2s
    if weight == 0 or norms.numel() == 0:
        return torch.zeros((), dtype=norms.dtype)
    return weight * norms.mean()


def hard_negative_indices(queries: np.ndarray, pool: np.ndarray, gold: Sequence[int], M: int) -> list[np.ndarray]:
    """Top-M pool rows by score for each query, skipping the query's gold row.

    Exact search; ties go to the lower pool row. ``gold[i]`` may be -1 when the
    query's gold target is not in the pool.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if len(pool) == 0:
        raise ValueError("hard-negative pool is empty")
    scores = queries @ pool.T
    rows = np.arange(len(pool))
    out = []
    for i, s in enumerate(scores):
        keep = rows != gold[i]
        cand, cs = rows[keep], s[keep]
        order = np.lexsort((cand, -cs))[:M]
        out.append(cand[order])
    return out


def mine_hard_negatives(src_ids: Sequence[str], src_vecs: np.ndarray,
                        pool_ids: Sequence[str], pool_vecs: np.ndarray,
                        gold: Mapping[str, str], M: int = 5) -> dict[str, list[str]]:
    """For each source id, up to M highest-scoring pool targets other than its gold target."""
    pos = {t: i for i, t in enumerate(pool_ids)}
    gold_rows = [pos.get(gold.get(s, ""), -1) for s in src_ids]
    idx = hard_negative_indices(np.asarray(src_vecs), np.asarray(pool_vecs), gold_rows, M)
    return {s: [pool_ids[j] for j in row] for s, row in zip(src_ids, idx)}
