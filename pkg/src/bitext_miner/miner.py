"""Candidate mining: nearest-neighbour retrieval, filtering and rescoring.

A :class:`CandidatePair` always names the source-side sentence first, whatever
the search direction. Forward search queries with source sentences against a
target index; backward search queries with targets against a source index.
"""

from __future__ import annotations

import math
import subprocess
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import Document
from .encoder import EmbeddingMatrix, SentenceEncoder, encode_corpus
from .index import ApproxIndex, ExactIndex, unit_rows

DIRECTIONS = ("forward", "backward")
RESCORE_VARIANTS = ("none", "bidirectional", "one_directional")


class MiningError(ValueError):
    pass


class ScorerProtocolError(MiningError):
    pass


@dataclass(frozen=True)
class CandidatePair:
    src_id: str
    tgt_id: str
    cosine: float
    rescored: float | None = None
    direction: str = "forward"
    rank: int = 1

    @property
    def score(self) -> float:
        """The rescored value when present, else the raw cosine."""
        return self.cosine if self.rescored is None else self.rescored

    @property
    def query_id(self) -> str:
        return self.src_id if self.direction == "forward" else self.tgt_id

    @property
    def neighbor_id(self) -> str:
        return self.tgt_id if self.direction == "forward" else self.src_id


@dataclass(frozen=True)
class MiningConfig:
    k: int = 4
    threshold: float = 0.5
    rescore_variant: str = "none"
    rescore_k: int = 4
    direction: str = "forward"  # forward | backward | both
    mutual_nn: bool = False

    def __post_init__(self):
        if self.k < 1 or self.rescore_k < 1:
            raise ValueError("k and rescore_k must be >= 1")
        if self.rescore_variant not in RESCORE_VARIANTS:
            raise ValueError(f"rescore_variant must be one of {RESCORE_VARIANTS}")
        if self.direction not in DIRECTIONS + ("both",):
            raise ValueError("direction must be forward, backward or both")
        if self.mutual_nn and self.direction != "both":
            raise ValueError("mutual_nn needs direction='both'")


Index = ExactIndex | ApproxIndex


def index_embeddings(emb: EmbeddingMatrix, *, num_lists: int = 0, probe_count: int | None = None,
                     seed: int = 0) -> Index:
    """Index the unit-normalized rows of ``emb`` (exact when ``num_lists`` is 0)."""
    from .index import build_approx

    vectors = unit_rows(np.asarray(emb.vectors, dtype=np.float64))
    if num_lists == 0:
        return ExactIndex(vectors, emb.ids)
    return build_approx(vectors, emb.ids, num_lists, seed=seed, probe_count=probe_count)


def _exact(index: Index) -> ExactIndex:
    return index.exact if isinstance(index, ApproxIndex) else index


def retrieve_pairs(queries: EmbeddingMatrix, index: Index, k: int, direction: str = "forward") -> list[CandidatePair]:
    """Top-k neighbours of every query; ``index`` must cover the opposite side.

    Query vectors are normalized, so pair scores are cosines.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if len(queries) == 0:
        return []
    Q = unit_rows(np.asarray(queries.vectors, dtype=np.float64))
    rows, scores = index.search(Q, k)
    ids = index.ids
    out = []
    for qid, rr, ss in zip(queries.ids, rows, scores):
        rank = 0
        for r, s in zip(rr, ss):
            if r < 0:
                continue
            rank += 1
            a, b = (qid, ids[r]) if direction == "forward" else (ids[r], qid)
            out.append(CandidatePair(a, b, float(s), None, direction, rank))
    return out


def filter_threshold(pairs: Sequence[CandidatePair], tau: float) -> list[CandidatePair]:
    """Pairs scoring >= tau, in their original order."""
    return [p for p in pairs if p.score >= tau]


def _top1(pairs: Sequence[CandidatePair]) -> dict[str, CandidatePair]:
    best: dict[str, CandidatePair] = {}
    for p in pairs:
        cur = best.get(p.query_id)
        if cur is None or p.rank < cur.rank:
            best[p.query_id] = p
    return best


def mutual_nn_filter(first: Sequence[CandidatePair], second: Sequence[CandidatePair]) -> list[CandidatePair]:
    """Top-1 pairs of ``first`` whose reverse is the top-1 pair of ``second``.

    The two lists must come from opposite directions. Survivors keep the
    direction of ``first`` and are returned in its order.
    """
    d1, d2 = {p.direction for p in first}, {p.direction for p in second}
    if len(d1) > 1 or len(d2) > 1 or (d1 and d1 == d2):
        raise MiningError("mutual-NN filtering needs one forward and one backward list")
    back = {q: (p.src_id, p.tgt_id) for q, p in _top1(second).items()}
    out = []
    for p in _top1(first).values():
        if back.get(p.neighbor_id) == (p.src_id, p.tgt_id):
            out.append(p)
    order = {id(p): i for i, p in enumerate(first)}
    return sorted(out, key=lambda p: order[id(p)])


def _neighbour_means(index: Index, ids: Sequence[str], source: Index, k: int) -> dict[str, float]:
    """Mean of the top-k scores in ``index`` for the stored vectors of ``ids`` in ``source``."""
    ex = _exact(source)
    pos = {i: r for r, i in enumerate(ex.ids)}
    missing = [i for i in ids if i not in pos]
    if missing:
        raise MiningError(f"id {missing[0]!r} is not in the index it should come from")
    if not ids:
        return {}
    Q = ex.vectors[[pos[i] for i in ids]]
    _, scores = index.search(Q, k)
    return {i: float(np.mean(s.astype(np.float64))) for i, s in zip(ids, scores)}


def margin_rescore(pairs: Sequence[CandidatePair], src_index: Index | None, tgt_index: Index,
                   variant: str = "bidirectional", k: int = 4) -> list[CandidatePair]:
    """Rescore pairs as ``cos / margin + cos``.

    ``bidirectional``: margin averages the k-NN scores of x among targets and of
    y among sources (each neighbourhood may include the pair's own partner).
    ``one_directional``: margin is the mean k-NN score of x among targets.
    A margin <= 0 yields a rescored value of -inf.
    """
    if variant not in ("bidirectional", "one_directional"):
        raise ValueError("variant must be 'bidirectional' or 'one_directional'")
    if k < 1:
        raise ValueError("k must be >= 1")
    if src_index is None:
        raise MiningError("margin rescoring needs the source-side index (it stores x's vector)")
    src_ids = sorted({p.src_id for p in pairs})
    fwd = _neighbour_means(tgt_index, src_ids, src_index, k)
    bwd = {}
    if variant == "bidirectional":
        bwd = _neighbour_means(src_index, sorted({p.tgt_id for p in pairs}), tgt_index, k)
    out = []
    for p in pairs:
        margin = fwd[p.src_id] if variant == "one_directional" else (fwd[p.src_id] + bwd[p.tgt_id]) / 2
        value = p.cosine / margin + p.cosine if margin > 0 else -math.inf
        out.append(replace(p, rescored=value))
    return out


# -- second-stage scorer boundary ------------------------------------------------


def _check_text(text: str, which: str, pair: CandidatePair) -> str:
    if "\t" in text or "\n" in text or "\r" in text:
        raise ScorerProtocolError(f"{which} text of pair ({pair.src_id}, {pair.tgt_id}) contains a tab or newline")
    return text


def second_stage_rescore(pairs: Sequence[CandidatePair], scorer: Sequence[str] | Callable[[str], str],
                         src_text: Mapping[str, str], tgt_text: Mapping[str, str]) -> list[CandidatePair]:
    """Replace each pair's rescored value with an external scorer's output.

    The scorer reads ``src_text<TAB>tgt_text`` lines and writes one decimal
    score per line, in order. ``scorer`` is either an argv list for a child
    process or a callable taking the whole request text and returning the
    response text.
    """
    lines = []
    for p in pairs:
        if p.src_id not in src_text or p.tgt_id not in tgt_text:
            raise MiningError(f"no text for pair ({p.src_id}, {p.tgt_id})")
        lines.append(f"{_check_text(src_text[p.src_id], 'source', p)}\t{_check_text(tgt_text[p.tgt_id], 'target', p)}\n")
    request = "".join(lines)
    if callable(scorer):
        response = scorer(request)
    else:
        try:
            proc = subprocess.run(list(scorer), input=request, capture_output=True, text=True, check=False)
        except OSError as exc:
            raise ScorerProtocolError(f"cannot start scorer {scorer[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            raise ScorerProtocolError(f"scorer exited with status {proc.returncode}: {proc.stderr.strip()[:200]}")
        response = proc.stdout
    out_lines = response.splitlines()
    if len(out_lines) != len(pairs):
        raise ScorerProtocolError(
            f"scorer returned {len(out_lines)} lines for {len(pairs)} pairs"
            f" (first unanswered line {min(len(out_lines), len(pairs)) + 1})")
    out = []
    for n, (p, line) in enumerate(zip(pairs, out_lines), start=1):
        try:
            value = float(line.strip())
        except ValueError:
            raise ScorerProtocolError(f"scorer output line {n} is not a number: {line!r}") from None
        if math.isnan(value):
            raise ScorerProtocolError(f"scorer output line {n} is NaN")
        out.append(replace(p, rescored=value))
    return out


# -- pipeline -------------------------------------------------------------------


def mine(src: EmbeddingMatrix, tgt: EmbeddingMatrix, cfg: MiningConfig, *,
         src_index: Index | None = None, tgt_index: Index | None = None) -> list[CandidatePair]:
    """Retrieve, optionally keep mutual nearest neighbours, rescore, threshold."""
    tgt_index = tgt_index or index_embeddings(tgt)
    need_src = cfg.direction != "forward" or cfg.rescore_variant != "none"
    if need_src and src_index is None:
        src_index = index_embeddings(src)
    k = 1 if cfg.mutual_nn else cfg.k
    fwd = retrieve_pairs(src, tgt_index, k, "forward") if cfg.direction in ("forward", "both") else []
    bwd = retrieve_pairs(tgt, src_index, k, "backward") if cfg.direction in ("backward", "both") else []
    if cfg.mutual_nn:
        pairs = mutual_nn_filter(fwd, bwd)
    else:
        pairs = fwd + bwd
    if cfg.rescore_variant != "none":
        pairs = margin_rescore(pairs, src_index, tgt_index, cfg.rescore_variant, cfg.rescore_k)
    return sort_pairs(filter_threshold(pairs, cfg.threshold))


def sort_pairs(pairs: Sequence[CandidatePair]) -> list[CandidatePair]:
    return sorted(pairs, key=lambda p: (p.src_id, p.rank, p.tgt_id, p.direction))


# -- documents ------------------------------------------------------------------


@dataclass
class DocEmbedding:
    doc_id: str
    vector: np.ndarray
    sentence_count: int = field(default=1)


def doc_embed(doc_id: str, sentence_vectors: np.ndarray) -> DocEmbedding:
    """Arithmetic mean of the sentence embeddings (not renormalized)."""
    V = np.asarray(sentence_vectors, dtype=np.float64)
    if V.ndim != 2 or len(V) == 0:
        raise MiningError(f"document {doc_id!r} has no sentence embeddings")
    return DocEmbedding(doc_id, V.mean(axis=0), len(V))


def embed_documents(docs: Sequence[Document], model: SentenceEncoder, batch_size: int = 64) -> EmbeddingMatrix:
    sentences = [s for d in docs for s in d.sentences]
    emb = encode_corpus(sentences, model, batch_size)
    out, start = [], 0
    for d in docs:
        n = len(d.sentences)
        out.append(doc_embed(d.id, emb.vectors[start:start + n]).vector)
        start += n
    return EmbeddingMatrix([d.id for d in docs], np.stack(out))


def mine_documents(src_docs: Sequence[Document], tgt_docs: Sequence[Document], model: SentenceEncoder,
                   k: int = 1) -> list[CandidatePair]:
    """Forward document retrieval over averaged sentence embeddings."""
    src = embed_documents(src_docs, model)
    tgt = embed_documents(tgt_docs, model)
    return retrieve_pairs(src, index_embeddings(tgt), k, "forward")


def ranked_results(pairs: Sequence[CandidatePair]) -> dict[str, list[str]]:
    """query id -> neighbour ids by rank, for P@N."""
    out: dict[str, list[tuple[int, str]]] = {}
    for p in pairs:
        out.setdefault(p.query_id, []).append((p.rank, p.neighbor_id))
    return {q: [n for _, n in sorted(v)] for q, v in out.items()}


# -- candidate files ------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.9f}"


def write_candidates(path: str | Path, pairs: Sequence[CandidatePair]) -> None:
    """``src_id<TAB>tgt_id<TAB>cosine<TAB>rescored|NA`` sorted by (src_id, rank)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in sort_pairs(pairs):
            r = "NA" if p.rescored is None else _fmt(p.rescored)
            f.write(f"{p.src_id}\t{p.tgt_id}\t{_fmt(p.cosine)}\t{r}\n")


def read_candidates(path: str | Path) -> list[CandidatePair]:
    """Inverse of :func:`write_candidates`; rank is the order within each source id."""
    path = Path(path)
    out, seen = [], {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise MiningError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            src, tgt, cos, res = parts
            try:
                cosine = float(cos)
                rescored = None if res == "NA" else float(res)
            except ValueError:
                raise MiningError(f"{path}:{lineno}: non-numeric score") from None
            seen[src] = seen.get(src, 0) + 1
            out.append(CandidatePair(src, tgt, cosine, rescored, "forward", seen[src]))
    return out
