"""SGD training of the shared dual encoder.

Each step encodes a batch of aligned pairs (plus their mined hard negatives)
with one forward pass, applies the bidirectional additive-margin loss and an
optional embedding length penalty, and takes a plain SGD step in which the
word / n-gram tables see their gradients scaled by a constant multiplier.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import ParallelCorpus, Sentence, TokenizerConfig, Vocabulary, build_vocab
from .encoder import EncoderConfig, SentenceEncoder, collate, encode_corpus, load_model, save_model
from .index import ExactIndex, unit_rows
from .metrics import precision_at_n
from .objective import MarginConfig, bidirectional_ams_loss, hard_negative_indices, length_penalty


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 0.003), (33_000_000, 0.0003))
    max_steps: int = 40_000_000
    embed_grad_multiplier: float = 25.0
    margin: MarginConfig = field(default_factory=MarginConfig)
    hard_negatives: int = 5
    length_penalty: float = 11.0
    seed: int = 0
    vocab_size: int = 200_000
    eval_every: int = 10_000
    hard_negative_refresh: int = 500
    hard_negative_pool: int = 10_000
    patience: int | None = None
    clip_norm: float | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.lr_schedule:
            raise ValueError("lr_schedule must not be empty")
        steps = [s for s, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("lr_schedule thresholds must be strictly increasing")
        if any(r <= 0 for _, r in self.lr_schedule):
            raise ValueError("learning rates must be positive")
        if self.hard_negatives < 0 or self.length_penalty < 0:
            raise ValueError("hard_negatives and length_penalty must be non-negative")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        return replace(cls(), **overrides)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = cls(batch_size=32, lr_schedule=((0, 0.03), (750, 0.003)), max_steps=1_250,
                   embed_grad_multiplier=25.0, margin=MarginConfig(0.3, True), hard_negatives=16,
                   length_penalty=0.0, vocab_size=200_000, eval_every=250,
                   hard_negative_refresh=100, hard_negative_pool=2_000)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(x) for x in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lr_schedule" in d:
            d["lr_schedule"] = tuple((int(s), float(r)) for s, r in d["lr_schedule"])
        if isinstance(d.get("margin"), dict):
            d["margin"] = MarginConfig(**d["margin"])
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Piecewise-constant rate; the first entry applies from step 0."""
    if step < 0:
        raise ValueError("step must be >= 0")
    rate = cfg.lr_schedule[0][1]
    for threshold, r in cfg.lr_schedule[1:]:
        if step >= threshold:
            rate = r
    return rate


def sgd_step(model: SentenceEncoder, lr: float, multiplier: float = 1.0, clip_norm: float | None = None) -> None:
    """p <- p - lr * g, with table gradients scaled by ``multiplier``."""
    params = [p for p in model.parameters() if p.grad is not None]
    for p in params:
        if not torch.isfinite(p.grad).all():
            raise TrainingError("non-finite gradient")
    scale = 1.0
    if clip_norm is not None:
        total = math.sqrt(sum(float(p.grad.pow(2).sum()) for p in params))
        if total > clip_norm:
            scale = clip_norm / total
    tables = {id(t) for t in model.table_parameters()}
    with torch.no_grad():
        for p in params:
            step = lr * scale * (multiplier if id(p) in tables else 1.0)
            p.add_(p.grad, alpha=-step)


@dataclass
class Checkpoint:
    step: int
    model: SentenceEncoder
    train_cfg: TrainConfig
    history: list[tuple[int, float, float]] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        save_model(path, self.model, {"step": self.step, "train": self.train_cfg.to_dict(),
                                      "history": [list(h) for h in self.history]})

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        model, extra = load_model(path)
        return cls(int(extra.get("step", 0)), model,
                   TrainConfig.from_dict(extra.get("train", {})),
                   [tuple(h) for h in extra.get("history", [])])


def eval_dev(model: SentenceEncoder, dev: ParallelCorpus, candidates: Sequence[Sentence],
             batch_size: int = 256) -> float:
    """Forward P@1 of dev sources retrieving among ``candidates`` (exact search)."""
    if len(dev.gold) == 0:
        raise ValueError("dev set is empty")
    cand_ids = {c.id for c in candidates}
    missing = [t for _, t in dev.gold if t not in cand_ids]
    if missing:
        raise ValueError(f"candidate pool lacks dev gold target {missing[0]!r}")
    with_gold = {s for s, _ in dev.gold}
    sources = [s for s in dev.source if s.id in with_gold]
    q = encode_corpus(sources, model, batch_size)
    c = encode_corpus(list(candidates), model, batch_size)
    index = ExactIndex(unit_rows(c.vectors), c.ids)
    results = {sid: r.ids for sid, r in zip(q.ids, index.query_batch(unit_rows(q.vectors), 1))}
    return precision_at_n(results, dev.gold, 1)


class Trainer:
    """Holds the mutable training state; ``run`` drives it for ``max_steps``."""

    def __init__(self, train: ParallelCorpus, dev: ParallelCorpus | None, cfg: TrainConfig,
                 enc_cfg: EncoderConfig, tok_cfg: TokenizerConfig, *,
                 vocab: Vocabulary | None = None, model: SentenceEncoder | None = None,
                 candidates: Sequence[Sentence] | None = None, dtype: torch.dtype = torch.float32):
        pairs = train.pairs
        if not pairs:
            raise TrainingError("training split is empty")
        if dev is not None and not dev.gold:
            raise TrainingError("dev split is empty")
        self.cfg = cfg
        self.dev = dev
        self.rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(cfg.seed)
        if model is None:
            if vocab is None:
                texts = [p[1] for p in pairs] + [p[3] for p in pairs]
                vocab = build_vocab(texts, cfg.vocab_size, tok_cfg)
            model = SentenceEncoder(enc_cfg, vocab, tok_cfg, seed=cfg.seed)
        self.model = model.to(dtype)
        self.src = [Sentence(p[0], p[1]) for p in pairs]
        self.tgt = [Sentence(p[2], p[3]) for p in pairs]
        self.src_ids = [self.model.featurize(s.text) for s in self.src]
        self.tgt_ids = [self.model.featurize(t.text) for t in self.tgt]
        for s, ids in zip(self.src + self.tgt, self.src_ids + self.tgt_ids):
            if len(ids) == 0:
                raise TrainingError(f"training sentence {s.id!r} has no tokens")
        if candidates is None and dev is not None:
            candidates = list(dev.target) + self.tgt
        self.candidates = candidates
        self.step = 0
        self.history: list[tuple[int, float, float]] = []
        self._order = np.zeros(0, dtype=np.int64)
        self._cursor = 0
        self._hard_tgt: np.ndarray | None = None
        self._hard_src: np.ndarray | None = None

    # batching ---------------------------------------------------------------

    def next_batch(self) -> np.ndarray:
        n, B = len(self.src), min(self.cfg.batch_size, len(self.src))
        if self._cursor + B > len(self._order):
            self._order = self.rng.permutation(n)
            self._cursor = 0
        idx = self._order[self._cursor:self._cursor + B]
        self._cursor += B
        return idx

    def refresh_hard_negatives(self) -> None:
        """Re-mine M negatives per pair and direction against a sampled pool."""
        M = self.cfg.hard_negatives
        n = len(self.src)
        pool = np.sort(self.rng.choice(n, size=min(n, self.cfg.hard_negative_pool), replace=False))
        src_emb = encode_corpus(self.src, self.model, 256).vectors
        tgt_emb = encode_corpus(self.tgt, self.model, 256).vectors
        where = np.full(n, -1, dtype=np.int64)
        where[pool] = np.arange(len(pool))

        def mine(queries, pool_vecs):
            idx = hard_negative_indices(queries, pool_vecs[pool], where, M)
            out = np.empty((n, M), dtype=np.int64)
            for i, row in enumerate(idx):
                row = pool[row]
                if len(row) < M:  # tiny pools: repeat to keep a rectangular batch
                    row = np.resize(row, M) if len(row) else np.full(M, (i + 1) % n)
                out[i] = row
            return out

        self._hard_tgt = mine(src_emb, tgt_emb)
        self._hard_src = mine(tgt_emb, src_emb) if self.cfg.margin.bidirectional else None

    # one step -----------------------------------------------------------------

    def loss_on(self, idx: np.ndarray) -> torch.Tensor:
        B, M = len(idx), self.cfg.hard_negatives
        items = [self.src_ids[i] for i in idx] + [self.tgt_ids[i] for i in idx]
        use_hard = M > 0 and self._hard_tgt is not None
        if use_hard:
            items += [self.tgt_ids[j] for j in self._hard_tgt[idx].ravel()]
            if self._hard_src is not None:
                items += [self.src_ids[j] for j in self._hard_src[idx].ravel()]
        vecs, norms = self.model(collate(items))
        X, Y = vecs[:B], vecs[B:2 * B]
        hard_t = hard_s = None
        if use_hard:
            hard_t = vecs[2 * B:2 * B + B * M].view(B, M, -1)
            if self._hard_src is not None:
                hard_s = vecs[2 * B + B * M:].view(B, M, -1)
        loss = bidirectional_ams_loss(X, Y, self.cfg.margin, hard_t, hard_s)
        if self.cfg.length_penalty > 0:
            loss = loss + length_penalty(norms[:2 * B], self.cfg.length_penalty)
        return loss

    def train_step(self) -> float:
        cfg = self.cfg
        if cfg.hard_negatives > 0 and self.step % cfg.hard_negative_refresh == 0:
            self.refresh_hard_negatives()
        self.model.train()
        self.model.zero_grad(set_to_none=True)
        loss = self.loss_on(self.next_batch())
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {self.step}")
        loss.backward()
        try:
            sgd_step(self.model, lr_at(self.step, cfg), cfg.embed_grad_multiplier, cfg.clip_norm)
        except TrainingError as exc:
            raise TrainingError(f"{exc} at step {self.step}") from exc
        self.step += 1
        return value

    def evaluate(self) -> float:
        if self.dev is None:
            return float("nan")
        return eval_dev(self.model, self.dev, self.candidates)

    def run(self, log_path: str | Path | None = None,
            on_eval: Callable[[int, float, float], None] | None = None) -> Checkpoint:
        cfg = self.cfg
        best, stale = -1.0, 0
        recent: list[float] = []
        while self.step < cfg.max_steps:
            recent.append(self.train_step())
            if self.step % cfg.eval_every == 0 or self.step == cfg.max_steps:
                p1 = self.evaluate()
                entry = (self.step, float(np.mean(recent)), p1)
                recent = []
                self.history.append(entry)
                if log_path is not None:
                    with open(log_path, "a", encoding="utf-8") as f:
                        f.write(f"{entry[0]}\t{entry[1]:.6f}\t{entry[2]:.6f}\n")
                if on_eval is not None:
                    on_eval(*entry)
                if cfg.patience is not None and self.dev is not None:
                    if p1 > best:
                        best, stale = p1, 0
                    else:
                        stale += 1
                        if stale >= cfg.patience:
                            break
        return Checkpoint(self.step, self.model, cfg, list(self.history))


def train(train_corpus: ParallelCorpus, dev_corpus: ParallelCorpus | None, cfg: TrainConfig,
          enc_cfg: EncoderConfig, tok_cfg: TokenizerConfig, **kwargs) -> Checkpoint:
    """Train from scratch and return the final checkpoint.

    Keyword args are forwarded to :class:`Trainer` except ``log_path``.
    """
    log_path = kwargs.pop("log_path", None)
    return Trainer(train_corpus, dev_corpus, cfg, enc_cfg, tok_cfg, **kwargs).run(log_path)
