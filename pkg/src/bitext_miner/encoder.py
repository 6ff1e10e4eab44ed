"""Shared-weight sentence encoder.

Token vectors are the word embedding plus the sum of the token's hashed
character n-gram embeddings. A transformer (or a deep averaging network)
contextualizes them; max, mean, first-token and attention pooling are
concatenated and projected to the output space, then L2-normalized.

The same module encodes both languages of a pair.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Featurizer, Sentence, TokenIds, TokenizerConfig, Vocabulary

CHECKPOINT_VERSION = 1
ENCODER_KINDS = ("transformer", "dan")


class EncodingError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 300
    num_layers: int = 3
    num_heads: int = 8
    hidden_size: int = 512
    filter_size: int = 2048
    out_dim: int = 500
    encoder_kind: str = "transformer"
    normalize_output: bool = True
    positional: bool = True

    def __post_init__(self):
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"encoder_kind must be one of {ENCODER_KINDS}")
        dims = (self.embed_dim, self.num_layers, self.num_heads, self.hidden_size,
                self.filter_size, self.out_dim)
        if min(dims) <= 0:
            raise ValueError("all encoder dimensions must be positive")
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")

    @classmethod
    def paper(cls) -> "EncoderConfig":
        return cls()

    @classmethod
    def desk(cls, encoder_kind: str = "transformer") -> "EncoderConfig":
        return cls(embed_dim=32, num_layers=1, num_heads=4, hidden_size=32,
                   filter_size=64, out_dim=32, encoder_kind=encoder_kind)


# -- batching -----------------------------------------------------------------


@dataclass
class Batch:
    """Padded token ids for B sentences of max length L.

    N-gram ids are flattened in EmbeddingBag layout with one bag per
    (sentence, position) slot, padding slots included as empty bags.
    """

    word_ids: torch.Tensor      # [B, L] long
    mask: torch.Tensor          # [B, L] bool, True for real tokens
    ngram_ids: torch.Tensor     # [total] long
    ngram_offsets: torch.Tensor  # [B * L] long

    def __len__(self) -> int:
        return self.word_ids.shape[0]


def collate(items: Sequence[TokenIds]) -> Batch:
    if not items:
        raise EncodingError("cannot collate an empty batch")
    for i, ids in enumerate(items):
        if len(ids) == 0:
            raise EncodingError(f"batch item {i} has no tokens")
    L = max(len(ids) for ids in items)
    B = len(items)
    word = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    flat: list[int] = []
    offsets = np.empty(B * L, dtype=np.int64)
    slot = 0
    for b, ids in enumerate(items):
        n = len(ids)
        word[b, :n] = ids.word_ids
        mask[b, :n] = True
        for pos in range(L):
            offsets[slot] = len(flat)
            if pos < n:
                flat.extend(ids.ngram_ids[pos])
            slot += 1
    return Batch(torch.from_numpy(word), torch.from_numpy(mask),
                 torch.tensor(flat, dtype=torch.long), torch.from_numpy(offsets))


# -- building blocks ----------------------------------------------------------


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor, return_weights: bool = False):
        B, L, D = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(B, L, 3, h, D // h).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(D // h)
        logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        ctx = (weights @ v).transpose(1, 2).reshape(B, L, D)
        out = self.out(ctx)
        return (out, weights) if return_weights else out


class TransformerLayer(nn.Module):
    """Post-norm transformer block: LN(x + attn(x)), then LN(x + ffn(x))."""

    def __init__(self, dim: int, heads: int, filter_size: int):
        super().__init__()
        self.attn = SelfAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, filter_size), nn.ReLU(), nn.Linear(filter_size, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, mask):
        x = self.norm1(x + self.attn(x, mask))
        return self.norm2(x + self.ffn(x))


def pool(states: torch.Tensor, mask: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
    """Concatenate [max; mean; first; attention] pools over the valid positions.

    Args:
        states: [B, L, H] contextual states.
        mask: [B, L] bool, True where a token exists. Every row needs one.
        query: [H] learned attention-pooling query.

    Returns:
        [B, 4H] pooled features.
    """
    if states.shape[1] == 0 or not bool(mask.any(dim=1).all()):
        raise EncodingError("cannot pool an empty state sequence")
    m = mask.unsqueeze(-1)
    mx = states.masked_fill(~m, float("-inf")).max(dim=1).values
    count = mask.sum(dim=1, keepdim=True).to(states.dtype)
    mean = (states * m).sum(dim=1) / count
    first = states[:, 0]
    logits = (states @ query).masked_fill(~mask, float("-inf"))
    w = torch.softmax(logits, dim=1).unsqueeze(-1)
    att = (w * states).sum(dim=1)
    return torch.cat([mx, mean, first, att], dim=-1)


# -- the model ----------------------------------------------------------------


class SentenceEncoder(nn.Module):
    """Maps texts (via the shared vocabulary) to fixed-size sentence embeddings."""

    TABLES = ("word_table.weight", "ngram_table.weight")

    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary, tok_cfg: TokenizerConfig, seed: int = 0):
        super().__init__()
        if vocab.oov_buckets != tok_cfg.oov_buckets:
            raise ValueError("vocabulary and tokenizer disagree on oov_buckets")
        self.cfg = cfg
        self.vocab = vocab
        self.tok_cfg = tok_cfg
        self.featurize = Featurizer(vocab, tok_cfg)
        H = cfg.hidden_size
        self.word_table = nn.Embedding(vocab.num_ids, cfg.embed_dim)
        self.ngram_table = nn.EmbeddingBag(tok_cfg.ngram_buckets, cfg.embed_dim, mode="sum")
        self.input_proj = nn.Linear(cfg.embed_dim, H) if cfg.embed_dim != H else None
        if cfg.encoder_kind == "transformer":
            self.layers = nn.ModuleList(
                TransformerLayer(H, cfg.num_heads, cfg.filter_size) for _ in range(cfg.num_layers))
        else:
            self.layers = nn.ModuleList(nn.Linear(H, H) for _ in range(cfg.num_layers))
        self.pool_query = nn.Parameter(torch.empty(H))
        self.projection = nn.Linear(4 * H, cfg.out_dim)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Seeded scaled-uniform init: U(-a, a) with a = sqrt(3 / fan_in); biases zero."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name in self.TABLES:
                    a = math.sqrt(3.0 / self.cfg.embed_dim)
                    if name == "ngram_table.weight":
                        a *= 0.5
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul(2 * a).sub(a))
                elif ".norm" in name or name.startswith("norm"):
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    fan_in = p.shape[-1]
                    a = math.sqrt(3.0 / fan_in)
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul(2 * a).sub(a))

    @property
    def dtype(self) -> torch.dtype:
        return self.projection.weight.dtype

    def table_parameters(self) -> list[nn.Parameter]:
        return [self.word_table.weight, self.ngram_table.weight]

    # stages -------------------------------------------------------------

    def embed_tokens(self, batch: Batch) -> torch.Tensor:
        """[B, L, embed_dim]: word embedding plus summed n-gram embeddings."""
        if batch.word_ids.numel() and int(batch.word_ids.max()) >= self.vocab.num_ids:
            raise EncodingError("word id out of range for the word table")
        if batch.ngram_ids.numel() and int(batch.ngram_ids.max()) >= self.tok_cfg.ngram_buckets:
            raise EncodingError("n-gram id out of range for the n-gram table")
        B, L = batch.word_ids.shape
        words = self.word_table(batch.word_ids)
        grams = self.ngram_table(batch.ngram_ids, batch.ngram_offsets).view(B, L, -1)
        return words + grams

    def encode(self, batch: Batch, tokens: torch.Tensor | None = None) -> torch.Tensor:
        """[B, L, hidden] contextual states for the token vectors."""
        x = self.embed_tokens(batch) if tokens is None else tokens
        mask = batch.mask
        if x.shape[1] == 0:
            raise EncodingError("cannot encode an empty sequence")
        if self.input_proj is not None:
            x = self.input_proj(x)
        if self.cfg.encoder_kind == "dan":
            m = mask.unsqueeze(-1)
            h = (x * m).sum(dim=1) / mask.sum(dim=1, keepdim=True).to(x.dtype)
            for layer in self.layers:
                h = torch.tanh(layer(h))
            return h.unsqueeze(1).expand(-1, x.shape[1], -1) * m
        if self.cfg.positional:
            x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype)
        for layer in self.layers:
            x = layer(x, mask)
        return x

    def pool(self, states: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return pool(states, mask, self.pool_query)

    def project(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Affine projection, then optional L2 normalization.

        Returns (vectors [B, out_dim], pre-normalization norms [B]).
        """
        z = self.projection(pooled)
        norms = z.norm(dim=-1)
        if self.cfg.normalize_output:
            if bool((norms == 0).any()):
                raise EncodingError("projection produced a zero vector; parameters are degenerate")
            z = z / norms.unsqueeze(-1)
        return z, norms

    def forward(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        states = self.encode(batch)
        return self.project(self.pool(states, batch.mask))

    # convenience ----------------------------------------------------------

    def batch_texts(self, texts: Sequence[str]) -> Batch:
        return collate([self.featurize(t) for t in texts])

    def embed_texts(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        return self(self.batch_texts(texts))


@dataclass
class EmbeddingMatrix:
    """Row ``i`` is the embedding of sentence ``ids[i]``."""

    ids: list[str]
    vectors: np.ndarray
    pre_norm: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError("embedding rows must align with ids")
        if self.pre_norm is None:
            self.pre_norm = np.linalg.norm(self.vectors, axis=1)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            np.savez(f, ids=np.array(self.ids, dtype=str), vectors=self.vectors, pre_norm=self.pre_norm)

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingMatrix":
        with np.load(path, allow_pickle=False) as z:
            return cls([str(i) for i in z["ids"]], z["vectors"], z["pre_norm"])


def encode_corpus(sentences: Sequence[Sentence], model: SentenceEncoder, batch_size: int = 64) -> EmbeddingMatrix:
    """Encode sentences in input order; rows do not depend on ``batch_size``
    beyond floating-point rounding."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    out_dim = model.cfg.out_dim
    if not sentences:
        return EmbeddingMatrix([], np.zeros((0, out_dim), dtype=np.float32), np.zeros(0, dtype=np.float32))
    vecs, norms = [], []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(sentences), batch_size):
                chunk = sentences[start:start + batch_size]
                ids = [model.featurize(s.text) for s in chunk]
                for s, tid in zip(chunk, ids):
                    if len(tid) == 0:
                        raise EncodingError(f"sentence {s.id!r} has no tokens")
                try:
                    v, n = model(collate(ids))
                except EncodingError as exc:
                    names = ", ".join(s.id for s in chunk)
                    raise EncodingError(f"failed to encode batch [{names}]: {exc}") from exc
                vecs.append(v.numpy())
                norms.append(n.numpy())
    finally:
        model.train(was_training)
    return EmbeddingMatrix([s.id for s in sentences],
                           np.concatenate(vecs).astype(np.float32, copy=False),
                           np.concatenate(norms).astype(np.float32, copy=False))


# -- checkpoint container -------------------------------------------------------


def save_model(path: str | Path, model: SentenceEncoder, extra: dict | None = None) -> None:
    """Write config, vocabulary and every parameter array (with shapes) to one .npz file."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "encoder": asdict(model.cfg),
        "tokenizer": asdict(model.tok_cfg),
        "vocab": list(model.vocab.words),
        "shapes": {k: list(v.shape) for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_model(path: str | Path) -> tuple[SentenceEncoder, dict]:
    """Rebuild the encoder; raises CheckpointError on version or shape mismatch."""
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise CheckpointError(f"{path}: not a model checkpoint")
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        arrays = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    enc_cfg = EncoderConfig(**meta["encoder"])
    tok_cfg = TokenizerConfig(**meta["tokenizer"])
    vocab = Vocabulary(tuple(meta["vocab"]), tok_cfg.oov_buckets)
    model = SentenceEncoder(enc_cfg, vocab, tok_cfg)
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    if set(arrays) != set(expected):
        raise CheckpointError(f"{path}: parameter names do not match the encoder config")
    for k, arr in arrays.items():
        if tuple(arr.shape) != expected[k] or list(arr.shape) != meta["shapes"][k]:
            raise CheckpointError(f"{path}: shape mismatch for {k}: {arr.shape} vs {expected[k]}")
    dtype = next(iter(arrays.values())).dtype
    if dtype == np.float64:
        model.double()
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    return model, meta["extra"]
