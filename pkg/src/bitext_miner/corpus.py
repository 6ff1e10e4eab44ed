"""Text ingestion: tokenization, vocabulary, character n-gram hashing, corpus files.

Also hosts the synthetic "cipher" bitext generator used for desk-scale
experiments: the target language is a fixed token permutation of the source
language, optionally corrupted per token to emulate partial translations.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

FORMATS = ("tsv-pairs", "mono-ids", "gold-map")


class CorpusFormatError(ValueError):
    """Raised for malformed corpus files; carries the offending line number."""

    def __init__(self, path: str | Path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


def fnv1a_64(text: str) -> int:
    """64-bit FNV-1a over the UTF-8 bytes of ``text``."""
    h = FNV64_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class TokenizerConfig:
    lowercase: bool = True
    ngram_min: int = 3
    ngram_max: int = 6
    ngram_buckets: int = 200_000
    oov_buckets: int = 10_000

    def __post_init__(self):
        if self.ngram_min < 1:
            raise ValueError("ngram_min must be >= 1")
        if self.ngram_max < self.ngram_min:
            raise ValueError("ngram_max must be >= ngram_min")
        if self.ngram_buckets <= 0 or self.oov_buckets <= 0:
            raise ValueError("bucket counts must be positive")

    @classmethod
    def paper(cls, cjk: bool = False) -> "TokenizerConfig":
        lo, hi = (1, 4) if cjk else (3, 6)
        return cls(lowercase=True, ngram_min=lo, ngram_max=hi,
                   ngram_buckets=200_000, oov_buckets=10_000)

    @classmethod
    def desk(cls) -> "TokenizerConfig":
        return cls(lowercase=True, ngram_min=3, ngram_max=6,
                   ngram_buckets=4_096, oov_buckets=128)


def tokenize(text: str, cfg: TokenizerConfig) -> list[str]:
    if cfg.lowercase:
        text = text.lower()
    return text.split()


def char_ngrams(token: str, lo: int, hi: int) -> list[str]:
    """All character n-grams with lo <= n <= hi, shorter first, left to right."""
    return [token[i:i + n] for n in range(lo, hi + 1) for i in range(len(token) - n + 1)]


def char_ngram_ids(token: str, cfg: TokenizerConfig) -> list[int]:
    if not token:
        raise ValueError("cannot hash n-grams of an empty token (bad tokenization upstream)")
    return [fnv1a_64(g) % cfg.ngram_buckets
            for g in char_ngrams(token, cfg.ngram_min, cfg.ngram_max)]


@dataclass(frozen=True)
class Vocabulary:
    """Frequency-ranked word table with hashed OOV buckets appended after it.

    Ids ``0..size-1`` are in-vocabulary words; ids ``size..size+oov_buckets-1``
    are OOV hash buckets, so every string has an id.
    """

    words: tuple[str, ...]
    oov_buckets: int
    word_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.oov_buckets <= 0:
            raise ValueError("oov_buckets must be positive")
        mapping = {w: i for i, w in enumerate(self.words)}
        if len(mapping) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        object.__setattr__(self, "word_to_id", mapping)

    @property
    def size(self) -> int:
        return len(self.words)

    @property
    def num_ids(self) -> int:
        return len(self.words) + self.oov_buckets

    def lookup(self, token: str) -> int:
        idx = self.word_to_id.get(token)
        if idx is not None:
            return idx
        return self.size + fnv1a_64(token) % self.oov_buckets

    def __len__(self) -> int:
        return self.size

    def __contains__(self, token: str) -> bool:
        return token in self.word_to_id


def build_vocab(texts: Iterable[str], size: int, cfg: TokenizerConfig) -> Vocabulary:
    """Top-``size`` tokens by frequency, ties broken lexicographically.

    Pass the union of both sides of a language pair to get a shared table.
    """
    if size < 1:
        raise ValueError("vocabulary size must be >= 1")
    counts: Counter[str] = Counter()
    seen_text = False
    for text in texts:
        seen_text = True
        counts.update(tokenize(text, cfg))
    if not seen_text or not counts:
        raise ValueError("cannot build a vocabulary from an empty text stream")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:size]
    return Vocabulary(tuple(w for w, _ in ranked), cfg.oov_buckets)


def write_vocab(path: str | Path, vocab: Vocabulary) -> None:
    """One word per line, in id order."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for w in vocab.words:
            f.write(w + "\n")


def read_vocab(path: str | Path, oov_buckets: int) -> Vocabulary:
    words = []
    for lineno, line in _lines(path):
        if not line or any(c.isspace() for c in line):
            raise CorpusFormatError(path, lineno, "vocabulary entries must be single non-empty tokens")
        words.append(line)
    if not words:
        raise CorpusFormatError(path, 0, "vocabulary file is empty")
    try:
        return Vocabulary(tuple(words), oov_buckets)
    except ValueError as exc:
        raise CorpusFormatError(path, 0, str(exc)) from None


@dataclass(frozen=True)
class TokenIds:
    word_ids: tuple[int, ...]
    ngram_ids: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.word_ids)


def encode_ids(tokens: Sequence[str], vocab: Vocabulary, cfg: TokenizerConfig) -> TokenIds:
    return TokenIds(
        tuple(vocab.lookup(t) for t in tokens),
        tuple(tuple(char_ngram_ids(t, cfg)) for t in tokens),
    )


class Featurizer:
    """Text -> TokenIds with a per-text cache (encoding is pure, so caching is safe)."""

    def __init__(self, vocab: Vocabulary, cfg: TokenizerConfig):
        self.vocab = vocab
        self.cfg = cfg
        self._cache: dict[str, TokenIds] = {}

    def __call__(self, text: str) -> TokenIds:
        ids = self._cache.get(text)
        if ids is None:
            ids = encode_ids(tokenize(text, self.cfg), self.vocab, self.cfg)
            self._cache[text] = ids
        return ids


# -- corpora ------------------------------------------------------------------


@dataclass(frozen=True)
class Sentence:
    id: str
    text: str


@dataclass
class ParallelCorpus:
    """Two monolingual sides plus the gold alignment between them.

    For a plain aligned bitext every source has exactly one gold target; for
    mining-style data (BUCC layout) most sentences have no counterpart.
    """

    source: list[Sentence]
    target: list[Sentence]
    gold: set[tuple[str, str]] = field(default_factory=set)

    def __post_init__(self):
        src_ids = _check_unique(s.id for s in self.source)
        tgt_ids = _check_unique(s.id for s in self.target)
        for s, t in self.gold:
            if s not in src_ids or t not in tgt_ids:
                raise ValueError(f"gold pair ({s}, {t}) references an unknown id")

    @property
    def pairs(self) -> list[tuple[str, str, str, str]]:
        """Gold pairs as (src_id, src_text, tgt_id, tgt_text), in source order."""
        src = {s.id: s.text for s in self.source}
        tgt = {t.id: t.text for t in self.target}
        return [(s, src[s], t, tgt[t]) for s, t in sorted(self.gold, key=_gold_order(self))]

    def __len__(self) -> int:
        return len(self.gold)


def _gold_order(corpus: ParallelCorpus):
    pos = {s.id: i for i, s in enumerate(corpus.source)}
    return lambda pair: (pos[pair[0]], pair[1])


def _check_unique(ids: Iterable[str]) -> set[str]:
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise ValueError(f"duplicate sentence id {i!r}")
        seen.add(i)
    return seen


def _split_fields(path, lineno: int, line: str, n: int) -> list[str]:
    fields = line.split("\t")
    if len(fields) != n:
        raise CorpusFormatError(path, lineno, f"expected {n} tab-separated fields, got {len(fields)}")
    return fields


def _lines(path: str | Path) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            yield lineno, line.rstrip("\n").rstrip("\r")


def read_mono(path: str | Path) -> list[Sentence]:
    """Read ``<id><TAB><text>`` lines."""
    out: list[Sentence] = []
    seen: set[str] = set()
    for lineno, line in _lines(path):
        sid, text = _split_fields(path, lineno, line, 2)
        if not sid:
            raise CorpusFormatError(path, lineno, "empty sentence id")
        if sid in seen:
            raise CorpusFormatError(path, lineno, f"duplicate id {sid!r}")
        seen.add(sid)
        out.append(Sentence(sid, text))
    return out


def read_gold(path: str | Path) -> set[tuple[str, str]]:
    """Read ``<src_id><TAB><tgt_id>`` lines."""
    gold: set[tuple[str, str]] = set()
    for lineno, line in _lines(path):
        src, tgt = _split_fields(path, lineno, line, 2)
        if not src or not tgt:
            raise CorpusFormatError(path, lineno, "empty id in gold pair")
        if (src, tgt) in gold:
            raise CorpusFormatError(path, lineno, f"duplicate gold pair ({src}, {tgt})")
        gold.add((src, tgt))
    return gold


def read_tsv_pairs(path: str | Path, src_prefix: str = "src", tgt_prefix: str = "tgt") -> ParallelCorpus:
    """Read ``<src_text><TAB><tgt_text>`` lines; ids are assigned from line numbers."""
    source, target = [], []
    for lineno, line in _lines(path):
        s, t = _split_fields(path, lineno, line, 2)
        source.append(Sentence(f"{src_prefix}-{lineno:09d}", s))
        target.append(Sentence(f"{tgt_prefix}-{lineno:09d}", t))
    gold = {(s.id, t.id) for s, t in zip(source, target)}
    return ParallelCorpus(source, target, gold)


def parse_corpus(path: str | Path, format: str):
    """Dispatch on ``format``; returns a ParallelCorpus, sentence list or gold set."""
    if format == "tsv-pairs":
        return read_tsv_pairs(path)
    if format == "mono-ids":
        return read_mono(path)
    if format == "gold-map":
        return read_gold(path)
    raise ValueError(f"unknown corpus format {format!r}; expected one of {FORMATS}")


def write_mono(path: str | Path, sentences: Iterable[Sentence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in sentences:
            if "\t" in s.id or "\t" in s.text or "\n" in s.text:
                raise ValueError(f"sentence {s.id!r} contains a tab or newline")
            f.write(f"{s.id}\t{s.text}\n")


def write_gold(path: str | Path, gold: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for src, tgt in sorted(gold):
            f.write(f"{src}\t{tgt}\n")


def load_corpus(src_path, tgt_path, gold_path=None) -> ParallelCorpus:
    gold = read_gold(gold_path) if gold_path else set()
    return ParallelCorpus(read_mono(src_path), read_mono(tgt_path), gold)


def save_corpus(corpus: ParallelCorpus, directory: str | Path,
                names: tuple[str, str, str] = ("source.tsv", "target.tsv", "gold.tsv")) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_mono(directory / names[0], corpus.source)
    write_mono(directory / names[1], corpus.target)
    write_gold(directory / names[2], corpus.gold)


# -- synthetic cipher bitext ----------------------------------------------------


def _cipher_stream(seed: int, vocab_size: int, len_range: tuple[int, int], noise: float):
    """Infinite stream of (source tokens, target tokens).

    The permutation is drawn first and every pair consumes the generator in a
    fixed order, so a longer corpus from the same seed extends a shorter one.
    """
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError("len_range must satisfy 1 <= min <= max")
    if not 0.0 <= noise < 1.0:
        raise ValueError("noise must be in [0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(vocab_size)
    while True:
        n = int(rng.integers(lo, hi + 1))
        src = rng.integers(0, vocab_size, size=n)
        tgt = perm[src]
        flip = rng.random(n) < noise
        repl = rng.integers(0, vocab_size, size=n)
        tgt = np.where(flip, repl, tgt)
        yield [f"s{i}" for i in src], [f"t{j}" for j in tgt]


def cipher_permutation(seed: int, vocab_size: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(vocab_size)


def generate_synthetic_bitext(seed: int, num_pairs: int, vocab_size: int,
                              len_range: tuple[int, int] = (5, 15), noise: float = 0.0,
                              *, src_lang: str = "src", tgt_lang: str = "tgt",
                              start: int = 0) -> ParallelCorpus:
    """Seeded cipher bitext; pair ``i`` gets ids ``{lang}-{start+i+1:09d}``.

    ``start`` skips that many pairs of the seed's stream, which yields fresh
    sentences under the same cipher (useful for held-out mining data).
    """
    if num_pairs < 1:
        raise ValueError("num_pairs must be >= 1")
    if start < 0:
        raise ValueError("start must be >= 0")
    stream = _cipher_stream(seed, vocab_size, len_range, noise)
    for _ in range(start):
        next(stream)
    source, target = [], []
    for i in range(start, start + num_pairs):
        src, tgt = next(stream)
        source.append(Sentence(f"{src_lang}-{i + 1:09d}", " ".join(src)))
        target.append(Sentence(f"{tgt_lang}-{i + 1:09d}", " ".join(tgt)))
    gold = {(s.id, t.id) for s, t in zip(source, target)}
    return ParallelCorpus(source, target, gold)


def generate_synthetic_mining(seed: int, num_source: int, num_target: int, num_gold: int,
                              vocab_size: int, len_range: tuple[int, int] = (5, 15),
                              noise: float = 0.0, *, start: int = 0) -> ParallelCorpus:
    """BUCC-style task: two monolingual sides with ``num_gold`` planted translations.

    Non-gold sentences on each side come from distinct cipher pairs whose
    counterpart is dropped, so they have no translation on the other side.
    Both sides are shuffled with the seed so gold pairs are not positionally aligned.
    """
    if not 0 <= num_gold <= min(num_source, num_target):
        raise ValueError("num_gold must fit within both sides")
    total = num_gold + (num_source - num_gold) + (num_target - num_gold)
    base = generate_synthetic_bitext(seed, total, vocab_size, len_range, noise, start=start)
    gold_src = base.source[:num_gold]
    gold_tgt = base.target[:num_gold]
    extra_src = base.source[num_gold:num_source]
    extra_tgt = base.target[num_source:total]
    rng = np.random.default_rng([seed, 1])
    source = gold_src + extra_src
    target = gold_tgt + extra_tgt
    source = [source[i] for i in rng.permutation(len(source))]
    target = [target[i] for i in rng.permutation(len(target))]
    gold = {(s.id, t.id) for s, t in zip(gold_src, gold_tgt)}
    return ParallelCorpus(source, target, gold)


def split_corpus(corpus: ParallelCorpus, dev_fraction: float, seed: int) -> tuple[ParallelCorpus, ParallelCorpus]:
    """Seeded train/dev split of an aligned bitext by gold pair."""
    if not 0.0 < dev_fraction < 1.0:
        raise ValueError("dev_fraction must be in (0, 1)")
    pairs = corpus.pairs
    if len(pairs) < 2:
        raise ValueError("need at least two gold pairs to split")
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_dev = max(1, int(round(len(pairs) * dev_fraction)))
    dev_idx, train_idx = sorted(order[:n_dev]), sorted(order[n_dev:])

    def subset(idx):
        chosen = [pairs[i] for i in idx]
        return ParallelCorpus([Sentence(p[0], p[1]) for p in chosen],
                              [Sentence(p[2], p[3]) for p in chosen],
                              {(p[0], p[2]) for p in chosen})

    return subset(train_idx), subset(dev_idx)


@dataclass(frozen=True)
class Document:
    id: str
    sentences: tuple[Sentence, ...]

    def __post_init__(self):
        if not self.sentences:
            raise ValueError(f"document {self.id!r} has no sentences")


def group_documents(corpus: ParallelCorpus, min_size: int, max_size: int, seed: int
                    ) -> tuple[list[Document], list[Document], set[tuple[str, str]]]:
    """Cut an aligned bitext into consecutive documents of random size.

    Sizes are drawn uniformly from [min_size, max_size]; trailing pairs that
    cannot fill a last document are dropped. Source document ``i`` aligns
    with target document ``i``.
    """
    if not 1 <= min_size <= max_size:
        raise ValueError("document sizes must satisfy 1 <= min_size <= max_size")
    pairs = corpus.pairs
    if len(pairs) < min_size:
        raise ValueError("corpus is smaller than one document")
    rng = np.random.default_rng(seed)
    bounds = [0]
    while True:
        end = bounds[-1] + int(rng.integers(min_size, max_size + 1))
        if end > len(pairs):
            break
        bounds.append(end)
    if len(bounds) == 1:
        bounds.append(len(pairs))
    src_docs, tgt_docs, gold = [], [], set()
    for d, (a, b) in enumerate(zip(bounds, bounds[1:])):
        chunk = pairs[a:b]
        src_docs.append(Document(f"sdoc-{d + 1:06d}", tuple(Sentence(p[0], p[1]) for p in chunk)))
        tgt_docs.append(Document(f"tdoc-{d + 1:06d}", tuple(Sentence(p[2], p[3]) for p in chunk)))
        gold.add((src_docs[-1].id, tgt_docs[-1].id))
    return src_docs, tgt_docs, gold
