"""Command-line entry point: one subcommand per pipeline stage.

Exit status is 0 on success, 1 for usage errors (bad flags, missing
arguments) and 2 for data or validation errors (unreadable or malformed
inputs). Every command that writes an output directory also writes the
effective configuration there as ``config.json``.

A ``--config`` JSON file may hold ``seed``, ``threads``, ``deterministic`` and
one object per subcommand whose keys are that subcommand's option names (with
underscores). Flags given on the command line take precedence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence


COMMANDS = ("synth", "build-vocab", "train", "encode", "index", "mine", "rescore", "eval", "report")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- helpers ----------------------------------------------------------------------


def _need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"{args.command}: --{n.replace('_', '-')} is required")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file or directory: {p}")
    return p


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def _echo(directory: Path, args, name: str = "config.json", **extra) -> None:
    options = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("config", "func")}
    doc = {"command": args.command, "options": options}
    doc.update({k: _jsonable(v) for k, v in extra.items()})
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / name, "w", encoding="utf-8", newline="\n") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_parallel(path: str):
    from .corpus import load_corpus, read_tsv_pairs

    p = _existing(path)
    if p.is_dir():
        for name in ("source.tsv", "target.tsv", "gold.tsv"):
            _existing(str(p / name))
        return load_corpus(p / "source.tsv", p / "target.tsv", p / "gold.tsv")
    return read_tsv_pairs(p)


def _tokenizer(args):
    from .corpus import TokenizerConfig

    base = TokenizerConfig.desk() if args.preset == "desk" else TokenizerConfig.paper(cjk=args.cjk)
    over = {k: getattr(args, k) for k in ("ngram_min", "ngram_max", "ngram_buckets", "oov_buckets")
            if getattr(args, k) is not None}
    if args.no_lowercase:
        over["lowercase"] = False
    return replace(base, **over)


def _load_embeddings(path: str):
    from .encoder import EmbeddingMatrix

    p = _existing(path)
    try:
        return EmbeddingMatrix.load(p)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{p}: cannot read embeddings ({exc})") from None


def _load_index(path: str, emb=None):
    from .index import load_index

    p = _existing(path)
    idx = load_index(p)
    if emb is not None and sorted(emb.ids) != idx.ids:
        raise DataError(f"{p}: index ids do not match the embeddings it should cover")
    return idx


# -- subcommands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .corpus import generate_synthetic_bitext, generate_synthetic_mining, save_corpus

    _need(args, "out")
    if args.mining:
        _need(args, "num_source", "num_target", "num_gold")
        corpus = generate_synthetic_mining(args.seed, args.num_source, args.num_target, args.num_gold,
                                           args.vocab_size, (args.min_len, args.max_len), args.noise,
                                           start=args.start)
    else:
        corpus = generate_synthetic_bitext(args.seed, args.pairs, args.vocab_size,
                                           (args.min_len, args.max_len), args.noise, start=args.start)
    out = Path(args.out)
    save_corpus(corpus, out)
    _echo(out, args)
    return 0


def cmd_build_vocab(args) -> int:
    from .corpus import build_vocab, write_vocab

    _need(args, "corpus", "out")
    corpus = _load_parallel(args.corpus)
    tok = _tokenizer(args)
    vocab = build_vocab([s.text for s in corpus.source] + [t.text for t in corpus.target], args.size, tok)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_vocab(out / "vocab.txt", vocab)
    (out / "tokenizer.json").write_text(json.dumps(asdict(tok), indent=2, sort_keys=True) + "\n")
    _echo(out, args, tokenizer=asdict(tok), vocab_words=vocab.size)
    return 0


def _read_tokenizer(directory: Path):
    from .corpus import TokenizerConfig

    path = _existing(str(directory / "tokenizer.json"))
    try:
        return TokenizerConfig(**json.loads(path.read_text()))
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: invalid tokenizer settings ({exc})") from None


def cmd_train(args) -> int:
    from .corpus import TokenizerConfig, read_vocab, split_corpus
    from .encoder import EncoderConfig
    from .objective import MarginConfig
    from .trainer import Trainer, TrainConfig

    _need(args, "train", "out")
    train = _load_parallel(args.train)
    dev = _load_parallel(args.dev) if args.dev else None
    if dev is None and args.dev_fraction:
        train, dev = split_corpus(train, args.dev_fraction, args.seed)
    enc = EncoderConfig.desk(args.encoder) if args.preset == "desk" else replace(EncoderConfig.paper(),
                                                                                encoder_kind=args.encoder)
    if args.out_dim is not None:
        enc = replace(enc, out_dim=args.out_dim)
    if args.no_normalize:
        enc = replace(enc, normalize_output=False)
    cfg = TrainConfig.desk(seed=args.seed) if args.preset == "desk" else TrainConfig.paper(seed=args.seed)
    over = {}
    if args.margin is not None or args.unidirectional:
        over["margin"] = MarginConfig(cfg.margin.m if args.margin is None else args.margin,
                                      not args.unidirectional)
    for key, attr in (("max_steps", "steps"), ("batch_size", "batch_size"), ("hard_negatives", "hard_negatives"),
                      ("length_penalty", "length_penalty"), ("eval_every", "eval_every"), ("patience", "patience"),
                      ("vocab_size", "vocab_size")):
        if getattr(args, attr) is not None:
            over[key] = getattr(args, attr)
    if args.lr is not None:
        over["lr_schedule"] = ((0, args.lr),)
    cfg = replace(cfg, **over)
    if args.vocab:
        vdir = _existing(args.vocab)
        tok = _read_tokenizer(vdir)
        vocab = read_vocab(_existing(str(vdir / "vocab.txt")), tok.oov_buckets)
    else:
        tok = TokenizerConfig.desk() if args.preset == "desk" else TokenizerConfig.paper()
        vocab = None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(train, dev, cfg, enc, tok, vocab=vocab)
    ck = trainer.run(log_path=out / "train_log.tsv")
    ck.save(out / "model.npz")
    _echo(out, args, train=cfg.to_dict(), encoder=asdict(enc), tokenizer=asdict(tok),
          margin=cfg.margin.m)
    return 0


def cmd_encode(args) -> int:
    from .corpus import read_mono
    from .encoder import encode_corpus
    from .trainer import Checkpoint

    _need(args, "model", "input", "out")
    ck = Checkpoint.load(_existing(args.model))
    sentences = read_mono(_existing(args.input))
    emb = encode_corpus(sentences, ck.model, args.batch_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    emb.save(out)
    return 0


def cmd_index(args) -> int:
    from .miner import index_embeddings

    _need(args, "embeddings", "out")
    emb = _load_embeddings(args.embeddings)
    idx = index_embeddings(emb, num_lists=args.lists, probe_count=args.probe, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    idx.save(out)
    return 0


def cmd_mine(args) -> int:
    from .miner import MiningConfig, mine, write_candidates

    _need(args, "source_emb", "target_emb", "out")
    src = _load_embeddings(args.source_emb)
    tgt = _load_embeddings(args.target_emb)
    src_index = _load_index(args.source_index, src) if args.source_index else None
    tgt_index = _load_index(args.target_index, tgt) if args.target_index else None
    cfg = MiningConfig(k=args.k, threshold=args.threshold, rescore_variant=args.rescore,
                       rescore_k=args.rescore_k, direction=args.direction, mutual_nn=args.mutual_nn)
    pairs = mine(src, tgt, cfg, src_index=src_index, tgt_index=tgt_index)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_candidates(out / "candidates.tsv", pairs)
    _echo(out, args, mining=asdict(cfg))
    return 0


def cmd_rescore(args) -> int:
    import shlex

    from .corpus import read_mono
    from .miner import margin_rescore, read_candidates, second_stage_rescore, write_candidates

    _need(args, "candidates", "out")
    pairs = read_candidates(_existing(args.candidates))
    if (args.scorer is None) == (args.margin is None):
        raise UsageError("rescore: give exactly one of --scorer or --margin")
    if args.scorer is not None:
        _need(args, "source", "target")
        src = {s.id: s.text for s in read_mono(_existing(args.source))}
        tgt = {s.id: s.text for s in read_mono(_existing(args.target))}
        pairs = second_stage_rescore(pairs, shlex.split(args.scorer), src, tgt)
    else:
        _need(args, "source_index", "target_index")
        pairs = margin_rescore(pairs, _load_index(args.source_index), _load_index(args.target_index),
                               args.margin, args.rescore_k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_candidates(out / "candidates.tsv", pairs)
    _echo(out, args)
    return 0


def _evaluate(pairs, gold, p_at: Sequence[int], src_emb=None, tgt_emb=None):
    from .index import unit_rows
    from .metrics import cosine_separation, evaluate_pairs, pair_cosines, precision_at_n, rank2_negatives
    from .miner import ranked_results

    report = evaluate_pairs(pairs, gold)
    gold_src = {s for s, _ in gold}
    results = {q: r for q, r in ranked_results(pairs).items() if q in gold_src}
    if results:
        for n in p_at:
            report.p_at[n] = precision_at_n(results, gold, n)
    if src_emb is not None:
        pos_src = {s for s in src_emb.ids}
        gold_pairs = sorted((s, t) for s, t in gold if s in pos_src)
        if not gold_pairs:
            raise DataError("no gold source appears in the source embeddings")
        keep = [i for i, s in enumerate(src_emb.ids) if s in gold_src]
        S = unit_rows(src_emb.vectors[keep])
        neg = rank2_negatives(S, [src_emb.ids[i] for i in keep], unit_rows(tgt_emb.vectors), tgt_emb.ids, gold)
        pos = pair_cosines(gold_pairs, src_emb.vectors, src_emb.ids, tgt_emb.vectors, tgt_emb.ids)
        if neg:
            report.mean_pos, report.mean_neg = cosine_separation(pos, [c for *_, c in neg])
    return report


def _p_at(text: str) -> list[int]:
    try:
        values = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError:
        raise UsageError(f"--p-at expects comma-separated integers, got {text!r}") from None
    if not values or values[0] < 1:
        raise UsageError("--p-at values must be >= 1")
    return values


def _write_report(directory: Path, report) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.txt").write_text(report.to_table())
    (directory / "pr_curve.csv").write_text(report.pr_csv())


def cmd_eval(args) -> int:
    from .corpus import read_gold
    from .miner import read_candidates

    _need(args, "pairs", "gold")
    pairs = read_candidates(_existing(args.pairs))
    gold = read_gold(_existing(args.gold))
    if not gold:
        raise DataError(f"{args.gold}: gold file is empty")
    src_emb = tgt_emb = None
    if args.source_emb or args.target_emb:
        _need(args, "source_emb", "target_emb")
        src_emb, tgt_emb = _load_embeddings(args.source_emb), _load_embeddings(args.target_emb)
    report = _evaluate(pairs, gold, _p_at(args.p_at), src_emb, tgt_emb)
    sys.stdout.write(report.to_tsv() if args.tsv else report.to_table())
    if args.out:
        out = Path(args.out)
        _write_report(out, report)
        (out / "report.tsv").write_text(report.to_tsv())
        _echo(out, args)
    return 0


def _sweep_margin(directory: Path) -> float:
    path = _existing(str(directory / "config.json"))
    try:
        doc = json.loads(path.read_text())
    except ValueError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(doc.get("margin"), (int, float)):
        return float(doc["margin"])
    try:
        return float(doc["train"]["margin"]["m"])
    except (KeyError, TypeError):
        raise DataError(f"{path}: no margin value recorded") from None


def _read_metric_lines(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        if "\t" in line:
            k, v = line.split("\t", 1)
            out[k] = v
    return out


def cmd_report(args) -> int:
    from .corpus import read_gold
    from .metrics import _fmt, evaluate_pairs
    from .miner import read_candidates

    _need(args, "run")
    run = _existing(args.run)
    pairs = read_candidates(_existing(str(run / "candidates.tsv")))
    gold = read_gold(_existing(str(run / "gold.tsv")))
    if not gold:
        raise DataError(f"{run / 'gold.tsv'}: gold file is empty")
    out = Path(args.out) if args.out else run
    report = _evaluate(pairs, gold, _p_at(args.p_at))
    _write_report(out, report)
    sweep_dir = run / "sweep"
    if sweep_dir.is_dir():
        rows = []
        for d in sorted(p for p in sweep_dir.iterdir() if p.is_dir()):
            sp = read_candidates(_existing(str(d / "candidates.tsv")))
            sg = read_gold(_existing(str(d / "gold.tsv")))
            f1 = evaluate_pairs(sp, sg).f1
            stats = _read_metric_lines(d / "report.tsv") if (d / "report.tsv").exists() else {}
            rows.append((_sweep_margin(d), d.name, f1, stats.get("mean_pos_cosine", "NA"),
                         stats.get("mean_neg_cosine", "NA")))
        rows.sort()
        text = "margin,f1,mean_pos,mean_neg\n" + "".join(
            f"{_fmt(m)},{_fmt(f)},{p},{n}\n" for m, _, f, p, n in rows)
        (out / "margin_sweep.csv").write_text(text)
    _echo(out, args, name="report_config.json")
    return 0


# -- parser -----------------------------------------------------------------------


def _tokenizer_flags(p):
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--cjk", action="store_true", help="CJK n-gram range (with --preset paper)")
    p.add_argument("--ngram-min", type=int)
    p.add_argument("--ngram-max", type=int)
    p.add_argument("--ngram-buckets", type=int)
    p.add_argument("--oov-buckets", type=int)
    p.add_argument("--no-lowercase", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bitext-miner", description="Dual-encoder bitext mining toolkit.")
    parser.add_argument("--config", help="JSON file of default option values")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, help="torch intra-op threads")
    parser.add_argument("--deterministic", action="store_true",
                        help="deterministic kernels; single thread unless --threads is set")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("synth", help="generate a synthetic cipher corpus")
    p.add_argument("--out")
    p.add_argument("--pairs", type=int, default=2000)
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--max-len", type=int, default=15)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--start", type=int, default=0, help="skip this many pairs of the seed's stream")
    p.add_argument("--mining", action="store_true", help="monolingual sides with planted gold pairs")
    p.add_argument("--num-source", type=int)
    p.add_argument("--num-target", type=int)
    p.add_argument("--num-gold", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-vocab", help="build a shared vocabulary")
    p.add_argument("--corpus", help="corpus directory or tab-separated pairs file")
    p.add_argument("--out")
    p.add_argument("--size", type=int, default=200_000)
    _tokenizer_flags(p)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train a dual encoder")
    p.add_argument("--train", help="corpus directory or tab-separated pairs file")
    p.add_argument("--dev")
    p.add_argument("--dev-fraction", type=float, default=0.0)
    p.add_argument("--vocab", help="directory written by build-vocab")
    p.add_argument("--out")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--encoder", choices=("transformer", "dan"), default="transformer")
    p.add_argument("--out-dim", type=int)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--margin", type=float)
    p.add_argument("--unidirectional", action="store_true")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="constant learning rate (replaces the schedule)")
    p.add_argument("--hard-negatives", type=int)
    p.add_argument("--length-penalty", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--vocab-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="embed a mono-ids file")
    p.add_argument("--model")
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("index", help="build an exact or approximate index")
    p.add_argument("--embeddings")
    p.add_argument("--out")
    p.add_argument("--lists", type=int, default=0, help="number of partitions (0 = exact)")
    p.add_argument("--probe", type=int)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("mine", help="retrieve and filter candidate pairs")
    p.add_argument("--source-emb")
    p.add_argument("--target-emb")
    p.add_argument("--source-index")
    p.add_argument("--target-index")
    p.add_argument("--out")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--direction", choices=("forward", "backward", "both"), default="forward")
    p.add_argument("--mutual-nn", action="store_true")
    p.add_argument("--rescore", choices=("none", "bidirectional", "one_directional"), default="none")
    p.add_argument("--rescore-k", type=int, default=4)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("rescore", help="margin or external second-stage rescoring")
    p.add_argument("--candidates")
    p.add_argument("--out")
    p.add_argument("--scorer", help="command reading src<TAB>tgt lines, writing one score per line")
    p.add_argument("--source", help="source mono-ids file (for --scorer)")
    p.add_argument("--target", help="target mono-ids file (for --scorer)")
    p.add_argument("--margin", choices=("bidirectional", "one_directional"))
    p.add_argument("--source-index")
    p.add_argument("--target-index")
    p.add_argument("--rescore-k", type=int, default=4)
    p.set_defaults(func=cmd_rescore)

    p = sub.add_parser("eval", help="evaluate a candidate file against gold pairs")
    p.add_argument("--pairs")
    p.add_argument("--gold")
    p.add_argument("--p-at", default="1,3,10")
    p.add_argument("--source-emb")
    p.add_argument("--target-emb")
    p.add_argument("--tsv", action="store_true", help="print metric<TAB>value lines")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="write report files for a run directory")
    p.add_argument("--run")
    p.add_argument("--out")
    p.add_argument("--p-at", default="1,3,10")
    p.set_defaults(func=cmd_report)
    return parser


def _apply_config(parser: argparse.ArgumentParser, path: str) -> None:
    p = _existing(path)
    try:
        doc = json.loads(p.read_text())
    except ValueError as exc:
        raise DataError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise DataError(f"{p}: top level must be an object")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    globals_ = {"seed", "threads", "deterministic"}
    for key, value in doc.items():
        if key in globals_:
            parser.set_defaults(**{key: value})
        elif key in subparsers:
            sp = subparsers[key]
            if not isinstance(value, dict):
                raise DataError(f"{p}: section {key!r} must be an object")
            known = {a.dest for a in sp._actions} - {"help", "func"}
            unknown = sorted(set(value) - known)
            if unknown:
                raise DataError(f"{p}: unknown key {unknown[0]!r} in section {key!r}")
            sp.set_defaults(**value)
        else:
            raise DataError(f"{p}: unknown key {key!r}")


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            _apply_config(parser, known.config)
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip() + "\nbitext-miner: error: a subcommand is required")
        import torch

        if args.deterministic:
            torch.use_deterministic_algorithms(True)
            torch.set_num_threads(args.threads or 1)
        elif args.threads:
            torch.set_num_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (DataError, ValueError, OSError, RuntimeError) as exc:
        print(f"bitext-miner: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
