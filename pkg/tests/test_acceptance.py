"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

Run with ``pytest tests/test_acceptance.py -v``. The retrieval criteria train
nine desk-preset models (three seeds, three objectives), so the whole module
takes tens of minutes on a single CPU.
"""

from __future__ import annotations

import math
import random
import time

import numpy as np
import pytest
import torch

from bitext_miner.corpus import (
    TokenizerConfig,
    generate_synthetic_bitext,
    generate_synthetic_mining,
    group_documents,
    split_corpus,
)
from bitext_miner.encoder import EncoderConfig, encode_corpus
from bitext_miner.index import build_approx, build_exact, recall_vs_exact, throughput, unit_rows
from bitext_miner.metrics import (
    cosine_separation,
    optimize_threshold,
    pair_cosines,
    pr_curve_ap,
    precision_at_n,
    rank2_negatives,
)
from bitext_miner.miner import CandidatePair, MiningConfig, index_embeddings, mine, mine_documents, ranked_results
from bitext_miner.objective import MarginConfig, bidirectional_ams_loss, directional_ams_loss
from bitext_miner.trainer import Trainer, TrainConfig, eval_dev
from conftest import run_pipeline

SEEDS = (0, 1, 2)
OBJECTIVES = {
    "DE": MarginConfig(0.0, False),
    "BiDE": MarginConfig(0.0, True),
    "BiDE+AM": MarginConfig(0.3, True),
}
CORPUS = dict(num_pairs=2000, vocab_size=200, len_range=(5, 15), noise=0.1)
HELD_OUT_START = 2000  # fresh sentences of the same cipher for mining and documents


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line outside pytest's capture, then assert."""

    def report(name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail

    return report


# -- criterion-3 models, shared by criteria 3, 4, 5 and 6 ----------------------------------


class Run:
    def __init__(self, seed: int, name: str):
        self.corpus = generate_synthetic_bitext(seed, **CORPUS)
        self.train, self.dev = split_corpus(self.corpus, 0.1, seed)
        cfg = TrainConfig.desk(seed=seed, margin=OBJECTIVES[name])
        t0 = time.process_time()
        trainer = Trainer(self.train, self.dev, cfg, EncoderConfig.desk(), TokenizerConfig.desk(),
                          candidates=self.corpus.target)
        self.model = trainer.run().model
        self.cpu_seconds = time.process_time() - t0
        self.p1 = eval_dev(self.model, self.dev, self.corpus.target)

    def separation(self) -> float:
        """Mean gold cosine minus mean rank-2 negative cosine on the dev set."""
        src = encode_corpus(self.dev.source, self.model)
        tgt = encode_corpus(self.corpus.target, self.model)
        pos = pair_cosines(sorted(self.dev.gold), src.vectors, src.ids, tgt.vectors, tgt.ids)
        neg = rank2_negatives(unit_rows(src.vectors), src.ids, unit_rows(tgt.vectors), tgt.ids, self.dev.gold)
        mean_pos, mean_neg = cosine_separation(pos, [c for *_, c in neg])
        return mean_pos - mean_neg


@pytest.fixture(scope="module")
def runs():
    torch.set_num_threads(1)  # CPU-minute budget is per single core
    return {(seed, name): Run(seed, name) for seed in SEEDS for name in OBJECTIVES}


# -- 1 -------------------------------------------------------------------------------------


def test_c1_gradient_check(verdict):
    t0 = time.perf_counter()
    corpus = generate_synthetic_bitext(0, 64, 200, (5, 15), 0.1)
    cfg = TrainConfig.desk(seed=0, batch_size=8, hard_negatives=2, hard_negative_pool=64)
    trainer = Trainer(corpus, None, cfg, EncoderConfig.desk(), TokenizerConfig.desk(), dtype=torch.float64)
    trainer.refresh_hard_negatives()
    idx = np.arange(8)
    model = trainer.model
    model.zero_grad(set_to_none=True)
    trainer.loss_on(idx).backward()

    # only coordinates the batch can reach: table rows looked up by these sentences, all other params
    items = [trainer.src_ids[i] for i in idx] + [trainer.tgt_ids[i] for i in idx]
    items += [trainer.tgt_ids[j] for j in trainer._hard_tgt[idx].ravel()]
    items += [trainer.src_ids[j] for j in trainer._hard_src[idx].ravel()]
    rows = {"word_table.weight": {w for t in items for w in t.word_ids},
            "ngram_table.weight": {g for t in items for n in t.ngram_ids for g in n}}
    coords = []
    for name, p in model.named_parameters():
        allowed = sorted(rows[name]) if name in rows else range(p.shape[0] if p.dim() else 1)
        for r in allowed:
            width = p[0].numel() if p.dim() > 1 else 1
            coords.extend((name, r, c) for c in range(width))
    rng = random.Random(0)
    chosen = rng.sample(coords, 256)

    params = dict(model.named_parameters())
    eps = 1e-4  # float64 round-off dominates below this; the loss is smooth enough above
    worst = 0.0
    analytic, numeric = [], []
    with torch.no_grad():
        for name, r, c in chosen:
            p = params[name]
            view = p.view(p.shape[0], -1) if p.dim() > 1 else p.view(-1, 1)
            orig = view[r, c].item()
            view[r, c] = orig + eps
            up = trainer.loss_on(idx).item()
            view[r, c] = orig - eps
            down = trainer.loss_on(idx).item()
            view[r, c] = orig
            g = p.grad.view_as(view)[r, c].item()
            fd = (up - down) / (2 * eps)
            analytic.append(g)
            numeric.append(fd)
            scale = max(abs(g), abs(fd))
            if scale > 1e-8:
                worst = max(worst, abs(g - fd) / scale)
    a, n = np.array(analytic), np.array(numeric)
    overall = float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n)))
    elapsed = time.perf_counter() - t0
    ok = overall < 1e-4 and worst < 1e-4 and elapsed < 120 and len(chosen) >= 200
    verdict("criterion 1 gradient check", ok,
            f"{len(chosen)} params, relative error {overall:.2e} (worst coordinate {worst:.2e}), {elapsed:.1f}s")


# -- 2 -------------------------------------------------------------------------------------


def test_c2_loss_identities(verdict):
    g = torch.Generator().manual_seed(0)
    X = torch.nn.functional.normalize(torch.randn(16, 8, generator=g, dtype=torch.float64), dim=1)
    Y = torch.nn.functional.normalize(torch.randn(16, 8, generator=g, dtype=torch.float64), dim=1)
    S = X @ Y.T
    plain = -torch.log_softmax(S, dim=1).diagonal().mean()
    checks = {"m=0 equals plain softmax": bool(directional_ams_loss(S, 0.0) == plain)}
    values = [bidirectional_ams_loss(X, Y, MarginConfig(m, True)).item() for m in (0.0, 0.1, 0.3, 0.5)]
    checks["strictly increasing in m"] = all(b > a for a, b in zip(values, values[1:]))
    sym = abs(bidirectional_ams_loss(X, Y, MarginConfig(0.3, True)).item()
              - bidirectional_ams_loss(Y, X, MarginConfig(0.3, True)).item())
    checks["symmetric"] = sym <= 1e-12
    eye = torch.eye(2, dtype=torch.float64)
    checks["ln(1+e^-1)"] = abs(directional_ams_loss(eye, 0.0).item() - math.log1p(math.exp(-1))) <= 1e-9
    checks["ln(1+e^-0.7)"] = abs(directional_ams_loss(eye, 0.3).item() - math.log1p(math.exp(-0.7))) <= 1e-9
    failed = [k for k, v in checks.items() if not v]
    verdict("criterion 2 loss identities", not failed,
            f"losses over m {[round(v, 6) for v in values]}, symmetry gap {sym:.1e}"
            + (f", failed: {failed}" if failed else ""))


# -- 3 -------------------------------------------------------------------------------------


def test_c3_retrieval_trend(runs, verdict):
    mean = {name: float(np.mean([runs[s, name].p1 for s in SEEDS])) for name in OBJECTIVES}
    slowest = max(r.cpu_seconds for r in runs.values())
    ok = (mean["BiDE+AM"] >= mean["BiDE"] >= mean["DE"] and mean["BiDE+AM"] >= 0.90 and slowest <= 300)
    per_seed = "; ".join(f"{name} {[runs[s, name].p1 for s in SEEDS]}" for name in OBJECTIVES)
    verdict("criterion 3 retrieval trend", ok,
            f"mean P@1 DE {mean['DE']:.4f}, BiDE {mean['BiDE']:.4f}, BiDE+AM {mean['BiDE+AM']:.4f} "
            f"against 2000 candidates ({per_seed}); slowest run {slowest:.0f} CPU-s")


# -- 4 -------------------------------------------------------------------------------------


def test_c4_margin_separation(runs, verdict):
    rows = [(s, runs[s, "BiDE+AM"].separation(), runs[s, "BiDE"].separation()) for s in SEEDS]
    ok = all(am > plain for _, am, plain in rows)
    verdict("criterion 4 margin separation", ok,
            "; ".join(f"seed {s}: m=0.3 {am:.4f} vs m=0 {plain:.4f}" for s, am, plain in rows))


# -- 5 -------------------------------------------------------------------------------------


def mining_f1(model, seed: int) -> dict[str, float]:
    task = generate_synthetic_mining(seed, 10_000, 10_000, 1_000, CORPUS["vocab_size"], CORPUS["len_range"],
                                     CORPUS["noise"], start=HELD_OUT_START)
    src, tgt = encode_corpus(task.source, model), encode_corpus(task.target, model)
    src_index, tgt_index = index_embeddings(src), index_embeddings(tgt)
    out = {}
    for variant in ("none", "bidirectional", "one_directional"):
        cfg = MiningConfig(k=1, threshold=-math.inf, rescore_variant=variant, rescore_k=4)
        pairs = mine(src, tgt, cfg, src_index=src_index, tgt_index=tgt_index)
        out[variant] = optimize_threshold(pairs, task.gold)[1]
    return out


def test_c5_mining_and_rescoring(runs, verdict):
    lines, ok = [], True
    for s in SEEDS:
        f = mining_f1(runs[s, "BiDE+AM"].model, s)
        ok &= f["none"] >= 0.85 and f["bidirectional"] >= f["none"]
        ok &= abs(f["one_directional"] - f["bidirectional"]) <= 0.02
        lines.append(f"seed {s}: raw {f['none']:.4f}, bidirectional margin {f['bidirectional']:.4f}, "
                     f"one-directional margin {f['one_directional']:.4f}")
    verdict("criterion 5 mining and rescoring", ok, "; ".join(lines))


# -- 6 -------------------------------------------------------------------------------------


def test_c6_document_retrieval(runs, verdict):
    lines, ok = [], True
    for s in SEEDS:
        pairs = generate_synthetic_bitext(s, 6000, CORPUS["vocab_size"], CORPUS["len_range"], CORPUS["noise"],
                                          start=HELD_OUT_START)
        src_docs, tgt_docs, gold = group_documents(pairs, 5, 20, s)
        found = mine_documents(src_docs, tgt_docs, runs[s, "BiDE+AM"].model, k=1)
        p1 = precision_at_n(ranked_results(found), gold, 1)
        ok &= len(src_docs) >= 400 and p1 >= 0.95
        lines.append(f"seed {s}: {len(src_docs)} docs, P@1 {p1:.4f}")
    verdict("criterion 6 document retrieval", ok, "; ".join(lines))


# -- 7 -------------------------------------------------------------------------------------


def unique_ranked(pairs):
    best = {}
    for p in pairs:
        key = (p.src_id, p.tgt_id)
        best[key] = max(best.get(key, -math.inf), p.score)
    return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))


def threshold_oracle(pairs, gold):
    """Score every distinct threshold from scratch; ties in F keep the larger threshold."""
    scored = dict(unique_ranked(pairs))
    best_tau, best_f = None, -1.0
    for tau in sorted(set(scored.values()), reverse=True):
        kept = {k for k, v in scored.items() if v >= tau}
        hits = len(kept & gold)
        p, r = hits / len(kept), hits / len(gold)
        f = 2 * p * r / (p + r) if hits else 0.0
        if f > best_f:
            best_tau, best_f = tau, f
    return best_tau, best_f


def ap_oracle(pairs, gold):
    """Precision at each gold pair's rank, by counting the pairs ranked at or above it."""
    ranked = [k for k, _ in unique_ranked(pairs)]
    total = 0.0
    for g in gold:
        if g not in ranked:
            continue
        rank = ranked.index(g) + 1
        total += sum(1 for k in ranked[:rank] if k in gold) / rank
    return total / len(gold)


def p_at_n_oracle(results, gold, n):
    return sum(any((q, t) in gold for t in ranked[:n]) for q, ranked in results.items()) / len(results)


def random_instance(rng: random.Random):
    n = rng.randint(1, 1000)
    side = rng.randint(2, 60)
    coarse = rng.random() < 0.5  # half the instances are full of score ties
    pairs = [CandidatePair(f"s{rng.randrange(side)}", f"t{rng.randrange(side)}",
                           rng.randrange(10) / 10 if coarse else rng.random()) for _ in range(n)]
    gold = {(f"s{i}", f"t{i}") for i in range(side)} | {(p.src_id, p.tgt_id) for p in rng.sample(pairs, n // 4)}
    return pairs, gold


def test_c7_metric_oracles(verdict):
    rng = random.Random(7)
    mismatches, ap_gap = 0, 0.0
    for _ in range(100):
        pairs, gold = random_instance(rng)
        if optimize_threshold(pairs, gold) != threshold_oracle(pairs, gold):
            mismatches += 1
        ap_gap = max(ap_gap, abs(pr_curve_ap(pairs, gold)[1] - ap_oracle(pairs, gold)))
        results = {}
        for p in pairs:
            results.setdefault(p.src_id, []).append(p.tgt_id)
        results = {q: v for q, v in results.items() if any(s == q for s, _ in gold)}
        for n in (1, 3, 10):
            if precision_at_n(results, gold, n) != p_at_n_oracle(results, gold, n):
                mismatches += 1
    three = [CandidatePair("a", "x", 0.9), CandidatePair("b", "y", 0.8), CandidatePair("c", "z", 0.7)]
    tau, f = optimize_threshold(three, {("a", "x"), ("c", "z")})
    worked = tau == 0.7 and abs(f - 0.8) < 1e-12
    ok = mismatches == 0 and ap_gap <= 1e-9 and worked
    verdict("criterion 7 metric oracles", ok,
            f"100 instances, {mismatches} threshold/P@N mismatches, max AP gap {ap_gap:.1e}; "
            f"three-pair example tau*={tau}, F*={f:.4f}")


# -- 8 -------------------------------------------------------------------------------------


def test_c8_ann_contract(verdict):
    rng = np.random.default_rng(8)
    X = unit_rows(rng.standard_normal((100_000, 64)).astype(np.float32))
    Q = unit_rows(rng.standard_normal((1_000, 64)).astype(np.float32))
    ids = [f"v{i:06d}" for i in range(len(X))]
    C = 256
    exact = build_exact(X, ids)
    approx = build_approx(X, ids, C, seed=0)
    passing, recall = None, 0.0
    for probe in range(16, C, 16):
        recall = recall_vs_exact(approx, exact, Q, 10, probe=probe)
        if recall >= 0.95:
            passing = probe
            break
    if passing is None:
        verdict("criterion 8 ANN contract", False, f"recall@10 only {recall:.4f} at probe {C - 16} of {C}")
    qps_exact = max(throughput(exact, Q, 10) for _ in range(3))
    qps_approx = max(throughput(approx, Q, 10, probe=passing) for _ in range(3))
    ok = qps_approx > qps_exact
    verdict("criterion 8 ANN contract", ok,
            f"recall@10 {recall:.4f} at probe {passing}/{C}; {qps_approx:.0f} q/s vs brute force "
            f"{qps_exact:.0f} q/s ({qps_approx / qps_exact:.2f}x)")


# -- 9 -------------------------------------------------------------------------------------

PIPELINE = {
    "seed": 11,
    "synth": {"pairs": 600, "vocab_size": 200, "noise": 0.1},
    "build-vocab": {"size": 200},
    "train": {"steps": 150, "eval_every": 50, "dev_fraction": 0.1, "hard_negatives": 4},
    "mine": {"k": 4, "threshold": 0.0, "direction": "both", "rescore": "bidirectional"},
}


def test_c9_end_to_end_determinism(tmp_path, verdict):
    first = run_pipeline(tmp_path / "a", PIPELINE)
    second = run_pipeline(tmp_path / "b", PIPELINE)
    compared, differing = [], []
    for sub in ("mined", "report"):
        for path in sorted((first / sub).iterdir()):
            if path.name == "config.json":  # echoes absolute paths, which differ by design
                continue
            compared.append(f"{sub}/{path.name}")
            if path.read_bytes() != (second / sub / path.name).read_bytes():
                differing.append(f"{sub}/{path.name}")
    candidates = (first / "mined" / "candidates.tsv").read_text().count("\n")
    ok = not differing and "mined/candidates.tsv" in compared and candidates > 0
    verdict("criterion 9 end-to-end determinism", ok,
            f"{len(compared)} files byte-identical across two runs ({candidates} candidate pairs)"
            if ok else f"differing: {differing}")
