from __future__ import annotations

import json
from pathlib import Path

import pytest
import torch

from bitext_miner.cli import main


@pytest.fixture(autouse=True)
def _restore_torch_state():
    """CLI runs may switch on deterministic algorithms; keep tests isolated."""
    threads = torch.get_num_threads()
    yield
    torch.use_deterministic_algorithms(False)
    torch.set_num_threads(threads)


def cli(*argv) -> int:
    return main([str(a) for a in argv])


def run_pipeline(root: Path, config: dict) -> Path:
    """synth -> build-vocab -> train -> encode -> index -> mine -> eval under ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    cfg_path = root / "run.json"
    cfg_path.write_text(json.dumps(config))
    c = ["--config", cfg_path, "--deterministic"]
    steps = [
        ["synth", "--out", root / "data"],
        ["build-vocab", "--corpus", root / "data", "--out", root / "vocab"],
        ["train", "--train", root / "data", "--vocab", root / "vocab", "--out", root / "model"],
        ["encode", "--model", root / "model" / "model.npz", "--input", root / "data" / "source.tsv",
         "--out", root / "emb" / "source.npz"],
        ["encode", "--model", root / "model" / "model.npz", "--input", root / "data" / "target.tsv",
         "--out", root / "emb" / "target.npz"],
        ["index", "--embeddings", root / "emb" / "target.npz", "--out", root / "emb" / "target.idx.npz"],
        ["index", "--embeddings", root / "emb" / "source.npz", "--out", root / "emb" / "source.idx.npz"],
        ["mine", "--source-emb", root / "emb" / "source.npz", "--target-emb", root / "emb" / "target.npz",
         "--source-index", root / "emb" / "source.idx.npz", "--target-index", root / "emb" / "target.idx.npz",
         "--out", root / "mined"],
        ["eval", "--pairs", root / "mined" / "candidates.tsv", "--gold", root / "data" / "gold.tsv",
         "--source-emb", root / "emb" / "source.npz", "--target-emb", root / "emb" / "target.npz",
         "--out", root / "report"],
    ]
    for argv in steps:
        code = cli(*c, *argv)
        if code != 0:
            raise AssertionError(f"step {argv[0]} exited with {code}")
    return root
