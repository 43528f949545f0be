"""Shared helpers for tests that drive the command line."""

import contextlib
import os
from pathlib import Path

from ehrfuse.cli import run_command

TINY = [
    "synth.n_patients=150",
    "synth.n_concepts=300",
    "tokenizer.vocab_size=900",
    "model.hidden_dim=16",
    "model.feedforward_dim=32",
    "model.num_layers=1",
    "model.max_tokens=96",
    "train.mlm_epochs=1",
    "train.cls_epochs=1",
    "train.models=[4]",
]
STAGES = ["synth", "preprocess", "build-vocab", "pretrain", "train", "evaluate", "expand", "report"]


@contextlib.contextmanager
def cwd(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def run_pipeline(root: Path, seed: int = 0, overrides=TINY, stages=STAGES, out="run") -> Path:
    """Run the stages inside ``root`` with a relative output directory; return the run directory."""
    root.mkdir(parents=True, exist_ok=True)
    args = ["--out", out, "--seed", str(seed)]
    for o in overrides:
        args += ["--set", o]
    with cwd(root):
        for stage in stages:
            code = run_command([stage] + args)
            assert code == 0, f"{stage} exited with {code}"
    return root / out


def tree_bytes(run_dir: Path) -> dict[str, bytes]:
    return {str(p.relative_to(run_dir)): p.read_bytes() for p in sorted(run_dir.rglob("*")) if p.is_file()}
