#!/usr/bin/env python3
"""Train both baselines on the synthetic center-blob task and merge reports.

Generates a training corpus and a held-out evaluation corpus, trains the
conv and MLP baselines through the CLI (so every run leaves checkpoints,
history, and resolved configs behind), evaluates both on the held-out set,
and prints one merged metrics table.

Usage:
    python scripts/run_synth_baselines.py --out runs/synth [--n 2000] [--seed 42]
"""

import argparse
import sys
from pathlib import Path

from histobench.cli import main as cli

TRAIN_TOML = """\
seed = {seed}

[train]
learning_rate = {lr}
epochs = {epochs}
patience = 5
batch_size = 64
augment = true
validation_fraction = 0.1
"""

BASELINES = (
    ("conv_baseline", 0.001, 14),
    ("mlp_baseline", 0.0005, 8),
)


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/synth", help="working directory")
    ap.add_argument("--n", type=int, default=2000, help="training corpus size")
    ap.add_argument("--n-eval", type=int, default=1000, help="held-out corpus size")
    ap.add_argument("--noise", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args(argv)

    out = Path(args.out)
    train_dir, eval_dir = out / "data_train", out / "data_eval"
    for d, n, seed in ((train_dir, args.n, args.seed),
                       (eval_dir, args.n_eval, args.seed + 1)):
        rc = cli(["synth", "--n", str(n), "--noise", str(args.noise),
                  "--seed", str(seed), "--out", str(d)])
        if rc:
            return rc

    report_paths = []
    for arch, lr, epochs in BASELINES:
        run_dir = out / arch
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg = run_dir / "config.toml"
        cfg.write_text(TRAIN_TOML.format(seed=args.seed, lr=lr, epochs=epochs))
        rc = cli(["train", "--arch", arch, "--config", str(cfg),
                  "--data", str(train_dir), "--format", "image-dir",
                  "--out", str(run_dir)])
        if rc:
            return rc
        rc = cli(["eval", "--checkpoint", str(run_dir / "model.ckpt"),
                  "--data", str(eval_dir), "--format", "image-dir",
                  "--out", str(run_dir / "eval")])
        if rc:
            return rc
        report_paths.append(str(run_dir / "eval" / "report.json"))

    return cli(["report", *report_paths, "--out", str(out / "summary")])


if __name__ == "__main__":
    sys.exit(run())
