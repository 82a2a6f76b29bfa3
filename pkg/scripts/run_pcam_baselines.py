#!/usr/bin/env python3
"""Train an architecture on the full PatchCamelyon HDF5 corpus.

Expects a directory holding train_x.h5 / train_y.h5 / test_x.h5 / test_y.h5
(keys "x" and "y"). Training state, history, and the final test report land
under --out. This is a long CPU run at full scale; trim --epochs for smoke
tests.

Usage:
    python scripts/run_pcam_baselines.py --pcam-dir /data/pcam --out runs/pcam \
        [--arch conv_baseline] [--epochs 50] [--seed 0]
"""

import argparse
import os
import sys
from pathlib import Path

from histobench.cli import main as cli

CONFIG_TOML = """\
seed = {seed}

[data]
format = "pcam-h5"
x = {x!r}
y = {y!r}

[model]
arch = "{arch}"

[train]
epochs = {epochs}
patience = 5
batch_size = 64
augment = true
validation_fraction = 0.1
"""


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--pcam-dir", default=os.environ.get("HISTOBENCH_PCAM_DIR"),
                    help="directory with the four PCam h5 files "
                         "(default: HISTOBENCH_PCAM_DIR)")
    ap.add_argument("--out", default="runs/pcam")
    ap.add_argument("--arch", default="conv_baseline",
                    choices=("mlp_baseline", "conv_baseline",
                             "mini_resnet", "mini_inception"))
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if not args.pcam_dir:
        ap.error("--pcam-dir (or HISTOBENCH_PCAM_DIR) is required")
    pcam = Path(args.pcam_dir)
    out = Path(args.out) / args.arch
    out.mkdir(parents=True, exist_ok=True)

    cfg = out / "config.toml"
    cfg.write_text(CONFIG_TOML.format(
        seed=args.seed, arch=args.arch, epochs=args.epochs,
        x=str(pcam / "train_x.h5"), y=str(pcam / "train_y.h5"),
    ))
    rc = cli(["train", "--arch", args.arch, "--config", str(cfg),
              "--out", str(out)])
    if rc:
        return rc

    eval_cfg = out / "eval_config.toml"
    eval_cfg.write_text(
        f'[data]\nformat = "pcam-h5"\nx = {str(pcam / "test_x.h5")!r}\n'
        f'y = {str(pcam / "test_y.h5")!r}\n'
    )
    return cli(["eval", "--checkpoint", str(out / "model.ckpt"),
                "--config", str(eval_cfg), "--out", str(out / "eval")])


if __name__ == "__main__":
    sys.exit(run())
