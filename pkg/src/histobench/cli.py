"""Command-line surface: train, eval, ensemble, synth, report.

Runs are driven by a TOML config plus overriding flags; unknown config keys
are rejected outright and every run writes a resolved-config snapshot next
to its outputs. Exit codes: 0 success, 1 config or usage error, 2 data /
checkpoint / IO error, 3 training failure (non-finite loss).

All randomness in a run derives from the single seed: the init stream uses
seed + 2, and the train loop applies the other documented offsets (see
optim.SEED_*).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

try:
    import tomllib as _toml
except ImportError:  # python < 3.11
    import tomli as _toml

from . import ensemble as ens
from . import metrics as M
from . import optim as O
from .data import LabeledDataset, load_image_dir, load_pcam_h5, synth_center_blob
from .errors import (
    DataLoadError,
    FormatError,
    ParameterError,
    ShapeError,
    StateError,
    TrainingDivergedError,
)
from .nn import (
    Network,
    TrainState,
    build_backbone_with_head,
    build_conv_baseline,
    build_mlp_baseline,
    load_checkpoint,
    save_checkpoint,
)

_ARCHS = ("mlp_baseline", "conv_baseline", "mini_resnet", "mini_inception")
_FORMATS = ("pcam-h5", "image-dir")
_DEFAULT_LR = {
    "mlp_baseline": 0.0005,
    "conv_baseline": 0.001,
    "mini_resnet": 0.00003,
    "mini_inception": 0.00003,
    "concat_ensemble": 0.00003,
}

_DATA_KEYS = {"format", "path", "labels", "x", "y"}
_MODEL_KEYS = {"arch"}
_TRAIN_KEYS = {
    "learning_rate", "epochs", "patience", "batch_size", "beta1", "beta2",
    "epsilon", "augment", "validation_fraction",
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); route to our own codes
        raise _UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def _load_config(path) -> dict:
    """Parse and schema-check a run config; unknown keys fail fast."""
    try:
        with open(path, "rb") as fh:
            doc = _toml.load(fh)
    except FileNotFoundError:
        raise ParameterError(f"config file not found: {path}") from None
    except _toml.TOMLDecodeError as e:
        raise ParameterError(f"{path}: invalid TOML ({e})") from None
    for key, val in doc.items():
        if key == "seed":
            if type(val) is not int:
                raise ParameterError(f"{path}: seed must be an integer, got {val!r}")
        elif key == "out":
            if not isinstance(val, str):
                raise ParameterError(f"{path}: out must be a string, got {val!r}")
        elif key in ("data", "model", "train"):
            if not isinstance(val, dict):
                raise ParameterError(f"{path}: [{key}] must be a section")
            allowed = {"data": _DATA_KEYS, "model": _MODEL_KEYS, "train": _TRAIN_KEYS}[key]
            for inner in val:
                if inner not in allowed:
                    raise ParameterError(f"{path}: unknown config key {key}.{inner}")
        else:
            raise ParameterError(f"{path}: unknown config key {key!r}")
    return doc


def _toml_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return repr(float(v))
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(x) for x in v) + "]"
    raise ParameterError(f"cannot render config value {v!r}")


def _write_toml(path: Path, doc: dict) -> None:
    lines = [f"{k} = {_toml_scalar(v)}" for k, v in doc.items() if not isinstance(v, dict)]
    for k, v in doc.items():
        if isinstance(v, dict):
            lines += ["", f"[{k}]"]
            lines += [f"{k2} = {_toml_scalar(v2)}" for k2, v2 in v.items()]
    path.write_text("\n".join(lines) + "\n")


def _resolve_data(args, cfg_doc: dict) -> dict:
    """Merge config [data] with flag overrides into a validated dict."""
    data = dict(cfg_doc.get("data", {}))
    if getattr(args, "data", None):
        data["path"] = args.data
    if getattr(args, "format", None):
        data["format"] = args.format
    if getattr(args, "labels", None):
        data["labels"] = args.labels
    fmt = data.get("format")
    if fmt not in _FORMATS:
        raise ParameterError(f"data format must be one of {_FORMATS}, got {fmt!r}")
    if fmt == "image-dir" and "path" not in data:
        raise ParameterError("image-dir data needs a path (--data or [data] path)")
    if fmt == "pcam-h5" and not ("x" in data and "y" in data):
        raise ParameterError("pcam-h5 data needs [data] x and y file paths")
    return data


def _open_dataset(data: dict) -> LabeledDataset:
    if data["format"] == "pcam-h5":
        return load_pcam_h5(data["x"], data["y"])
    return load_image_dir(data["path"], data.get("labels"))


def _build_arch(arch: str, seed: int) -> Network:
    if arch == "mlp_baseline":
        return build_mlp_baseline(seed)
    if arch == "conv_baseline":
        return build_conv_baseline(seed)
    if arch in ("mini_resnet", "mini_inception"):
        return build_backbone_with_head(arch, None, seed)
    raise ParameterError(f"arch must be one of {_ARCHS}, got {arch!r}")


def _training_config(cfg_doc: dict, arch: str, seed: int) -> O.TrainingConfig:
    kwargs = dict(cfg_doc.get("train", {}))
    kwargs.setdefault("learning_rate", _DEFAULT_LR[arch])
    try:
        return O.TrainingConfig(seed=seed, **kwargs)
    except TypeError as e:
        raise ParameterError(f"invalid [train] section: {e}") from None


def _out_dir(args, cfg_doc: dict) -> Path:
    out = getattr(args, "out", None) or cfg_doc.get("out")
    if not out:
        raise ParameterError("an output directory is required (--out or top-level out)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_report(report: M.MetricsReport, out: Path) -> str:
    markdown, _ = M.render_report([report])
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out / "report.md").write_text(markdown)
    return markdown


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg_doc = _load_config(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else cfg_doc.get("seed", 0)
    arch = args.arch or cfg_doc.get("model", {}).get("arch")
    if arch not in _ARCHS:
        raise ParameterError(f"arch must be one of {_ARCHS}, got {arch!r}")
    data = _resolve_data(args, cfg_doc)
    tcfg = _training_config(cfg_doc, arch, seed)
    out = _out_dir(args, cfg_doc)

    resolved = {
        "seed": seed,
        "out": str(out),
        "data": data,
        "model": {"arch": arch},
        "train": {k: getattr(tcfg, k) for k in sorted(_TRAIN_KEYS)},
    }
    _write_toml(out / "resolved_config.toml", resolved)

    dataset = _open_dataset(data)
    net = _build_arch(arch, seed + O.SEED_INIT)
    adam = O.AdamState.for_params(net.params())
    with open(out / "history.jsonl", "w") as log:
        net, history = O.train(net, dataset, tcfg, log_stream=log, adam_state=adam)
    state = TrainState(
        epoch=len(history.records),
        best_val_loss=history.best_val_loss,
        adam_step=adam.step,
        adam_m=adam.m,
        adam_v=adam.v,
    )
    save_checkpoint(net, state, out / "model.ckpt")
    print(
        f"trained {arch}: {len(history.records)} epochs, best val loss "
        f"{history.best_val_loss:.4f} at epoch {history.best_epoch} "
        f"({history.stop_reason}); checkpoint: {out / 'model.ckpt'}"
    )
    return 0


def cmd_eval(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    cfg_doc = _load_config(args.config) if args.config else {}
    data = _resolve_data(args, cfg_doc)
    dataset = _open_dataset(data)
    out = _out_dir(args, cfg_doc)
    resolved = {
        "out": str(out),
        "checkpoint": str(args.checkpoint),
        "batch_size": args.batch_size,
        "data": data,
    }
    _write_toml(out / "resolved_config.toml", resolved)
    _, scores = O.evaluate(net, dataset, batch_size=args.batch_size)
    report = M.report_from_scores(scores, dataset.labels, model=net.name)
    print(_write_report(report, out), end="")
    return 0


def _vote_csv(path: Path, dataset: LabeledDataset, score_sets, preds) -> None:
    ids = dataset.ids or [str(i) for i in range(len(dataset))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"score_m{k}" for k in range(len(score_sets))] + ["label"])
        for i, sample_id in enumerate(ids):
            w.writerow([sample_id] + [repr(float(s[i])) for s in score_sets] + [int(preds[i])])


def cmd_ensemble(args) -> int:
    members_paths = args.checkpoint or []
    if len(members_paths) < 2:
        raise ParameterError(
            f"ensemble needs >= 2 --checkpoint members, got {len(members_paths)}"
        )
    cfg_doc = _load_config(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else cfg_doc.get("seed", 0)
    out = _out_dir(args, cfg_doc)
    data = _resolve_data(args, cfg_doc)
    dataset = _open_dataset(data)
    members = [load_checkpoint(p)[0] for p in members_paths]

    resolved = {
        "seed": seed,
        "out": str(out),
        "mode": args.mode,
        "members": [str(p) for p in members_paths],
        "init": args.init,
        "data": data,
    }

    if args.mode == "vote":
        for m in members:
            if not m.trained:
                raise StateError(f"vote member {m.name!r} has not been trained")
        _write_toml(out / "resolved_config.toml", resolved)
        score_sets = [O.evaluate(m, dataset)[1] for m in members]
        preds = ens.majority_vote(score_sets, ens.VoteConfig())
        report = M.report_from_scores(preds, dataset.labels, "Majority Vote",
                                      include_auc=False)
        _vote_csv(out / "votes.csv", dataset, score_sets, preds)
        print(_write_report(report, out), end="")
        return 0

    # concat: assemble, jointly train, then score
    tcfg = _training_config(cfg_doc, "concat_ensemble", seed)
    resolved["train"] = {k: getattr(tcfg, k) for k in sorted(_TRAIN_KEYS)}
    _write_toml(out / "resolved_config.toml", resolved)
    joint = ens.build_concat_ensemble(
        members, seed + O.SEED_INIT, reuse_weights=(args.init == "from-checkpoints")
    )
    with open(out / "history.jsonl", "w") as log:
        meta = {
            "event": "joint_training",
            "members": [
                {"checkpoint": str(p), "arch": m.name}
                for p, m in zip(members_paths, members)
            ],
            "init": args.init,
        }
        log.write(json.dumps(meta) + "\n")
        adam = O.AdamState.for_params(joint.params())
        joint, history = O.train(joint, dataset, tcfg, log_stream=log, adam_state=adam)
    state = TrainState(
        epoch=len(history.records),
        best_val_loss=history.best_val_loss,
        adam_step=adam.step,
        adam_m=adam.m,
        adam_v=adam.v,
    )
    save_checkpoint(joint, state, out / "joint.ckpt")
    eval_ds = dataset
    if args.eval_data:
        eval_ds = _open_dataset(
            {"format": args.eval_format or data["format"], "path": args.eval_data}
        )
    report = ens.evaluate_ensemble("concat", joint, eval_ds)
    print(_write_report(report, out), end="")
    return 0


def cmd_synth(args) -> int:
    dataset = synth_center_blob(args.n, args.noise, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(len(dataset)):
        # images are byte-quantized, so this byte round trip is exact
        arr = np.rint(dataset.image(i) * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, "RGB").save(out / f"{dataset.ids[i]}.png")
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"])
        for i in range(len(dataset)):
            w.writerow([dataset.ids[i], int(dataset.labels[i])])
    print(f"wrote {len(dataset)} images and labels.csv to {out}")
    return 0


def cmd_report(args) -> int:
    if not args.reports:
        raise _UsageError("histobench report: at least one report JSON path is required")
    reports: list[M.MetricsReport] = []
    for path in args.reports:
        text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParameterError(f"{path}: malformed JSON ({e})") from None
        items = doc if isinstance(doc, list) else [doc]
        for item in items:
            try:
                reports.append(M.MetricsReport.from_dict(item))
            except (KeyError, TypeError) as e:
                raise ParameterError(f"{path}: not a metrics report ({e})") from None
    seen: dict[str, int] = {}
    for r in reports:
        k = seen.get(r.model, 0) + 1
        seen[r.model] = k
        if k > 1:
            print(f"warning: duplicate model name {r.model!r} renamed to "
                  f"{r.model!r} ({k})", file=sys.stderr)
            r.model = f"{r.model} ({k})"
    markdown, doc = M.render_report(reports)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(markdown)
        (out / "report.json").write_text(doc + "\n")
    print(markdown, end="")
    return 0


# ---------------------------------------------------------------------------
# argument surface
# ---------------------------------------------------------------------------


def _add_data_flags(p: _Parser) -> None:
    p.add_argument("--data", help="dataset path (image directory)")
    p.add_argument("--format", choices=_FORMATS, help="dataset format")
    p.add_argument("--labels", help="labels CSV path (image-dir format)")


def build_parser() -> _Parser:
    p = _Parser(prog="histobench",
                description="Train and evaluate patch-classification baselines.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one architecture")
    t.add_argument("--config", help="TOML run config")
    t.add_argument("--arch", choices=_ARCHS)
    _add_data_flags(t)
    t.add_argument("--out", help="output directory")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="TOML config providing [data] (pcam-h5 x/y paths)")
    _add_data_flags(e)
    e.add_argument("--out", help="output directory")
    e.add_argument("--batch-size", type=int, default=64)
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("ensemble", help="majority vote or joint concat ensemble")
    n.add_argument("--mode", choices=("vote", "concat"), required=True)
    n.add_argument("--checkpoint", action="append",
                   help="member checkpoint (repeat for each member)")
    n.add_argument("--config", help="TOML config (seed/out/[train] overrides)")
    _add_data_flags(n)
    n.add_argument("--eval-data", help="separate dataset for the final report (concat)")
    n.add_argument("--eval-format", choices=_FORMATS)
    n.add_argument("--out")
    n.add_argument("--seed", type=int)
    n.add_argument("--init", choices=("from-checkpoints", "fresh"),
                   default="from-checkpoints")
    n.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("synth", help="generate the synthetic dataset as PNG + CSV")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("report", help="merge report JSON files into one table")
    r.add_argument("reports", nargs="*")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except ParameterError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FormatError, DataLoadError, ShapeError, StateError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
