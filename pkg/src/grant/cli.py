"""Command-line entry point: ``grant generate|train|eval|gntk``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numeric error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .flexgcn import load_checkpoint, save_checkpoint
from .gntk import drift_sequence, gntk_matrix, save_kernel_csv, save_kernel_npz
from .graph import DatasetFormatError, GraphError, load_dataset
from .metrics import DegenerateLabelsError
from .synth import generate_dataset
from .trainer import ConfigError, NumericError, default_loss, evaluate, train

log = logging.getLogger("grant")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads(n: int):
    n = n or int(os.environ.get("GRANT_THREADS", "0") or 0)
    if n <= 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _resolve(args) -> C.RunConfig:
    overrides = C.parse_overrides(args.set or [])
    for flag in ("seed", "policy", "out_dir", "threads"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    if not args.preset and not args.config:
        raise UsageError("one of --preset or --config is required")
    return C.resolve(args.preset, args.config, overrides)


def _write_resolved(cfg: C.RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(C.dump(cfg), encoding="utf-8")


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out_dir or cfg.data_dir)
    cfg.data_dir = str(out)
    _write_resolved(cfg, out)
    synth = cfg.synth_config()
    result = generate_dataset(synth, out)
    sizes = result["metadata"]["sizes"]
    log.info("wrote %s: train=%d val=%d test=%d", out, sizes["train"], sizes["val"], sizes["test"])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    _write_resolved(cfg, out)
    train_path = Path(cfg.train_path or Path(cfg.data_dir) / "train.jsonl")
    val_path = Path(cfg.val_path or Path(cfg.data_dir) / "val.jsonl")
    if not train_path.is_file():
        raise ConfigError(f"training data not found: {train_path}")
    train_ds = load_dataset(train_path)
    val_ds = load_dataset(val_path, task_kind=train_ds.task_kind) if val_path.is_file() else None
    loss = default_loss(train_ds) if cfg.loss == "auto" else cfg.loss
    tcfg = cfg.trainer_config(loss)
    spec = cfg.layer_spec(train_ds.d, train_ds.c, train_ds.node_level)
    policy = cfg.selection_policy(train_ds.node_level)
    ckpt_dir = out / "checkpoints"

    def on_checkpoint(epoch, params):
        save_checkpoint(params, ckpt_dir / f"epoch_{epoch:05d}.json", epoch=epoch)

    with _threads(cfg.threads):
        params, tlog = train(tcfg, spec, train_ds, val_ds, policy,
                             checkpoint_every=cfg.checkpoint_every, on_checkpoint=on_checkpoint)
    tlog.write_csv(out / "log.csv")
    with open(out / "selection_events.jsonl", "w", encoding="utf-8") as fh:
        for ev in tlog.selection_events:
            fh.write(json.dumps(ev) + "\n")
    save_checkpoint(params, out / "final.json", epoch=len(tlog.records))
    summary = tlog.summary()
    summary.update({"policy": policy.variant, "start_ratio": policy.start_ratio, "loss": loss,
                    "spec": spec.to_dict(), "theta_tag": params.tag})
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    log.info("trained %d epochs -> %s", len(tlog.records), out)
    return EXIT_OK


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    report = evaluate(params, params.spec, ds)
    report["num_graphs"] = len(ds)
    report["task_kind"] = ds.task_kind
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gntk(args) -> int:
    ds = load_dataset(args.data)
    n = min(args.probe_size, len(ds))
    ids = list(range(n))
    probe = [ds[i] for i in ids]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kernels = []
    for i, path in enumerate(args.checkpoint):
        params = load_checkpoint(path)
        k = gntk_matrix(params, params.spec, probe, ids)
        save_kernel_csv(k, out / f"kernel_{i:03d}.csv")
        save_kernel_npz(k, out / f"kernel_{i:03d}.npz")
        kernels.append(k)
    report = {
        "checkpoints": [str(p) for p in args.checkpoint],
        "theta_tags": [k.theta_tag for k in kernels],
        "probe_size": n,
        "max_diagonal": [float(np.max(np.diag(k.entries))) for k in kernels],
    }
    if len(kernels) > 1:
        drifts = drift_sequence(kernels)
        report["drift"] = drifts
        report["final_over_first"] = drifts[-1] / drifts[0] if drifts[0] > 0 else None
    (out / "gntk_report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    sys.stdout.write(json.dumps(report) + "\n")
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", help="named preset: " + ", ".join(C.preset_names()))
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--threads", type=int, help="BLAS threads (fallback: GRANT_THREADS)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grant", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="sample a synthetic graphon dataset")
    _add_run_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a flexible GCN, optionally with GraNT")
    _add_run_flags(p)
    p.add_argument("--policy", choices=("none", "B", "S"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gntk", help="GNTK matrices and drift for checkpoints")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--probe-size", type=int, default=64)
    p.add_argument("--out-dir", default="gntk")
    p.set_defaults(func=cmd_gntk)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DegenerateLabelsError, NumericError, GraphError, DatasetFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
