"""Command line entry point: ``memformer <command> [options]``.

Exit status: 0 success, 1 failure (failed check, I/O error, diverged run),
2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as EX
from . import model as M
from . import trainer as TR
from .baselines import BASELINES, batch_curve
from .io import atomic_write_text, write_curves_csv, write_svg
from .tasks import save_batch_csv

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _train_overrides(args) -> dict:
    kw = {
        "seed": args.seed,
        "total_steps": args.steps,
        "lr": args.lr,
        "n_heads": args.heads,
        "n_runs": args.runs,
        "batch_size": args.batch_size,
    }
    return {k: v for k, v in kw.items() if v is not None}


def _base_config(args) -> TR.TrainConfig:
    cfg = TR.load_config(args.config) if getattr(args, "config", None) else TR.TrainConfig()
    kw = _train_overrides(args)
    if getattr(args, "variant", None):
        kw["variant"] = args.variant
    if getattr(args, "isotropic", False):
        kw["isotropic"] = True
    return cfg.replace(**kw)


def cmd_train(args) -> int:
    cfg = _base_config(args)
    out = Path(args.out_dir)
    records = []
    for run in range(cfg.n_runs):
        rec = TR.train(cfg, run, log_every=args.log_every)
        rec.write(out, f"run{run}")
        records.append(rec)
        print(f"run {run}: {rec.status}; eval log-loss per layer {np.round(rec.eval_log_loss, 4).tolist()}")
    mean, err = TR.average_runs(records)
    curves = [(cfg.model.variant, mean, err)]
    write_curves_csv(out / "train_curves.csv", curves)
    write_svg(out / "train_curves.svg", curves, title=cfg.model.variant)
    return EXIT_OK if all(r.status == "ok" for r in records) else EXIT_FAIL


def cmd_eval(args) -> int:
    model = M.load_checkpoint(args.checkpoint)
    cfg = _base_config(args).replace(**{k: getattr(model.config, k) for k in ("d", "n", "L")})
    batch = TR.eval_batch(cfg, args.run)
    if args.batch_size:
        batch = batch[: args.batch_size]
    losses = M.layer_losses(model, batch)
    for layer, x in enumerate(losses):
        print(f"layer {layer}: loss {x:.6g} log-loss {TR.log_loss(x):.6f}")
    if args.out_dir:
        write_curves_csv(Path(args.out_dir) / "eval.csv", [(model.config.variant, TR.log_loss(losses), np.zeros_like(losses))])
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _base_config(args).replace(total_steps=0)
    steps = args.layers
    out = Path(args.out_dir)
    curves = []
    for run in range(cfg.n_runs):
        batch = TR.eval_batch(cfg, run)
        if args.dump_tasks:
            save_batch_csv(out / f"tasks_run{run}.csv", batch)
        curves.append(TR.log_loss(batch_curve(args.method, batch, steps)))
    mean, err = TR.average_runs(curves)
    write_curves_csv(out / f"{args.method}.csv", [(args.method, mean, err)])
    print(f"{args.method}: mean log-loss per step {np.round(mean, 4).tolist()}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    reports = run_suite(seeds=args.seeds, gd_instances=args.instances)
    ok = True
    for r in reports:
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max deviation {r.max_abs_deviation:.3e} (tol {r.tolerance:g})")
    if args.json:
        atomic_write_text(args.json, json.dumps([r.to_dict() for r in reports], indent=1) + "\n")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_reproduce(args) -> int:
    ids = list(EX.PRESETS) if args.figure == "all" else [args.figure]
    for fid in ids:
        if fid not in EX.PRESETS:
            raise UsageError(f"unknown figure {fid!r}; run `memformer list`")
    status = EXIT_OK
    for fid in ids:
        res = EX.run_experiment(EX.PRESETS[fid], out_dir=args.out_dir, **_train_overrides(args))
        print(f"{fid}: wrote {Path(args.out_dir) / fid}.csv")
        for name, mean, err in res.curves:
            print(f"  {name}: final mean log-loss {mean[-1]:.4f} +/- {err[-1]:.4f}")
        if any(r.status != "ok" for rs in res.runs.values() for r in rs):
            status = EXIT_FAIL
    return status


def cmd_list(args) -> int:
    for fid, spec in EX.PRESETS.items():
        print(f"{fid}  {spec.description}")
    return EXIT_OK


def _common(p, steps_help="training steps per run"):
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--out-dir", default=".", help="output directory")
    p.add_argument("--steps", type=int, default=None, help=steps_help)
    p.add_argument("--lr", type=float, default=None, help="ADAM learning rate")
    p.add_argument("--heads", type=int, default=None, help="attention heads per layer")
    p.add_argument("--runs", type=int, default=None, help="independent runs to average")
    p.add_argument("--batch-size", type=int, default=None, help="tasks per batch")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="memformer", description="Memory-augmented linear transformers for in-context regression.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("train", help="train a model and write run records")
    _common(p)
    p.add_argument("--variant", choices=M.VARIANTS, default=None)
    p.add_argument("--isotropic", action="store_true", help="sample covariates with identity covariance")
    p.add_argument("--config", default=None, help="key = value or JSON config file")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fresh batch")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--isotropic", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--run", type=int, default=0, help="run index selecting covariance and batch")
    p.set_defaults(func=cmd_eval, out_dir=None)

    p = sub.add_parser("baseline", help="run a classical method on evaluation batches")
    _common(p)
    p.add_argument("--method", choices=BASELINES, default="cgd")
    p.add_argument("--layers", type=int, default=3, help="iterations of the method")
    p.add_argument("--isotropic", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--dump-tasks", action="store_true", help="also write the task batches as CSV")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("verify", help="run the equivalence and gradient checks")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--instances", type=int, default=1000, help="random instances for the preconditioned GD check")
    p.add_argument("--json", default=None, help="write the reports to this file")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("reproduce", help="run a figure preset (or `all`)")
    p.add_argument("figure")
    _common(p)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("list", help="list figure presets")
    p.set_defaults(func=cmd_list)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"memformer: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"memformer: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
