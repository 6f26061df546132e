"""Command-line entry point: ``scno <command> [flags]``.

Every command writes a JSON manifest next to its outputs recording the
resolved flags, seeds, file hashes and format versions.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import DimensionError, no_grad
from .dataset_io import (CHECKPOINT_FORMAT, VERSION, ArchitectureMismatchError, ContainerError, format_metadata,
                         load_checkpoint, load_dataset, read_container, read_metric_log, save_dataset, write_container)
from .metrics import (DegenerateTargetError, compute_metrics, depth_monotone, per_sample_metrics,
                      write_depth_scan, write_metrics_csv)
from .multigrid import VCycleBackbone, default_levels
from .operator import ConvBlockBackbone, SelfComposingOp
from .oracle import DatasetGenerationError, audit_dataset, generate_dataset
from .sparse import NonConvergenceError, SingularSystemError
from .training import NonFiniteError, TrainConfig, train_and_unroll

log = logging.getLogger("scno")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECK_FAILED = 5

MIN_GRID = 8
DEFAULT_LOSS = {"darcy": "rel_l2_plus_h1", "helmholtz": "mse"}
AUDIT_TOL = 1e-8

DATA_ERRORS = (ContainerError, ArchitectureMismatchError, DimensionError, DatasetGenerationError,
               DegenerateTargetError, FileNotFoundError, KeyError)
NUMERIC_ERRORS = (NonFiniteError, NonConvergenceError, SingularSystemError, FloatingPointError)


class UsageError(ValueError):
    """Flags that parse but do not make sense together."""


class CheckFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, args: argparse.Namespace, inputs, outputs, wall: float,
                   extra: dict | None = None) -> dict:
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command,
        "version": __version__,
        "config": flags,
        "seed": flags.get("seed"),
        "formats": {"nods": VERSION, "checkpoint": CHECKPOINT_FORMAT},
        "inputs": {str(p): file_hash(p) for p in inputs},
        "outputs": {str(p): file_hash(p) for p in outputs},
        "wall_seconds": wall,
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------------------
# argument types
# ---------------------------------------------------------------------------


def grid_arg(text: str) -> int:
    n = int(text)
    if n < MIN_GRID:
        raise argparse.ArgumentTypeError(f"grid must be at least {MIN_GRID}, got {n}")
    return n


def positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {n}")
    return n


def schedule_arg(text: str) -> list[int]:
    try:
        stages = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad stage list {text!r}") from exc
    if not stages or stages[0] < 1 or any(b <= a for a, b in zip(stages, stages[1:])):
        raise argparse.ArgumentTypeError(f"stages must be strictly increasing and start >= 1, got {text!r}")
    return stages


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    ds = generate_dataset(args.problem, args.n_samples, args.grid, seed=args.seed)
    residuals = audit_dataset(ds)
    if residuals.size and residuals.max() > AUDIT_TOL:
        raise NonConvergenceError(f"residual audit failed: max relative residual {residuals.max():.3e}",
                                  float(residuals.max()), 0)
    out = Path(args.out)
    save_dataset(out, ds)
    write_manifest(_manifest_path(out), "gen-data", args, [], [out], time.perf_counter() - t0,
                   {"max_residual": float(residuals.max()) if residuals.size else 0.0, "n_samples": len(ds)})
    print(f"wrote {len(ds)} samples to {out} (max residual {ds.metadata['max_residual']:.2e})")
    return EXIT_OK


def build_operator(backbone: str, channels: int, grid: int, levels: int | None, seed: int,
                   k_channels: int, f_channels: int, out_channels: int) -> SelfComposingOp:
    if backbone == "mgv":
        levels = default_levels(grid) if levels is None else levels
        if grid // 2 ** (levels - 1) < 4:
            raise DimensionError(f"grid {grid} too small for {levels} levels")
        bb = VCycleBackbone(channels=channels, levels=levels, seed=seed)
    else:
        bb = ConvBlockBackbone(channels=channels, seed=seed)
    return SelfComposingOp(bb, k_channels=k_channels, f_channels=f_channels, out_channels=out_channels, seed=seed)


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    if args.strategy == "direct":
        if args.stages is not None:
            raise UsageError("--stages applies to --strategy unroll; use --depth with direct")
        schedule = [args.depth or 1]
    else:
        if args.depth is not None and args.stages is not None:
            raise UsageError("give either --depth or --stages, not both")
        schedule = args.stages or list(range(1, (args.depth or 1) + 1))
    data = load_dataset(args.data)
    model = build_operator(args.backbone, args.channels, data.grid, args.levels, args.seed,
                           data.k.shape[1], data.f.shape[1], data.u.shape[1])
    if args.init is not None:
        model, _ = load_checkpoint(args.init, model)
    else:
        model.fit_normalization(data.k, data.f, data.u)
    loss = args.loss or DEFAULT_LOSS.get(data.problem, "rel_l2")
    config = TrainConfig(loss=loss, lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                         patience=args.patience, schedule=schedule, seed=args.seed, val_fraction=args.val_fraction)
    out = Path(args.out_dir)
    stages = train_and_unroll(model, data, config, out_dir=out)
    outputs = [s.checkpoint for s in stages] + [out / "metrics.csv"]
    summary = [{"depth": s.depth, "final_train_loss": s.final_loss, "val_rel_l2": s.val_rel_l2,
                "epochs_run": s.epochs_run} for s in stages]
    write_manifest(out / "manifest.json", "train", args, [Path(args.data)], outputs, time.perf_counter() - t0,
                   {"schedule": schedule, "loss": loss, "stages": summary})
    for s in summary:
        print(f"depth {s['depth']}: train loss {s['final_train_loss']:.4e}, val rel L2 {s['val_rel_l2']:.4e}")
    return EXIT_OK


def _load_model(ckpt, depth: int | None):
    model, _ = load_checkpoint(ckpt)
    if depth is not None:
        model.depth = depth
    return model


def _check_grid(model, data) -> None:
    if isinstance(model.backbone, VCycleBackbone):
        n = data.grid
        if n // 2 ** (model.backbone.levels - 1) < 4:
            raise ArchitectureMismatchError(f"dataset grid {n} too small for a {model.backbone.levels}-level model")
    if data.k.shape[1] != model.k_channels or data.u.shape[1] != model.out_channels:
        raise ArchitectureMismatchError("dataset channels do not match the checkpoint")


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    model = _load_model(args.ckpt, args.depth)
    data = load_dataset(args.data)
    _check_grid(model, data)
    pred = model.predict(data.k, data.f)
    row = compute_metrics(pred, data.u, data.spacing, model_id=Path(args.ckpt).stem, depth=model.depth)
    row.wall_seconds = time.perf_counter() - t0
    out = Path(args.out)
    write_metrics_csv(out, [row])
    write_manifest(_manifest_path(out), "eval", args, [Path(args.ckpt), Path(args.data)], [out], row.wall_seconds)
    print(f"rel_l2 {row.rel_l2:.4e} rel_h1 {row.rel_h1:.4e} max_error {row.max_error:.4e}")
    return EXIT_OK


_STAGE_RE = re.compile(r"stage(\d+)_depth(\d+)\.nods$")


def run_checkpoints(run_dir: Path) -> list[tuple[int, int, Path]]:
    found = []
    for p in run_dir.iterdir():
        m = _STAGE_RE.search(p.name)
        if m:
            found.append((int(m.group(1)), int(m.group(2)), p))
    return sorted(found)


def cmd_depth_scan(args) -> int:
    t0 = time.perf_counter()
    run_dir = Path(args.run_dir)
    ckpts = run_checkpoints(run_dir)
    if not ckpts:
        raise ContainerError(f"no stage checkpoints in {run_dir}")
    log_rows = read_metric_log(run_dir / "metrics.csv") if (run_dir / "metrics.csv").exists() else []
    data = load_dataset(args.data) if args.data else None
    rows = []
    for _, depth, path in ckpts:
        stage_rows = [r for r in log_rows if int(r["stage_depth"]) == depth]
        row = {"depth": depth, "final_train_loss": stage_rows[-1]["train_loss"] if stage_rows else float("nan"),
               "val_rel_l2": stage_rows[-1]["val_rel_l2"] if stage_rows else float("nan"),
               "val_rel_h1": stage_rows[-1]["val_rel_h1"] if stage_rows else float("nan")}
        if data is not None:
            model = _load_model(path, depth)
            _check_grid(model, data)
            m = per_sample_metrics(model.predict(data.k, data.f), data.u, data.spacing)
            row["val_rel_l2"] = float(m["rel_l2"].mean())
            row["val_rel_h1"] = float(m["rel_h1"].mean())
        rows.append(row)
    out = Path(args.out)
    write_depth_scan(out, rows)
    monotone = depth_monotone(rows, slack=args.slack)
    inputs = [p for _, _, p in ckpts] + ([Path(args.data)] if args.data else [])
    write_manifest(_manifest_path(out), "depth-scan", args, inputs, [out], time.perf_counter() - t0,
                   {"monotone": monotone})
    for r in rows:
        print(f"depth {r['depth']}: train loss {r['final_train_loss']:.4e}, val rel L2 {r['val_rel_l2']:.4e}")
    print(f"monotone within {args.slack}: {monotone}")
    if args.require_monotone and not monotone:
        raise CheckFailed("final training loss is not monotone in depth")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .checks import gradient_audit

    t0 = time.perf_counter()
    report = gradient_audit(args.backbone, args.grid, args.depth, args.channels, args.levels, args.seed, args.tol)
    wall = time.perf_counter() - t0
    print(f"{args.backbone}: {report.n_checked} entries, worst relative error {report.worst:.3e} "
          f"(tol {args.tol:g}), {wall:.1f}s")
    if args.out is not None:
        out = Path(args.out)
        out.write_text(json.dumps({"passed": report.passed, "worst": report.worst,
                                   "max_rel_error": report.max_rel_error}, indent=2) + "\n")
        write_manifest(_manifest_path(out), "grad-check", args, [], [out], wall)
    if not report.passed:
        bad = sorted((e, n) for n, e in report.max_rel_error.items() if e >= args.tol)[-1]
        raise CheckFailed(f"gradient audit failed, worst parameter {bad[1]} ({bad[0]:.3e})")
    return EXIT_OK


def _read_field(path, key: str, index: int) -> np.ndarray:
    arrays, _ = read_container(path)
    if key not in arrays:
        raise ContainerError(f"{path} holds no {key!r} entry (found {sorted(arrays)})")
    a = arrays[key]
    if a.ndim == 4:
        a = a[index]
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise DimensionError(f"{key!r} in {path} has shape {a.shape}")
    return a


def cmd_solve(args) -> int:
    t0 = time.perf_counter()
    model = _load_model(args.ckpt, args.depth)
    k = _read_field(args.k, "k", args.index)
    f = _read_field(args.f, "f", args.index) if args.f else None
    if k.shape[0] != model.k_channels:
        raise ArchitectureMismatchError(f"k has {k.shape[0]} channels, checkpoint expects {model.k_channels}")
    if f is not None and f.shape[-2:] != k.shape[-2:]:
        raise DimensionError(f"k grid {k.shape[-2:]} and f grid {f.shape[-2:]} differ")
    with no_grad():
        u = model.forward(k, f).value
    out = Path(args.out)
    write_container(out, {"u": u}, format_metadata({"kind": "prediction", "depth": model.depth}))
    inputs = [Path(args.ckpt), Path(args.k)] + ([Path(args.f)] if args.f else [])
    write_manifest(_manifest_path(out), "solve", args, inputs, [out], time.perf_counter() - t0)
    print(f"wrote {u.shape} prediction to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scno", description="Self-composing neural operators on PDE toy problems.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a solver-labelled dataset")
    g.add_argument("--problem", choices=("darcy", "helmholtz"), required=True)
    g.add_argument("--n-samples", type=positive_int, required=True)
    g.add_argument("--grid", type=grid_arg, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model directly or with Train-and-Unroll")
    t.add_argument("--data", required=True)
    t.add_argument("--backbone", choices=("mgv", "conv"), default="mgv")
    t.add_argument("--strategy", choices=("direct", "unroll"), default="unroll")
    t.add_argument("--depth", type=positive_int)
    t.add_argument("--stages", type=schedule_arg)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--channels", type=positive_int, default=8)
    t.add_argument("--levels", type=positive_int)
    t.add_argument("--loss", choices=("mse", "rel_l2", "rel_l2_plus_h1"),
                   help="default: mse for helmholtz, rel_l2_plus_h1 for darcy")
    t.add_argument("--batch-size", type=positive_int, default=16)
    t.add_argument("--patience", type=positive_int)
    t.add_argument("--val-fraction", type=float, default=0.2)
    t.add_argument("--init", help="checkpoint to start from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--depth", type=positive_int, help="composition depth (default: the checkpoint's)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("depth-scan", help="tabulate error against depth for a Train-and-Unroll run")
    d.add_argument("--run-dir", required=True)
    d.add_argument("--data", help="held-out dataset to re-evaluate each stage on")
    d.add_argument("--out", required=True)
    d.add_argument("--slack", type=float, default=1.05)
    d.add_argument("--require-monotone", action="store_true")
    d.set_defaults(func=cmd_depth_scan)

    c = sub.add_parser("grad-check", help="finite-difference audit of every backbone parameter")
    c.add_argument("--backbone", choices=("mgv", "conv"), default="mgv")
    c.add_argument("--grid", type=grid_arg, default=16)
    c.add_argument("--depth", type=positive_int, default=2)
    c.add_argument("--levels", type=positive_int, default=2)
    c.add_argument("--channels", type=positive_int, default=4)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("solve", help="predict the solution field for one input")
    s.add_argument("--k", required=True, help=".nods file with a 'k' entry")
    s.add_argument("--f", help=".nods file with an 'f' entry")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--index", type=int, default=0, help="sample index when the file holds a batch")
    s.add_argument("--depth", type=positive_int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
