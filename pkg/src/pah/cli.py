"""Command line entry point: ``train``, ``sweep``, ``gradcheck`` and ``eval``.

Exit codes: 0 success, 2 bad config or input, 3 divergence, 4 I/O failure,
5 gradient check failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, serialize_config
from .metrics import AccuracyMatrix, summarize

log = logging.getLogger("pah")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_GRADCHECK = 0, 2, 3, 4, 5
OUTPUT_ROOT_ENV = "PAH_OUTPUT_ROOT"

SWEEP_AXES = ("proto_shape", "stability", "lsp_weight", "init")
# value sets of the published ablation
DEFAULT_SWEEP_VALUES = {
    "proto_shape": "5,10,16,20,30",
    "stability": "0.1,0.25,0.5,1.0,1.5",
    "lsp_weight": "0.0,0.5,1.0,2.0",
    "init": "random,semantic",
}
SWEEP_COLUMNS = ("axis_value", "AA_percent", "FM_percent", "seed", "wallclock_s")


class UsageError(ValueError):
    """Bad command line input; maps to the config exit code."""


def resolve_output_dir(output_dir: str) -> Path:
    path = Path(output_dir)
    if path.is_absolute():
        return path
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / path if root else path


# -- result files -------------------------------------------------------------
def write_matrix_csv(matrix: AccuracyMatrix, path: Path) -> None:
    """Full-precision fractions; cells above the diagonal are left empty."""
    arr = matrix.to_array()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["after_task"] + [f"task_{j}" for j in range(1, matrix.K + 1)])
        for l in range(matrix.K):
            w.writerow([l + 1] + ["" if np.isnan(v) else repr(float(v)) for v in arr[l]])


def read_matrix_csv(path) -> AccuracyMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    K = len(rows) - 1
    arr = np.full((K, K), np.nan)
    for l, row in enumerate(rows[1:]):
        for j, cell in enumerate(row[1:]):
            if cell:
                arr[l, j] = float(cell)
    return AccuracyMatrix.from_array(arr)


def write_losses_csv(history: list[dict], path: Path) -> None:
    keys = ("task", "epoch", "L_hm", "L_sm", "L_sp", "total")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for h in history:
            w.writerow({k: h[k] if k in ("task", "epoch") else repr(float(h[k])) for k in keys})


def audit_run_dir(run_dir) -> float:
    """Largest gap between AA/FM in results.json and their recomputation from matrix.csv."""
    run_dir = Path(run_dir)
    stored = json.loads((run_dir / "results.json").read_text())
    again = summarize(read_matrix_csv(run_dir / "matrix.csv"))
    return max(abs(stored["AA"] - again["AA"]), abs(stored["FM"] - again["FM"]))


def train_to_dir(cfg: RunConfig, out_dir: Path, figures: bool = True) -> dict:
    """Run the full sequence and write every artifact into ``out_dir``."""
    from .experiment import run_pah

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(serialize_config(cfg))
    record, state = run_pah(cfg)
    result = record.to_json()
    (out_dir / "results.json").write_text(json.dumps(result, indent=2))
    write_matrix_csv(record.matrix, out_dir / "matrix.csv")
    write_losses_csv(record.history, out_dir / "losses.csv")
    save_checkpoint(state.model, out_dir / "checkpoint.pahc")
    if figures:
        from .report import plot_accuracy_matrix, plot_loss_curves

        plot_accuracy_matrix(record.matrix.to_array(), out_dir / "accuracy_matrix.png")
        plot_loss_curves(record.history, out_dir / "loss_curves.png")
    return result


# -- sweep ----------------------------------------------------------------------
def parse_axis_values(axis: str, values: str) -> list:
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise UsageError("no sweep values given")
    try:
        if axis == "proto_shape":
            out = [int(v.lower().split("x")[0]) for v in items]
        elif axis in ("stability", "lsp_weight"):
            out = [float(v) for v in items]
        else:
            out = [v.lower() for v in items]
    except ValueError:
        raise UsageError(f"cannot parse values {values!r} for axis {axis}") from None
    return out


def apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    cfg = copy.deepcopy(cfg)
    if axis == "proto_shape":
        cfg.model.proto_h = cfg.model.proto_w = value
    elif axis == "stability":
        cfg.loss.stability = value
    elif axis == "lsp_weight":
        cfg.loss.w_sp = value
    elif axis == "init":
        cfg.model.init = value
    return cfg.validate()


def _sweep_point(args) -> dict:
    cfg, axis, value, out_dir, figures = args
    t0 = time.perf_counter()
    result = train_to_dir(cfg, Path(out_dir), figures)
    return {"axis_value": value, "AA_percent": 100.0 * result["AA"], "FM_percent": 100.0 * result["FM"],
            "seed": cfg.seed, "wallclock_s": time.perf_counter() - t0, "run_dir": str(out_dir)}


def default_jobs(n: int) -> int:
    try:
        cores = len(os.sched_getaffinity(0))
    except AttributeError:
        cores = os.cpu_count() or 1
    return max(1, min(cores, n))


def run_sweep(cfg: RunConfig, axis: str, values: list, out_root: Path, jobs: int | None = None,
              figures: bool = True) -> list[dict]:
    """One isolated run per value with seed ``cfg.seed + i``; returns rows in value order."""
    sweep_dir = out_root / f"sweep_{axis}"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    points = []
    for i, value in enumerate(values):
        point = apply_axis(cfg, axis, value)
        point.seed = cfg.seed + i
        run_dir = sweep_dir / f"run_{i:02d}_{value}"
        point.output_dir = str(run_dir)
        points.append((point, axis, value, run_dir, figures))
    jobs = default_jobs(len(points)) if jobs is None else max(1, jobs)
    if jobs == 1:
        rows = [_sweep_point(p) for p in points]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_point, points))
    with open(sweep_dir / f"sweep_{axis}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "AA_percent": repr(r["AA_percent"]), "FM_percent": repr(r["FM_percent"]),
                        "wallclock_s": repr(r["wallclock_s"])})
    if figures:
        from .report import plot_sweep

        plot_sweep(axis, rows, sweep_dir / f"sweep_{axis}.png")
    return rows


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def format_table(axis: str, rows: list[dict]) -> str:
    lines = [f"{axis:>12}  {'AA':>7}  {'FM':>7}"]
    for r in rows:
        lines.append(f"{str(r['axis_value']):>12}  {r['AA_percent']:7.2f}  {r['FM_percent']:7.2f}")
    return "\n".join(lines)


# -- commands -------------------------------------------------------------------
def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = resolve_output_dir(args.output or cfg.output_dir)
    result = train_to_dir(cfg, out_dir, figures=not args.no_figures)
    print(f"AA {100 * result['AA']:.2f}  FM {100 * result['FM']:.2f}"
          + ("" if result["FM_defined"] else " (undefined, K=1)") + f"  -> {out_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    values = parse_axis_values(args.axis, args.values or DEFAULT_SWEEP_VALUES.get(args.axis, ""))
    cfg = load_config(args.config)
    out_root = resolve_output_dir(args.output or cfg.output_dir)
    rows = run_sweep(cfg, args.axis, values, out_root, args.jobs, figures=not args.no_figures)
    print(format_table(args.axis, rows))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_battery

    results = run_battery(args.seed)
    for r in results:
        print(f"{r.name:22s} {r.max_rel_error:.3e}  tol {r.tolerance:.0e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import build_tasks, model_dims
    from .trainer import evaluate

    cfg = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    tasks = build_tasks(cfg)
    if model_dims(cfg, tasks) != model.dims:
        raise ConfigError(f"checkpoint dims {model.dims} do not match the config")
    stats = tasks[0].stats
    accs = {j: evaluate(model, j, tasks[j - 1], stats) for j in model.prototypes.task_ids}
    for j, a in accs.items():
        print(f"task {j}: {100 * a:.2f}")
    print(json.dumps({"accuracy": {str(j): a for j, a in accs.items()},
                      "mean": float(np.mean(list(accs.values()))) if accs else 0.0}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pah", description="Prototype-augmented hypernetworks for continual learning.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a full task sequence")
    t.add_argument("config")
    t.add_argument("--output", help="override output_dir")
    t.add_argument("--no-figures", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="one run per value of an ablation axis")
    s.add_argument("config")
    s.add_argument("--axis", required=True)
    s.add_argument("--values", help="comma separated; defaults to the published value set")
    s.add_argument("--jobs", type=int, default=None)
    s.add_argument("--output", help="override output_dir")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gradcheck", help="finite-difference battery at 64-bit")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the config's test splits")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    from .trainer import DivergenceError

    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        if getattr(args, "config", None) and Path(exc.filename or "") == Path(args.config):
            print(f"error: config not found: {exc.filename}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
