"""Command-line entry point: ``intpinn run|plot|eval|verify``.

Run directory layout (one directory per estimator and seed)::

    <output_dir>/manifest.json
    <output_dir>/summary.csv
    <output_dir>/<estimator>/seed<k>/metrics.csv      fixed columns, see METRIC_COLUMNS
    <output_dir>/<estimator>/seed<k>/timing.csv       epoch, wall_ms
    <output_dir>/<estimator>/seed<k>/volumes.csv      first training volumes
    <output_dir>/<estimator>/seed<k>/checkpoint.json  final main network

``metrics.csv`` holds only quantities that are a deterministic function of
the config and seed, so reruns reproduce it byte for byte; wall-clock times
go to ``timing.csv``.  Seeds run on a pool of ``INTPINN_WORKERS`` processes
(default 1).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, nn
from .config import ConfigError, ExperimentConfig, from_sections, load_config
from .evaluation import make_evaluator, maxwell_curl_eval, maxwell_points
from .problems import MaxwellProblem, SmolProblem, smol_ground_truth
from .problems.smoluchowski import GroundTruthGrid
from .streams import stream
from .trainers import drift_points, train

METRIC_COLUMNS = ("epoch", "train_loss", "excess_variance", "eval_mse", "diverged")
TIMING_COLUMNS = ("epoch", "wall_ms")
SUMMARY_COLUMNS = (
    "estimator",
    "seed",
    "final_epoch",
    "final_eval_mse",
    "best_epoch",
    "best_eval_mse",
    "final_train_loss",
    "final_excess_variance",
    "diverged",
)
WORKERS_ENV = "INTPINN_WORKERS"
_SOURCES = ("autodiff.py", "nn.py", "geometry.py", "streams.py", "trainers.py", "evaluation.py", "problems")


def code_digest() -> str:
    """Digest of the modules that determine training results (for cache validation)."""
    root = Path(__file__).parent
    h = hashlib.sha256(__version__.encode())
    for name in _SOURCES:
        p = root / name
        for f in sorted(p.rglob("*.py")) if p.is_dir() else [p]:
            h.update(f.relative_to(root).as_posix().encode())
            h.update(f.read_bytes())
    return h.hexdigest()[:16]


def _num(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_num(v) if not isinstance(v, str) else v for v in row])


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != METRIC_COLUMNS:
        raise ValueError(f"{path}: not a metrics file (expected columns {','.join(METRIC_COLUMNS)})")
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(METRIC_COLUMNS))
    return {c: data[:, i] for i, c in enumerate(METRIC_COLUMNS)}


# -- run -------------------------------------------------------------------------

def ground_truth_path(cfg: ExperimentConfig) -> Path:
    p = cfg.sections["problem"]
    key = hashlib.sha256(json.dumps([p, cfg.sections.get("ground_truth")], sort_keys=True).encode()).hexdigest()[:12]
    return Path(cfg.output_dir) / f"ground_truth_{key}.npz"


def ensure_ground_truth(cfg: ExperimentConfig) -> GroundTruthGrid | None:
    if not isinstance(cfg.problem, SmolProblem):
        return None
    path = ground_truth_path(cfg)
    if path.exists():
        return GroundTruthGrid.load(path)
    grid = smol_ground_truth(cfg.problem, cfg.ground_truth.n_x, cfg.ground_truth.n_t)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid.save(path)
    return grid


def run_one(sections: dict, estimator: str, seed: int, out_dir: str, grid_path: str | None) -> dict:
    """Train one (estimator, seed) pair and write its files."""
    cfg = from_sections(sections)
    est = cfg.estimators[estimator]
    grid = GroundTruthGrid.load(grid_path) if grid_path else None
    evaluator = make_evaluator(cfg.problem, cfg.eval_profile, stream(seed, "eval"), grid)
    drift = drift_points(cfg.problem, cfg.eval_profile, seed) if est.variant == "delayed_target" else None
    result = train(cfg.problem, cfg.network, est, seed, evaluator, cfg.settings, drift)
    d = Path(out_dir) / estimator / f"seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    recs = result.records
    write_csv(d / "metrics.csv", METRIC_COLUMNS, [(r.epoch, r.train_loss, r.excess_variance, r.eval_mse, r.diverged) for r in recs])
    write_csv(d / "timing.csv", TIMING_COLUMNS, [(r.epoch, r.wall_ms) for r in recs])
    vols = np.asarray(result.volume_log, dtype=np.float64)
    write_csv(d / "volumes.csv", [f"v{j}" for j in range(vols.shape[1] if vols.size else 0)], vols.tolist())
    extra = {"sections": sections, "estimator": estimator, "seed": seed, "epoch": recs[-1].epoch, "ground_truth": grid_path}
    nn.save_checkpoint(d / "checkpoint.json", result.params, extra)
    if result.main is not None:
        nn.save_checkpoint(d / "main.json", result.main, extra)
    finite = [r for r in recs if math.isfinite(r.eval_mse)]
    best = min(finite, key=lambda r: (r.eval_mse, r.epoch)) if finite else recs[-1]
    return {
        "estimator": estimator,
        "seed": seed,
        "status": "complete",
        "diverged": result.diverged,
        "reason": result.reason,
        "files": {k: str(d / f"{k}.{ext}") for k, ext in (("metrics", "csv"), ("timing", "csv"), ("volumes", "csv"), ("checkpoint", "json"))},
        "summary": [estimator, seed, recs[-1].epoch, recs[-1].eval_mse, best.epoch, best.eval_mse, recs[-1].train_loss, recs[-1].excess_variance, result.diverged],
    }


def _run_job(args) -> dict:
    try:
        return run_one(*args)
    except Exception as exc:  # reported in the manifest; other seeds continue
        return {"estimator": args[1], "seed": args[2], "status": "failed", "error": f"{type(exc).__name__}: {exc}"}


def workers_from_env() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return n


def run_experiment(cfg: ExperimentConfig, workers: int | None = None, estimators=None) -> dict:
    """Every (estimator, seed) pair of ``cfg``; returns the manifest (also written to disk)."""
    workers = workers_from_env() if workers is None else workers
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = ensure_ground_truth(cfg)
    grid_path = str(ground_truth_path(cfg)) if grid is not None else None
    names = sorted(cfg.estimators) if estimators is None else list(estimators)
    jobs = [(cfg.sections, name, seed, str(out), grid_path) for name in names for seed in cfg.seeds]
    if workers == 1:
        results = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    done = [r for r in results if r["status"] == "complete"]
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, [r["summary"] for r in done])
    manifest = {
        "name": cfg.name,
        "config_hash": cfg.hash,
        "code_version": __version__,
        "code_digest": code_digest(),
        "sections": cfg.sections,
        "runs": [{k: v for k, v in r.items() if k != "summary"} for r in results],
        "complete": len(done) == len(results),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def cached_manifest(cfg: ExperimentConfig) -> dict | None:
    """The manifest of a finished run of exactly this config and training code, if any."""
    path = Path(cfg.output_dir) / "manifest.json"
    if not path.exists():
        return None
    m = json.loads(path.read_text())
    if m.get("config_hash") != cfg.hash or m.get("code_digest") != code_digest() or not m.get("complete"):
        return None
    return m


# -- plot ------------------------------------------------------------------------

def aggregate(curves: list[dict[str, np.ndarray]], metric: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and standard error over seeds at each epoch (seeds that stopped early drop out)."""
    values: dict[int, list[float]] = {}
    for c in curves:
        for e, v in zip(c["epoch"], c[metric]):
            if math.isfinite(v):
                values.setdefault(int(e), []).append(float(v))
    epochs = np.array(sorted(values))
    mean = np.array([np.mean(values[e]) for e in epochs])
    se = np.array([np.std(values[e], ddof=1) / math.sqrt(len(values[e])) if len(values[e]) > 1 else 0.0 for e in epochs])
    return epochs, mean, se


def load_runs(run_dir) -> dict[str, list[dict[str, np.ndarray]]]:
    runs: dict[str, list] = {}
    for path in sorted(Path(run_dir).glob("*/seed*/metrics.csv")):
        runs.setdefault(path.parent.parent.name, []).append(read_metrics(path))
    return runs


def plot_runs(run_dir, out_dir=None, log_scale: bool = True) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = load_runs(run_dir)
    if not runs:
        raise FileNotFoundError(f"no metrics.csv files under {run_dir}")
    out = Path(out_dir) if out_dir else Path(run_dir) / "plots"
    out.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "intpinn"
    written = []
    for metric, overlay in (("eval_mse", None), ("train_loss", "excess_variance")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for i, (name, curves) in enumerate(sorted(runs.items())):
            color = f"C{i % 10}"
            ep, mean, se = aggregate(curves, metric)
            ax.plot(ep, mean, color=color, label=name)
            if len(curves) > 1:
                ax.fill_between(ep, mean - se, mean + se, color=color, alpha=0.25, linewidth=0)
            if overlay:
                ep2, m2, _ = aggregate(curves, overlay)
                ax.plot(ep2, m2, color=color, linestyle="--", label=f"{name} ({overlay})")
        if log_scale:
            ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel(metric)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"{metric}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written


# -- eval ------------------------------------------------------------------------

def eval_checkpoint(path) -> dict:
    params, extra = nn.load_checkpoint(path)
    if "sections" not in extra:
        raise ValueError(f"{path}: checkpoint lacks its experiment config")
    cfg = from_sections(extra["sections"])
    seed = int(extra["seed"])
    grid = GroundTruthGrid.load(extra["ground_truth"]) if extra.get("ground_truth") else None
    evaluator = make_evaluator(cfg.problem, cfg.eval_profile, stream(seed, "eval"), grid)
    report = {"checkpoint": str(path), "estimator": extra.get("estimator"), "seed": seed, "epoch": extra.get("epoch"), "eval_mse": evaluator(params)}
    if isinstance(cfg.problem, MaxwellProblem):
        pts = maxwell_points(cfg.eval_profile.n, stream(seed, "eval-curl"))
        report["curl_mse"] = maxwell_curl_eval(params, cfg.problem, pts)
    return report


# -- entry point -------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="intpinn", description="Integral-loss PINN experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="train every estimator and seed of a config")
    p.add_argument("config")
    p.add_argument("--output-dir", help="override [experiment] output_dir")
    p = sub.add_parser("plot", help="SVG training curves for a run directory")
    p.add_argument("dir")
    p.add_argument("--out", help="output directory (default <dir>/plots)")
    p.add_argument("--linear", action="store_true", help="linear instead of log y axis")
    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p = sub.add_parser("verify", help="run an acceptance suite")
    p.add_argument("suite")
    p.add_argument("--out", default="verify-out", help="directory for the report and CSV artifacts")
    args = parser.parse_args(argv)

    if args.command == "run":
        try:
            cfg = load_config(args.config)
            if args.output_dir:
                cfg.output_dir = args.output_dir
                cfg.sections["experiment"]["output_dir"] = args.output_dir
            manifest = run_experiment(cfg)
        except (ConfigError, FileNotFoundError) as exc:
            print(f"error: {args.config}: {exc}", file=sys.stderr)
            return 2
        for r in manifest["runs"]:
            extra = r.get("reason") or r.get("error") or ""
            print(f"{r['estimator']} seed {r['seed']}: {r['status']}{' (diverged)' if r.get('diverged') else ''} {extra}".rstrip())
        return 0 if manifest["complete"] else 1

    if args.command == "plot":
        try:
            for path in plot_runs(args.dir, args.out, log_scale=not args.linear):
                print(path)
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0

    if args.command == "eval":
        try:
            print(json.dumps(eval_checkpoint(args.checkpoint), indent=2))
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0

    from .suites import SUITES, as_dict, run_suite

    if args.suite not in SUITES:
        print(f"error: unknown suite {args.suite!r}; expected one of {', '.join(SUITES)}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_suite(args.suite, out)
    report = {"suite": args.suite, "passed": all(r.passed for r in results), "criteria": [as_dict(r) for r in results]}
    path = out / f"{args.suite}.json"
    path.write_text(json.dumps(report, indent=2))
    for r in results:
        print(r.line())
    print(f"report: {path}")
    return 0 if report["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
