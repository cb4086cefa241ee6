"""End-to-end training checks (criteria 6, 7, 8 and 10 of ``intpinn verify``).

Each check runs one of the bundled experiment configs through the same code
path as ``intpinn run``.  Finished runs are reused when their manifest
records the same config hash and the same training-code digest, so a second
``verify endtoend`` only recomputes what changed.
"""

from __future__ import annotations

import filecmp
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import nn
from .cli import cached_manifest, read_metrics, run_experiment
from .config import ExperimentConfig, load_config
from .problems import smol_ground_truth
from .suites import CriterionResult

CONFIGS = ("poisson2d", "poisson_stability", "smol", "repro")
MONOTONE_TOL = 0.25  # allowed rise of the seed-mean eval curve above its running minimum


def config_path(name: str) -> Path:
    """Path of a bundled experiment config."""
    return Path(str(resources.files("intpinn") / "configs" / f"{name}.cfg"))


def load_bundled(name: str, out_dir) -> ExperimentConfig:
    cfg = load_config(config_path(name))
    cfg.output_dir = str(Path(out_dir) / name)
    cfg.sections["experiment"]["output_dir"] = cfg.output_dir
    return cfg


def ensure_runs(cfg: ExperimentConfig, workers: int | None = None) -> dict:
    """The manifest for ``cfg``, training only when no valid cached run exists."""
    return cached_manifest(cfg) or run_experiment(cfg, workers)


def _run_dir(cfg: ExperimentConfig, estimator: str, seed: int) -> Path:
    return Path(cfg.output_dir) / estimator / f"seed{seed}"


def collect(cfg: ExperimentConfig, estimator: str) -> list[dict[str, np.ndarray]]:
    return [read_metrics(_run_dir(cfg, estimator, s) / "metrics.csv") for s in cfg.seeds]


def wall_seconds(cfg: ExperimentConfig, estimator: str) -> float:
    """Summed training time over seeds, from the timing files."""
    total = 0.0
    for s in cfg.seeds:
        lines = (_run_dir(cfg, estimator, s) / "timing.csv").read_text().splitlines()
        total += float(lines[-1].split(",")[1]) / 1000.0
    return total


def final_mean(curves, metric: str = "eval_mse") -> float:
    return float(np.mean([c[metric][-1] for c in curves]))


def monotone_up_to_noise(values, tol: float = MONOTONE_TOL) -> tuple[bool, float]:
    """True when no value rises more than ``tol`` (relative) above the running minimum before it,
    and the last value is below the first.  Also returns the worst relative rise."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2 or not np.all(np.isfinite(v)):
        return False, float("inf")
    run_min = np.minimum.accumulate(v)
    rise = float(np.max(v[1:] / run_min[:-1] - 1.0))
    return bool(rise <= tol and v[-1] < v[0]), rise


# -- criterion 6 -------------------------------------------------------------------

def check_poisson(out_dir, workers=None) -> CriterionResult:
    t0 = time.perf_counter()
    cfg = load_bundled("poisson2d", out_dir)
    manifest = ensure_runs(cfg, workers)
    s1, s100, dt = (collect(cfg, n) for n in ("standard_n1", "standard_n100", "delayed_n1"))
    m1, m100, mdt = final_mean(s1), final_mean(s100), final_mean(dt)
    loss1, ev1 = final_mean(s1, "train_loss"), final_mean(s1, "excess_variance")
    walls = {n: wall_seconds(cfg, n) for n in cfg.estimators}
    checks = {
        "s100_below_s1": m100 < m1,
        "dt_within_1.5x_s100": mdt <= 1.5 * m100,
        "dt_below_half_s1": mdt < 0.5 * m1,
        "s1_loss_floor": loss1 >= 0.8 * ev1,
        "runtime": max(walls.values()) < 1800.0,
        "complete": bool(manifest["complete"]),
    }
    measured = {
        "standard_n1": m1,
        "standard_n100": m100,
        "delayed_n1": mdt,
        "dt/s100": mdt / m100,
        "dt/s1": mdt / m1,
        "s1_loss": loss1,
        "s1_excess_var": ev1,
        "max_method_wall_s": max(walls.values()),
        "failed_checks": [k for k, ok in checks.items() if not ok],
    }
    return CriterionResult(6, "2-D Poisson estimator ordering", all(checks.values()), measured, time.perf_counter() - t0)


# -- criterion 7 -------------------------------------------------------------------

def check_stability(out_dir, workers=None) -> CriterionResult:
    t0 = time.perf_counter()
    cfg = load_bundled("poisson_stability", out_dir)
    manifest = ensure_runs(cfg, workers)
    lam0, lam1 = collect(cfg, "delayed_lam0"), collect(cfg, "delayed_lam1")
    div0 = sum(bool(c["diverged"][-1]) for c in lam0)
    div1 = sum(bool(c["diverged"][-1]) for c in lam1)
    n = len(cfg.seeds)
    curve = None
    if div1 == 0:
        upto = [c["eval_mse"][c["epoch"] <= 5000] for c in lam1]
        k = min(len(u) for u in upto)
        curve = np.mean([u[:k] for u in upto], axis=0)
    mono, rise = monotone_up_to_noise(curve) if curve is not None else (False, float("inf"))
    checks = {"lam0_majority_diverged": div0 > n / 2, "lam1_none_diverged": div1 == 0, "lam1_monotone": mono, "complete": bool(manifest["complete"])}
    measured = {
        "lam0_diverged": f"{div0}/{n}",
        "lam1_diverged": f"{div1}/{n}",
        "lam1_mean_eval_start": float(curve[0]) if curve is not None else float("nan"),
        "lam1_mean_eval_end": float(curve[-1]) if curve is not None else float("nan"),
        "lam1_max_rise": rise,
        "failed_checks": [k for k, ok in checks.items() if not ok],
    }
    return CriterionResult(7, "delayed-target stability at M=1000", all(checks.values()), measured, time.perf_counter() - t0)


# -- criterion 8 -------------------------------------------------------------------

def final_time_change(coarse, fine) -> float:
    """Relative L2 change of the final-time density when both grids are refined."""
    a = coarse.density[-1]
    b = np.interp(coarse.x, fine.x, fine.density[-1])
    return float(np.linalg.norm(b - a) / np.linalg.norm(a))


def check_smol(out_dir, workers=None) -> CriterionResult:
    t0 = time.perf_counter()
    cfg = load_bundled("smol", out_dir)
    manifest = ensure_runs(cfg, workers)
    gt = cfg.ground_truth
    coarse = smol_ground_truth(cfg.problem, gt.n_x, gt.n_t)
    fine = smol_ground_truth(cfg.problem, 2 * gt.n_x, 2 * gt.n_t)
    change = final_time_change(coarse, fine)
    s1, s100, dt = (final_mean(collect(cfg, n)) for n in ("standard_n1", "standard_n100", "delayed_n1"))
    checks = {
        "ground_truth_converged": change < 0.01,
        "dt_below_s1": dt < s1,
        "dt_within_1.5x_s100": dt <= 1.5 * s100,
        "complete": bool(manifest["complete"]),
    }
    measured = {
        "grid_change": change,
        "standard_n1": s1,
        "standard_n100": s100,
        "delayed_n1": dt,
        "failed_checks": [k for k, ok in checks.items() if not ok],
    }
    return CriterionResult(8, "Smoluchowski ground truth and ordering", all(checks.values()), measured, time.perf_counter() - t0)


# -- criterion 10 ------------------------------------------------------------------

def check_reproducible(out_dir, workers=None) -> CriterionResult:
    """Run the short config twice from scratch; CSVs must match byte for byte and final parameters exactly.

    Checkpoints embed their own output directory, so they are compared by parameter values.
    """
    t0 = time.perf_counter()
    cfgs = []
    for tag in ("a", "b"):
        cfg = load_bundled("repro", Path(out_dir) / f"repro_{tag}")
        run_experiment(cfg, workers)
        cfgs.append(cfg)
    a, b = (Path(c.output_dir) for c in cfgs)
    files = ["summary.csv"] + [
        str(Path(est) / f"seed{s}" / f)
        for est in sorted(cfgs[0].estimators)
        for s in cfgs[0].seeds
        for f in ("metrics.csv", "volumes.csv")
    ]
    mismatched = [f for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
    for est in sorted(cfgs[0].estimators):
        for s in cfgs[0].seeds:
            f = Path(est) / f"seed{s}" / "checkpoint.json"
            if not np.array_equal(nn.load_checkpoint(a / f)[0].flat, nn.load_checkpoint(b / f)[0].flat):
                mismatched.append(str(f))
    shared = [
        filecmp.cmp(_run_dir(cfgs[0], e, s) / "volumes.csv", _run_dir(cfgs[0], first, s) / "volumes.csv", shallow=False)
        for s in cfgs[0].seeds
        for first in [sorted(cfgs[0].estimators)[0]]
        for e in sorted(cfgs[0].estimators)
    ]
    passed = not mismatched and all(shared)
    measured = {"files_compared": len(files), "mismatched": mismatched, "seed_matched_volume_logs_equal": all(shared)}
    return CriterionResult(10, "byte-identical reruns", passed, measured, time.perf_counter() - t0)


def suite_endtoend(out_dir=None, workers=None) -> list[CriterionResult]:
    out_dir = Path(out_dir) if out_dir is not None else Path("verify-out")
    return [
        check_poisson(out_dir, workers),
        check_stability(out_dir, workers),
        check_smol(out_dir, workers),
        check_reproducible(out_dir, workers),
    ]
