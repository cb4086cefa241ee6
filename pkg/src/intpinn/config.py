"""Experiment configuration files.

Grammar (one item per line, ``#`` starts a comment)::

    [section]             section header
    [estimator.<name>]    one header per estimator in a sweep
    key = value           assignment inside the current section

Values are typed by the key: integers, floats, booleans (true/false), the
word ``none`` for optional values, strings, and comma-separated lists for
``seeds``.  Every section except ``estimator.*`` may appear once; unknown
sections or keys, duplicate keys and malformed lines are rejected with the
line number.

Sections and keys::

    [experiment]  name, seeds, output_dir
    [problem]     kind = poisson | maxwell | smol, then the problem's fields
    [network]     hidden_width, hidden_layers, activation
    [estimator.*] the EstimatorConfig fields
    [eval]        profile = poisson_robust | poisson_grid | maxwell_iid | smol_grid, then its fields
    [train]       the TrainSettings fields
    [ground_truth] n_x, n_t   (coagulation problems only)

The config hash is computed from the parsed, typed values, so reordering
keys or sections, comments and number formatting (``1e3`` vs ``1000.0``)
do not change it while any value change does.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import nn
from .evaluation import MaxwellIid, PoissonGrid, PoissonRobustGrid, SmolGrid
from .problems import MaxwellProblem, PoissonProblem, SmolProblem
from .trainers import EstimatorConfig, TrainSettings


class ConfigError(ValueError):
    """Invalid configuration; the message names the line and key."""


def _bool(v: str) -> bool:
    if v.lower() in ("true", "yes", "1"):
        return True
    if v.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true or false, got {v!r}")


def _optional(conv):
    return lambda v: None if v.lower() == "none" else conv(v)


def _seeds(v: str) -> list[int]:
    out = [int(s) for s in v.split(",") if s.strip()]
    if not out:
        raise ValueError("empty seed list")
    return out


def _int(v: str) -> int:
    x = float(v)
    if x != int(x):
        raise ValueError(f"expected an integer, got {v!r}")
    return int(x)


_PROBLEMS = {"poisson": PoissonProblem, "maxwell": MaxwellProblem, "smol": SmolProblem}
_PROBLEM_KEYS = {
    "poisson": {"dim": _int, "volume_profile": str},
    "maxwell": {"current": float},
    "smol": {
        "size_dim": _int,
        "kernel_scale": float,
        "kernel_cap": float,
        "kernel_power": float,
        "gain_factor": float,
        "ic_weight": float,
    },
}
_PROFILES = {
    "poisson_robust": (PoissonRobustGrid, {"q": _int, "s": _int, "t": _int}),
    "poisson_grid": (PoissonGrid, {"n": _int}),
    "maxwell_iid": (MaxwellIid, {"n": _int, "mean_subtract_only": _bool}),
    "smol_grid": (SmolGrid, {"stride_x": _int, "stride_t": _int}),
}
_SECTIONS = {
    "experiment": {"name": str, "seeds": _seeds, "output_dir": str},
    "network": {"hidden_width": _int, "hidden_layers": _int, "activation": str},
    "estimator": {
        "variant": str,
        "n_target": _int,
        "n_main": _int,
        "tau": float,
        "lam": float,
        "scale_m": _optional(float),
        "sampler": str,
        "evals_per_epoch": _int,
        "batch_volumes": _optional(_int),
        "epochs": _int,
        "lr": float,
    },
    "train": {
        "eval_every": _int,
        "excess_volumes": _int,
        "excess_draws": _int,
        "ic_points": _int,
        "drift_limit": float,
        "precision": str,
        "report": str,
    },
    "ground_truth": {"n_x": _int, "n_t": _int},
}

_HEADER = re.compile(r"^\[([a-z_]+)(?:\.([A-Za-z0-9_\-]+))?\]$")
_ASSIGN = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")


@dataclass(frozen=True)
class GroundTruthSpec:
    n_x: int = 1024
    n_t: int = 2048


@dataclass
class ExperimentConfig:
    name: str
    problem_kind: str
    problem: object
    network: nn.MlpConfig
    estimators: dict[str, EstimatorConfig]
    eval_profile: object
    settings: TrainSettings
    seeds: list[int]
    output_dir: str
    ground_truth: GroundTruthSpec = field(default_factory=GroundTruthSpec)
    sections: dict = field(default_factory=dict, repr=False)  # typed values, for hashing and checkpoints

    @property
    def hash(self) -> str:
        return config_hash(self.sections)


def config_hash(sections: dict) -> str:
    canon = json.dumps(sections, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _raw_sections(text: str) -> dict:
    """{section: {key: (value string, line number)}}, estimator sections keyed 'estimator.<name>'."""
    out: dict[str, dict] = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        m = _HEADER.match(line)
        if m:
            base, sub = m.group(1), m.group(2)
            if base not in _SECTIONS and base not in ("problem", "eval"):
                raise ConfigError(f"line {lineno}: unknown section [{base}]")
            if (base == "estimator") != (sub is not None):
                raise ConfigError(f"line {lineno}: only estimator sections take a name, as [estimator.<name>]")
            current = f"{base}.{sub}" if sub else base
            if current in out:
                raise ConfigError(f"line {lineno}: duplicate section [{current}]")
            out[current] = {}
            continue
        m = _ASSIGN.match(line)
        if not m:
            raise ConfigError(f"line {lineno}: expected 'key = value' or a [section] header, got {line!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key {m.group(1)!r} appears before any section")
        key, value = m.group(1), m.group(2).strip()
        if key in out[current]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{current}]")
        out[current][key] = (value, lineno)
    return out


def _typed(section: str, raw: dict, schema: dict) -> dict:
    out = {}
    for key, (value, lineno) in raw.items():
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        try:
            out[key] = schema[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r} in [{section}]: {exc}") from None
    return out


def _build(section: str, cls, kwargs: dict, raw: dict):
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        lines = sorted(ln for _, ln in raw.values())
        where = f"line {lines[0]}: " if lines else ""
        raise ConfigError(f"{where}invalid [{section}]: {exc}") from None


def parse_config(text: str) -> ExperimentConfig:
    raw = _raw_sections(text)
    for required in ("experiment", "problem", "network", "eval"):
        if required not in raw:
            raise ConfigError(f"missing section [{required}]")
    estimators = sorted(k for k in raw if k.startswith("estimator."))
    if not estimators:
        raise ConfigError("need at least one [estimator.<name>] section")

    sections: dict = {}
    exp = _typed("experiment", raw["experiment"], _SECTIONS["experiment"])
    for key in ("name", "seeds"):
        if key not in exp:
            raise ConfigError(f"[experiment] needs {key!r}")
    if len(set(exp["seeds"])) != len(exp["seeds"]):
        raise ConfigError(f"line {raw['experiment']['seeds'][1]}: seeds must be distinct")
    if any(s < 0 for s in exp["seeds"]):
        raise ConfigError(f"line {raw['experiment']['seeds'][1]}: seeds must be non-negative")
    exp.setdefault("output_dir", f"runs/{exp['name']}")
    sections["experiment"] = exp

    praw = dict(raw["problem"])
    if "kind" not in praw:
        raise ConfigError("[problem] needs 'kind'")
    kind, kline = praw.pop("kind")
    if kind not in _PROBLEMS:
        raise ConfigError(f"line {kline}: unknown problem kind {kind!r}; expected one of {sorted(_PROBLEMS)}")
    pvals = _typed("problem", praw, _PROBLEM_KEYS[kind])
    problem = _build("problem", _PROBLEMS[kind], pvals, praw)
    sections["problem"] = {"kind": kind, **pvals}

    nvals = _typed("network", raw["network"], _SECTIONS["network"])
    out_dim = 3 if kind == "maxwell" else 1
    network = _build("network", nn.MlpConfig, {"input_dim": problem.input_dim, "output_dim": out_dim, **nvals}, raw["network"])
    sections["network"] = nvals

    ests = {}
    for key in estimators:
        name = key.split(".", 1)[1]
        evals = _typed(key, raw[key], _SECTIONS["estimator"])
        ests[name] = _build(key, EstimatorConfig, evals, raw[key])
        if kind == "smol" and ests[name].variant == "deterministic":
            raise ConfigError(f"[{key}]: the coagulation problem only supports i.i.d. sampling")
        sections[key] = {f.name: getattr(ests[name], f.name) for f in fields(EstimatorConfig)}

    eraw = dict(raw["eval"])
    if "profile" not in eraw:
        raise ConfigError("[eval] needs 'profile'")
    pname, pline = eraw.pop("profile")
    if pname not in _PROFILES:
        raise ConfigError(f"line {pline}: unknown eval profile {pname!r}; expected one of {sorted(_PROFILES)}")
    pcls, pschema = _PROFILES[pname]
    profile = _build("eval", pcls, _typed("eval", eraw, pschema), eraw)
    sections["eval"] = {"profile": pname, **asdict(profile)}

    settings = _build("train", TrainSettings, _typed("train", raw.get("train", {}), _SECTIONS["train"]), raw.get("train", {}))
    sections["train"] = asdict(settings)
    gt = GroundTruthSpec(**_typed("ground_truth", raw.get("ground_truth", {}), _SECTIONS["ground_truth"]))
    if kind == "smol":
        sections["ground_truth"] = asdict(gt)
    elif "ground_truth" in raw:
        raise ConfigError("[ground_truth] only applies to the coagulation problem")

    return ExperimentConfig(
        name=exp["name"],
        problem_kind=kind,
        problem=problem,
        network=network,
        estimators=ests,
        eval_profile=profile,
        settings=settings,
        seeds=exp["seeds"],
        output_dir=exp["output_dir"],
        ground_truth=gt,
        sections=sections,
    )


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def from_sections(sections: dict) -> ExperimentConfig:
    """Rebuild a config from its typed sections (as stored in checkpoints and manifests)."""
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        for k, v in values.items():
            if isinstance(v, list):
                v = ", ".join(str(x) for x in v)
            elif v is None:
                v = "none"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
    return parse_config("\n".join(lines))
