"""Multilayer perceptrons, Adam, and the main/target parameter pair."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Node, Tape

ACTIVATIONS = ("silu", "tanh", "relu")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    output_dim: int = 1
    hidden_width: int = 64
    hidden_layers: int = 3
    activation: str = "silu"

    def __post_init__(self):
        for name in ("input_dim", "output_dim", "hidden_width", "hidden_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"MlpConfig.{name} must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum((fi + 1) * fo for fi, fo in self.layer_dims)


@dataclass
class MlpParams:
    """Flat parameter vector; each layer stores W (fan_in x fan_out) row-major, then b."""

    config: MlpConfig
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.config.n_params,):
            raise ValueError(f"expected {self.config.n_params} parameters, got {self.flat.shape}")

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out, k = [], 0
        for fi, fo in self.config.layer_dims:
            w = self.flat[k : k + fi * fo].reshape(fi, fo)
            k += fi * fo
            b = self.flat[k : k + fo]
            k += fo
            out.append((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.config, self.flat.copy())


def init(config: MlpConfig, seed) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    parts = []
    for fi, fo in config.layer_dims:
        limit = np.sqrt(6.0 / (fi + fo))
        parts.append(rng.uniform(-limit, limit, size=fi * fo))
        parts.append(np.zeros(fo))
    return MlpParams(config, np.concatenate(parts))


# -- plain numpy evaluation --------------------------------------------------

def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "silu":
        return z * (0.5 * (1.0 + np.tanh(0.5 * z)))
    return np.maximum(z, 0.0)


def _act_d(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "silu":
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        return s * (1.0 + z * (1.0 - s))
    return (z > 0).astype(np.float64)


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != params.config.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} != network input_dim {params.config.input_dim}")
    return x


def forward(params: MlpParams, x) -> np.ndarray:
    """Network outputs for a batch of points, shape (B, output_dim)."""
    h = _check_input(params, x)
    layers = params.layers()
    for w, b in layers[:-1]:
        h = _act(params.config.activation, h @ w + b)
    w, b = layers[-1]
    return h @ w + b


@dataclass(frozen=True)
class DualValue:
    value: np.ndarray
    tangent: np.ndarray


def eval_with_tangent(params: MlpParams, x, v) -> DualValue:
    """Outputs and their exact directional derivatives along ``v``.

    ``v`` is broadcast against ``x``; callers normalise it.
    """
    h = _check_input(params, x)
    ht = np.broadcast_to(np.asarray(v, dtype=np.float64), h.shape)
    layers = params.layers()
    act = params.config.activation
    for w, b in layers[:-1]:
        z = h @ w + b
        zt = ht @ w
        h = _act(act, z)
        ht = _act_d(act, z, h) * zt
    w, b = layers[-1]
    return DualValue(h @ w + b, ht @ w)


# -- taped evaluation --------------------------------------------------------

def param_nodes(tape: Tape, params: MlpParams, trainable: bool = True) -> list[Node]:
    """Leaves for every layer's weight and bias, in flat-vector order (tape dtype)."""
    leaf = tape.variable if trainable else tape.constant
    nodes = []
    for w, b in params.layers():
        nodes.append(leaf(w))
        nodes.append(leaf(b))
    return nodes


def apply(tape: Tape, config: MlpConfig, nodes: list[Node], x: Node) -> Node:
    """Taped forward pass; ``x`` may carry a tangent (input direction)."""
    if x.shape[-1] != config.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} != network input_dim {config.input_dim}")
    act = getattr(tape, config.activation)
    h = x
    n_layers = len(nodes) // 2
    for i in range(n_layers):
        h = tape.add(tape.matmul(h, nodes[2 * i]), nodes[2 * i + 1])
        if i < n_layers - 1:
            h = act(h)
    return h


# -- optimisation ------------------------------------------------------------

class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    n_params: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)


def adam_step(state: AdamState, params: MlpParams, grad: np.ndarray) -> MlpParams:
    """One bias-corrected Adam update; mutates ``state``, returns new params."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.flat.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.flat.shape}")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise NonFiniteGradient(f"non-finite gradient in {bad.size} entries (first index {bad[0]}) at step {state.step + 1}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return MlpParams(params.config, params.flat - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))


@dataclass
class TargetPair:
    main: MlpParams
    target: MlpParams
    tau: float

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.main.config != self.target.config:
            raise ValueError("main and target networks have different topologies")

    @classmethod
    def from_params(cls, params: MlpParams, tau: float) -> "TargetPair":
        return cls(params.copy(), params.copy(), tau)


def polyak_update(pair: TargetPair) -> TargetPair:
    """target <- tau * target + (1 - tau) * main."""
    if pair.main.config != pair.target.config:
        raise ValueError("main and target networks have different topologies")
    tau = pair.tau
    flat = tau * pair.target.flat + (1.0 - tau) * pair.main.flat
    return TargetPair(pair.main, MlpParams(pair.target.config, flat), tau)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params: MlpParams, extra: dict | None = None) -> None:
    """JSON checkpoint; floats are written with repr so they round-trip exactly."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "extra": extra or {},
        "flat": [float(v) for v in params.flat],
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[MlpParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    config = MlpConfig(**doc["config"])
    return MlpParams(config, np.array(doc["flat"], dtype=np.float64)), doc.get("extra", {})
