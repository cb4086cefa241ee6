"""Batched integral residuals.

A residual for volume ``v`` has the form

    r_v = sum_{main k in v} c_k w_k q_k  -  sum_{target k in v} c_k w_k q_k  -  y_v

where ``q_k`` is a network-derived quantity at term ``k``.  The main side is
the ``f`` term of an integral identity and the target side is the Monte Carlo
(or quadrature) mean of ``g`` over ``N`` draws, so the target coefficients
already carry the ``1/N``.  Estimators only ever see this form.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .. import nn
from ..autodiff import Node, Tape

KINDS = ("directional", "curl", "product", "value")


@dataclass
class TermSet:
    """Terms of one side of a residual.

    ``points`` is (K, D) for every kind except ``product``, where it is
    (K, 2, D) and the quantity is the product of the scalar output at the two
    points.  ``directions`` is (K, D) for ``directional`` (derivative of output
    0 along it) and ``curl`` (curl of a 3-vector output dotted with it).
    """

    kind: str
    points: np.ndarray
    coef: np.ndarray
    volume: np.ndarray
    draw: np.ndarray
    directions: np.ndarray | None = None
    weight: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown quantity kind {self.kind!r}")
        self.points = np.asarray(self.points, dtype=np.float64)
        self.coef = np.asarray(self.coef, dtype=np.float64)
        self.volume = np.asarray(self.volume, dtype=np.int64)
        self.draw = np.asarray(self.draw, dtype=np.int64)
        if self.weight is None:
            self.weight = np.ones(self.coef.shape)
        k = self.coef.shape[0]
        for name in ("volume", "draw", "weight"):
            if getattr(self, name).shape != (k,):
                raise ValueError(f"TermSet.{name} must have shape ({k},)")
        if self.points.shape[0] != k:
            raise ValueError("points and coefficients disagree in length")
        if self.kind in ("directional", "curl") and (self.directions is None or self.directions.shape != self.points.shape):
            raise ValueError(f"{self.kind} terms need one direction per point")

    def __len__(self):
        return self.coef.shape[0]

    @property
    def factor(self) -> np.ndarray:
        return self.coef * self.weight

    def subset(self, mask) -> "TermSet":
        mask = np.asarray(mask)
        return TermSet(
            self.kind,
            self.points[mask],
            self.coef[mask],
            self.volume[mask],
            self.draw[mask],
            None if self.directions is None else self.directions[mask],
            self.weight[mask],
        )

    def scaled(self, c: float) -> "TermSet":
        return replace(self, coef=self.coef * c)

    @staticmethod
    def empty(kind: str, dim: int) -> "TermSet":
        shape = (0, 2, dim) if kind == "product" else (0, dim)
        dirs = np.zeros((0, dim)) if kind in ("directional", "curl") else None
        return TermSet(kind, np.zeros(shape), np.zeros(0), np.zeros(0, int), np.zeros(0, int), dirs)


@dataclass
class ResidualSample:
    main: TermSet
    target: TermSet
    label: np.ndarray
    scale_M: float
    n_main: int
    n_target: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.label = np.atleast_1d(np.asarray(self.label, dtype=np.float64))
        if len(self.main) == 0:
            raise ValueError("a residual needs at least one main term")

    @property
    def n_volumes(self) -> int:
        return self.label.shape[0]

    @property
    def n_evaluations(self) -> int:
        """Surface/size points touched, the unit of compute matching."""
        return len(self.main) + len(self.target)

    def target_halves(self) -> tuple[TermSet, TermSet]:
        """Two independent target sets, each a full-weight estimate of E[g]."""
        if self.n_target < 2 or self.n_target % 2:
            raise ValueError("double sampling needs an even number (>= 2) of target draws")
        half = self.n_target // 2
        first = self.target.draw < half
        return self.target.subset(first).scaled(2.0), self.target.subset(~first).scaled(2.0)


# -- quantity evaluation ---------------------------------------------------------

def _curl_layout(terms: TermSet):
    """Stacked points, unit tangents and contraction weights for curl . t."""
    k = len(terms)
    t = terms.directions
    pts = np.tile(terms.points, (3, 1))
    tang = np.repeat(np.eye(3), k, axis=0)
    # C[k, i] with (curl A) . t = sum_{k,i} C[k, i] dA_i/dx_k
    zero = np.zeros(k)
    c = np.stack(
        [
            np.stack([zero, t[:, 2], -t[:, 1]], axis=1),
            np.stack([-t[:, 2], zero, t[:, 0]], axis=1),
            np.stack([t[:, 1], -t[:, 0], zero], axis=1),
        ]
    ).reshape(3 * k, 3)
    rows = np.tile(np.arange(k), 3)
    return pts, tang, c, rows


def quantity(params: nn.MlpParams, terms: TermSet) -> np.ndarray:
    """Per-term quantity with plain numpy (no tape)."""
    if len(terms) == 0:
        return np.zeros(0)
    if terms.kind == "directional":
        return nn.eval_with_tangent(params, terms.points, terms.directions).tangent[:, 0]
    if terms.kind == "curl":
        pts, tang, c, rows = _curl_layout(terms)
        jac = nn.eval_with_tangent(params, pts, tang).tangent
        return np.bincount(rows, weights=np.sum(jac * c, axis=1), minlength=len(terms))
    if terms.kind == "product":
        k = len(terms)
        out = nn.forward(params, terms.points.transpose(1, 0, 2).reshape(2 * k, -1))[:, 0]
        return out[:k] * out[k:]
    return nn.forward(params, terms.points)[:, 0]


def tape_quantity(tape: Tape, config: nn.MlpConfig, nodes: list[Node], terms: TermSet) -> Node:
    """Per-term quantity recorded on ``tape``."""
    if terms.kind == "directional":
        x = tape.constant(terms.points, tangent=terms.directions)
        return tape.column(tape.tangent_of(nn.apply(tape, config, nodes, x)), 0)
    if terms.kind == "curl":
        pts, tang, c, rows = _curl_layout(terms)
        jac = tape.tangent_of(nn.apply(tape, config, nodes, tape.constant(pts, tangent=tang)))
        return tape.segment_sum(tape.sum(tape.mul(jac, c), axis=1), np.ones(rows.size), rows, len(terms))
    if terms.kind == "product":
        k = len(terms)
        x = tape.constant(terms.points.transpose(1, 0, 2).reshape(2 * k, -1))
        out = tape.column(nn.apply(tape, config, nodes, x), 0)
        return tape.mul(tape.take(out, np.arange(k)), tape.take(out, np.arange(k, 2 * k)))
    return tape.column(nn.apply(tape, config, nodes, tape.constant(terms.points)), 0)


def side_sums(params: nn.MlpParams, terms: TermSet, n_volumes: int) -> np.ndarray:
    """Per-volume weighted sums of one side, numpy."""
    return np.bincount(terms.volume, weights=terms.factor * quantity(params, terms), minlength=n_volumes)


def tape_side_sums(tape: Tape, config, nodes, terms: TermSet, n_volumes: int) -> Node:
    if len(terms) == 0:
        return tape.constant(np.zeros(n_volumes))
    return tape.segment_sum(tape_quantity(tape, config, nodes, terms), terms.factor, terms.volume, n_volumes)


def residual_values(params: nn.MlpParams, sample: ResidualSample, target_params: nn.MlpParams | None = None) -> np.ndarray:
    """r_v with both sides evaluated by numpy (target side optionally by another net)."""
    tp = params if target_params is None else target_params
    f = side_sums(params, sample.main, sample.n_volumes)
    g = side_sums(tp, sample.target, sample.n_volumes)
    return f - g - sample.label


def per_draw_estimates(params: nn.MlpParams, sample: ResidualSample) -> np.ndarray:
    """Target-side estimate of E[g] from each single draw, shape (V, N)."""
    n = sample.n_target
    t = sample.target
    contrib = t.factor * quantity(params, t) * n
    out = np.zeros(sample.n_volumes * n)
    np.add.at(out, t.volume * n + t.draw, contrib)
    return out.reshape(sample.n_volumes, n)
