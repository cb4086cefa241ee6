"""Benchmark problems assembled into the common residual form."""

import numpy as np

from .maxwell import MaxwellProblem, maxwell_analytic, maxwell_residual, segment_field, template_segment_field
from .poisson import PoissonProblem, SingularityError, centered_charge, poisson_analytic, poisson_residual
from .residual import ResidualSample, TermSet, quantity, residual_values, tape_quantity
from .smoluchowski import (
    GroundTruthGrid,
    IntegrationUnstable,
    SmolProblem,
    initial_condition_loss,
    smol_ground_truth,
    smol_kernel,
    smol_residual,
)

__all__ = [
    "assemble",
    "evals_per_volume",
    "tile_volumes",
    "GroundTruthGrid",
    "IntegrationUnstable",
    "MaxwellProblem",
    "PoissonProblem",
    "ResidualSample",
    "SingularityError",
    "SmolProblem",
    "TermSet",
    "centered_charge",
    "initial_condition_loss",
    "maxwell_analytic",
    "maxwell_residual",
    "poisson_analytic",
    "poisson_residual",
    "quantity",
    "residual_values",
    "segment_field",
    "smol_ground_truth",
    "smol_kernel",
    "smol_residual",
    "tape_quantity",
    "template_segment_field",
]


def assemble(problem, volumes, sampler, n_main: int, n_target: int, rng, scale_m=None) -> ResidualSample:
    """Dispatch residual assembly on the problem family."""
    if isinstance(problem, PoissonProblem):
        return poisson_residual(problem, volumes, sampler, n_main, n_target, rng, scale_m)
    if isinstance(problem, MaxwellProblem):
        return maxwell_residual(problem, volumes, sampler, n_main, n_target, rng, scale_m)
    if isinstance(problem, SmolProblem):
        if sampler is not None and sampler.deterministic:
            raise ValueError("the coagulation integrals only support i.i.d. sampling")
        return smol_residual(problem, volumes[0], volumes[1], n_main, n_target, rng)
    raise TypeError(f"unknown problem type {type(problem).__name__}")


def tile_volumes(volumes, k: int):
    """Each volume repeated ``k`` times, draw-major: index = draw * V + v."""
    return tuple(np.concatenate([np.asarray(a)] * k) for a in volumes)


def evals_per_volume(problem, n_main: int, n_target: int) -> int:
    """Network evaluations one residual costs (each product term evaluates twice)."""
    if isinstance(problem, SmolProblem):
        return n_main + 4 * n_target
    return n_main + n_target
