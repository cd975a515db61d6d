# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Personalized PageRank by power iteration and its D-mode PARW realization."""

import logging
from enum import Enum

import numpy as np
from pydantic import BaseModel, Field

from graph_core import BipartiteGraph
from parw_solver import (
    DEFAULT_DENSE_CAP,
    ScoreVector,
    SeedVector,
    SolverError,
    solve_exact,
)

logger = logging.getLogger(__name__)


class DanglingVertexError(SolverError):
    """Exception raised when the random walk would reach a vertex without edges."""


class Teleport(str, Enum):
    """Represent the restart distributions.

    Attributes:
        MIXED: half uniform over all vertices, half on the seeds.
        SEED_ONLY: all restart mass on the seeds.
    """

    MIXED = "mixed_half_uniform_half_seed"
    SEED_ONLY = "seed_only"


class PPRConfig(BaseModel):
    """Represent the power iteration settings.

    Attributes:
        alpha: decay factor, the probability of following an edge.
        teleport: restart distribution.
        tol: L1 change below which the iteration stops.
        max_iters: iteration cap.
    """

    alpha: float = Field(..., gt=0, lt=1)
    teleport: Teleport = Teleport.MIXED
    tol: float = Field(default=1e-10, gt=0)
    max_iters: int = Field(default=10_000, ge=1)


def decay_for_dmode(beta: float) -> float:
    """Return the decay factor equivalent to D-mode rates beta times degree."""
    return 1.0 / (1.0 + beta)


def beta_for_decay(alpha: float) -> float:
    """Return the D-mode degree multiplier equivalent to a decay factor."""
    return (1.0 - alpha) / alpha


def _check_dangling(g: BipartiteGraph) -> None:
    """Reject graphs with zero-degree vertices.

    Args:
        g: the graph.

    Raises:
        DanglingVertexError: if a vertex has no edges.
    """
    if np.any(g.degrees == 0):
        raise DanglingVertexError("dangling vertex")


def mixed_seed(g: BipartiteGraph, seed: SeedVector) -> SeedVector:
    """Build the restart distribution half uniform, half on the seeds.

    Args:
        g: the graph.
        seed: the seed distribution.

    Returns:
        1/(2N) everywhere plus half of the seed mass.
    """
    values = 0.5 * (np.full(g.num_vertices, 1.0 / g.num_vertices) + seed.values)
    return SeedVector(values=values, seed_set=frozenset(range(1, g.num_vertices + 1)))


def ppr_iterate(g: BipartiteGraph, cfg: PPRConfig, seed: SeedVector) -> ScoreVector:
    """Iterate the personalized PageRank equation to its fixed point.

    Args:
        g: the graph, without zero-degree vertices.
        cfg: the iteration settings.
        seed: the seed distribution.

    Returns:
        The PageRank scores.
    """
    _check_dangling(g)
    if cfg.teleport == Teleport.MIXED:
        restart = (1.0 - cfg.alpha) * mixed_seed(g, seed).values
    else:
        restart = (1.0 - cfg.alpha) * seed.values
    adjacency = g.adjacency_matrix()
    inverse_degree = 1.0 / g.degrees.astype(np.float64)
    scores = seed.values.astype(np.float64).copy()
    change = np.inf
    iterations = 0
    while iterations < cfg.max_iters:
        iterations += 1
        updated = cfg.alpha * (adjacency @ (scores * inverse_degree)) + restart
        change = float(np.abs(updated - scores).sum())
        scores = updated
        if change <= cfg.tol:
            break
    if change > cfg.tol:
        logger.warning(
            "PageRank stopped after %d iterations with change %.3e", iterations, change
        )
    else:
        logger.debug("PageRank converged after %d iterations", iterations)
    return ScoreVector(values=scores)


def dmode_equivalent(
    g: BipartiteGraph,
    alpha: float,
    seed: SeedVector,
    dense_cap: int = DEFAULT_DENSE_CAP,
) -> ScoreVector:
    """Solve personalized PageRank exactly as D-mode PARW.

    Uses rates ((1 - alpha) / alpha) times degree and the mixed restart distribution.

    Args:
        g: the graph, without zero-degree vertices.
        alpha: decay factor in (0, 1).
        seed: the seed distribution.
        dense_cap: largest vertex count the oracle accepts.

    Returns:
        The exact PageRank scores.

    Raises:
        SolverError: if alpha is outside (0, 1).
    """
    if not 0 < alpha < 1:
        raise SolverError("decay factor must lie in (0, 1)")
    _check_dangling(g)
    rates = beta_for_decay(alpha) * g.degrees.astype(np.float64)
    return solve_exact(g, rates, mixed_seed(g, seed), dense_cap=dense_cap)
