# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Partially absorbing random walk scores: dense oracle, queue push and synchronous sweep."""

import itertools
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, TextIO, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy import linalg, sparse

from graph_core import BipartiteGraph

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.01
DEFAULT_GAMMA = 1e-8
DEFAULT_SWEEP_ITERATIONS = 20
DEFAULT_DENSE_CAP = 5000


class SolverError(Exception):
    """Exception raised when a score computation cannot proceed.

    Attributes:
        msg (str): Explanation of the error.
    """

    def __init__(self, msg: str):
        """Initialize a new instance of the SolverError exception.

        Args:
            msg (str): Explanation of the error.
        """
        super().__init__(msg)
        self.msg = msg


class OracleSizeExceededError(SolverError):
    """Exception raised when the dense oracle is asked to solve a graph above its cap."""


class LambdaMode(str, Enum):
    """Represent the absorption-rate variants.

    Attributes:
        IMODE: constant rate alpha on every vertex.
        DMODE: rate beta times the vertex degree.
        CUSTOM: explicit per-vertex rates.
    """

    IMODE = "i"
    DMODE = "d"
    CUSTOM = "custom"


class PushMode(str, Enum):
    """Represent the queue push variants.

    Attributes:
        CONSERVATIVE: threshold checked before a vertex is processed.
        FAITHFUL: absorb first, drop the sub-threshold remainder.
    """

    CONSERVATIVE = "conservative"
    FAITHFUL = "faithful"


class LambdaSpec(BaseModel):
    """Represent the absorption-rate diagonal.

    Attributes:
        mode: the variant.
        alpha: constant rate for IMODE.
        beta: degree multiplier for DMODE.
        values: per-vertex rates for CUSTOM.
    """

    mode: LambdaMode
    alpha: Optional[float] = Field(default=None, gt=0)
    beta: Optional[float] = Field(default=None, gt=0)
    values: Optional[Tuple[float, ...]] = None

    @model_validator(mode="after")
    def _check_variant(self) -> "LambdaSpec":
        """Require the parameter matching the variant.

        Returns:
            the validated spec.

        Raises:
            ValueError: if the variant parameter is missing or not positive.
        """
        if self.mode == LambdaMode.IMODE and self.alpha is None:
            raise ValueError("alpha is required for I-mode")
        if self.mode == LambdaMode.DMODE and self.beta is None:
            raise ValueError("beta is required for D-mode")
        if self.mode == LambdaMode.CUSTOM:
            if self.values is None:
                raise ValueError("values are required for custom rates")
            if any(not value > 0 for value in self.values):
                raise ValueError("custom rates must be strictly positive")
        return self

    @classmethod
    def imode(cls, alpha: float = DEFAULT_ALPHA) -> "LambdaSpec":
        """Build an I-mode spec (constant alpha)."""
        return cls(mode=LambdaMode.IMODE, alpha=alpha)

    @classmethod
    def dmode(cls, beta: float) -> "LambdaSpec":
        """Build a D-mode spec (beta times degree)."""
        return cls(mode=LambdaMode.DMODE, beta=beta)

    @classmethod
    def custom(cls, values: Iterable[float]) -> "LambdaSpec":
        """Build a spec from explicit per-vertex rates."""
        return cls(mode=LambdaMode.CUSTOM, values=tuple(values))


@dataclass(frozen=True, eq=False)
class SeedVector:
    """Start distribution of the walk.

    Attributes:
        values: per-vertex start mass summing to 1, indexed by vertex_id - 1.
        seed_set: support of the distribution as vertex IDs.
    """

    values: np.ndarray
    seed_set: FrozenSet[int]


@dataclass(frozen=True, eq=False)
class ScoreVector:
    """Dense per-vertex scores, indexed by vertex_id - 1.

    Attributes:
        values: the scores.
    """

    values: np.ndarray

    def score(self, vid: int) -> float:
        """Return the score of one vertex."""
        return float(self.values[vid - 1])


@dataclass
class PushState:  # pylint: disable=too-many-instance-attributes
    """Paired run/dry mass of the approximate algorithms.

    Attributes:
        run: pending mass keyed by vertex ID (positive entries only).
        dry: absorbed mass, indexed by vertex_id - 1.
        dropped: mass discarded by the faithful push.
        pushes: number of push operations performed.
        iterations: number of completed supersteps.
        truncated: whether the push budget stopped the run.
        residual_trace: pending mass after each superstep.
    """

    run: Dict[int, float]
    dry: np.ndarray
    dropped: float = 0.0
    pushes: int = 0
    iterations: int = 0
    truncated: bool = False
    residual_trace: List[float] = field(default_factory=list)

    @property
    def scores(self) -> ScoreVector:
        """The absorbed mass as a score vector."""
        return ScoreVector(values=self.dry)

    def run_vector(self) -> np.ndarray:
        """Return the pending mass as a dense vector."""
        dense = np.zeros(self.dry.shape[0])
        for vid, mass in self.run.items():
            dense[vid - 1] = mass
        return dense


def _sparse_run(run: np.ndarray) -> Dict[int, float]:
    """Convert a dense run vector into the positive-entry mapping."""
    return {int(i) + 1: float(run[i]) for i in np.flatnonzero(run > 0)}


def seed_vector(g: BipartiteGraph, seeds: Iterable[int]) -> SeedVector:
    """Build the uniform start distribution over a seed set.

    Args:
        g: the graph.
        seeds: seed vertex IDs.

    Returns:
        1/|S| on each seed, 0 elsewhere.

    Raises:
        SolverError: if the seed set is empty.
    """
    seed_set = frozenset(int(vid) for vid in seeds)
    if not seed_set:
        raise SolverError("empty seed set")
    for vid in seed_set:
        g.check_vertex(vid)
    values = np.zeros(g.num_vertices)
    values[[vid - 1 for vid in seed_set]] = 1.0 / len(seed_set)
    return SeedVector(values=values, seed_set=seed_set)


def lambda_vector(g: BipartiteGraph, spec: LambdaSpec) -> np.ndarray:
    """Expand a rate spec into per-vertex absorption rates.

    Args:
        g: the graph.
        spec: the rate spec.

    Returns:
        Strictly positive rates, indexed by vertex_id - 1.

    Raises:
        SolverError: if a rate would be zero or the custom length does not match.
    """
    if spec.mode == LambdaMode.IMODE:
        return np.full(g.num_vertices, float(spec.alpha))  # type: ignore[arg-type]
    if spec.mode == LambdaMode.DMODE:
        if np.any(g.degrees == 0):
            raise SolverError("D-mode rate is zero at an isolated vertex")
        return float(spec.beta) * g.degrees.astype(np.float64)  # type: ignore[arg-type]
    values = np.asarray(spec.values, dtype=np.float64)
    if values.shape[0] != g.num_vertices:
        raise SolverError(f"expected {g.num_vertices} custom rates, got {values.shape[0]}")
    return values.copy()


def _check_rates(g: BipartiteGraph, lam: np.ndarray, seed: SeedVector) -> np.ndarray:
    """Validate rates and seed dimensions against the graph.

    Args:
        g: the graph.
        lam: absorption rates.
        seed: start distribution.

    Returns:
        The rates as a float array.

    Raises:
        SolverError: if a rate is not positive or a dimension does not match.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (g.num_vertices,) or seed.values.shape != (g.num_vertices,):
        raise SolverError("rate or seed dimension does not match the graph")
    if not np.all(lam > 0):
        raise SolverError("absorption rates must be strictly positive")
    return lam


def solve_exact(
    g: BipartiteGraph,
    lam: np.ndarray,
    seed: SeedVector,
    dense_cap: int = DEFAULT_DENSE_CAP,
) -> ScoreVector:
    """Compute exact absorption probabilities by dense Cholesky factorization.

    Solves (Lambda + L) y = seed and returns R = Lambda y; Lambda + L is symmetric positive
    definite when every rate is positive.

    Args:
        g: the graph.
        lam: strictly positive absorption rates.
        seed: start distribution.
        dense_cap: largest vertex count the oracle accepts.

    Returns:
        The exact scores, summing to 1.

    Raises:
        OracleSizeExceededError: if the graph is larger than dense_cap.
    """
    if g.num_vertices > dense_cap:
        raise OracleSizeExceededError(
            f"oracle size exceeded: {g.num_vertices} vertices > cap {dense_cap}"
        )
    lam = _check_rates(g, lam, seed)
    system = g.laplacian().toarray()
    system[np.diag_indices_from(system)] += lam
    factor = linalg.cho_factor(system, lower=True, check_finite=False)
    potential = linalg.cho_solve(factor, seed.values, check_finite=False)
    scores = np.maximum(lam * potential, 0.0)
    logger.debug("Exact solve on %d vertices, mass %.15f", g.num_vertices, scores.sum())
    return ScoreVector(values=scores)


def aparw_push(
    g: BipartiteGraph,
    lam: np.ndarray,
    seed: SeedVector,
    gamma: float = DEFAULT_GAMMA,
    budget: Optional[int] = None,
    mode: PushMode = PushMode.CONSERVATIVE,
) -> PushState:
    """Approximate absorption by FIFO push operations.

    Pending entries coalesce: mass arriving at a queued vertex is added to its entry.

    Args:
        g: the graph.
        lam: strictly positive absorption rates.
        seed: start distribution.
        gamma: push threshold per unit degree.
        budget: maximum number of pushes, unlimited when None.
        mode: conservative or faithful processing.

    Returns:
        The run/dry state; Σdry + Σrun + dropped = 1.

    Raises:
        SolverError: if gamma is negative or the budget is not positive.
    """
    if gamma < 0:
        raise SolverError("gamma must be non-negative")
    if budget is not None and budget < 1:
        raise SolverError("push budget must be positive")
    lam = _check_rates(g, lam, seed)
    mode = PushMode(mode)
    degrees = g.degrees.astype(np.float64)
    threshold = gamma * degrees
    keep = lam / (lam + degrees)
    run = seed.values.astype(np.float64).copy()
    dry = np.zeros(g.num_vertices)
    queued = np.zeros(g.num_vertices, dtype=bool)
    start = np.flatnonzero(run > 0)
    if mode == PushMode.CONSERVATIVE:
        start = start[run[start] >= threshold[start]]
    queue = deque(int(i) for i in start)
    queued[start] = True
    dropped = 0.0
    pushes = 0
    truncated = False

    while queue:
        if budget is not None and pushes >= budget:
            truncated = True
            break
        i = queue.popleft()
        queued[i] = False
        mass = run[i]
        run[i] = 0.0
        pushes += 1
        dry[i] += keep[i] * mass
        if mode == PushMode.FAITHFUL and mass < threshold[i]:
            dropped += (1.0 - keep[i]) * mass
            continue
        share = mass / (lam[i] + degrees[i])
        if share <= 0:
            continue
        neighbors = g.indices[g.indptr[i] : g.indptr[i + 1]]
        run[neighbors] += share
        fresh = neighbors[~queued[neighbors]]
        if mode == PushMode.CONSERVATIVE:
            fresh = fresh[run[fresh] >= threshold[fresh]]
        queue.extend(int(j) for j in fresh)
        queued[fresh] = True

    if truncated:
        logger.warning("Push budget of %d exhausted, residual %.3e", budget, run.sum())
    logger.debug("Push finished after %d operations", pushes)
    return PushState(
        run=_sparse_run(run), dry=dry, dropped=dropped, pushes=pushes, truncated=truncated
    )


def _row_blocks(num_rows: int, workers: int) -> List[Tuple[int, int]]:
    """Split the rows into contiguous blocks, one per worker."""
    bounds = np.linspace(0, num_rows, num=workers + 1).astype(int)
    return [(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def _gather(block: sparse.csr_matrix, outflow: np.ndarray) -> np.ndarray:
    """Sum the outflow of each row's neighbors."""
    return block @ outflow


def aparw_sweep(  # pylint: disable=too-many-locals
    g: BipartiteGraph,
    lam: np.ndarray,
    seed: SeedVector,
    gamma: float = DEFAULT_GAMMA,
    max_iters: int = DEFAULT_SWEEP_ITERATIONS,
    workers: int = 1,
) -> PushState:
    """Approximate absorption by synchronous supersteps.

    Every vertex whose previous-superstep run reaches gamma times its degree absorbs its
    share into dry and scatters the rest evenly to its neighbors; the others carry their
    run forward untouched. Each vertex gathers its incoming mass row by row, so the result
    does not depend on how the rows are split among workers.

    Args:
        g: the graph.
        lam: strictly positive absorption rates.
        seed: start distribution.
        gamma: push threshold per unit degree.
        max_iters: maximum number of supersteps.
        workers: number of threads gathering row blocks.

    Returns:
        The run/dry state; Σdry + Σrun = 1.

    Raises:
        SolverError: if max_iters or workers is below 1 or gamma is negative.
    """
    if max_iters < 1:
        raise SolverError("max_iters must be at least 1")
    if workers < 1:
        raise SolverError("workers must be at least 1")
    if gamma < 0:
        raise SolverError("gamma must be non-negative")
    lam = _check_rates(g, lam, seed)
    degrees = g.degrees.astype(np.float64)
    threshold = gamma * degrees
    keep = lam / (lam + degrees)
    spread = 1.0 / (lam + degrees)
    adjacency = g.adjacency_matrix()
    blocks = _row_blocks(g.num_vertices, workers)
    slices = [adjacency[lo:hi] for lo, hi in blocks]
    run = seed.values.astype(np.float64).copy()
    dry = np.zeros(g.num_vertices)
    state = PushState(run={}, dry=dry)

    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for _ in range(max_iters):
            active = (run >= threshold) & (run > 0)
            if not active.any():
                break
            outflow = np.where(active, run * spread, 0.0)
            dry += np.where(active, run * keep, 0.0)
            if executor is None:
                gathered = [_gather(block, outflow) for block in slices]
            else:
                gathered = list(executor.map(_gather, slices, itertools.repeat(outflow)))
            run = np.where(active, 0.0, run) + np.concatenate(gathered)
            state.pushes += int(np.count_nonzero(active))
            state.iterations += 1
            state.residual_trace.append(float(run.sum()))
            logger.debug(
                "Superstep %d: %d active, residual %.3e",
                state.iterations,
                int(np.count_nonzero(active)),
                state.residual_trace[-1],
            )
    finally:
        if executor is not None:
            executor.shutdown()
    state.run = _sparse_run(run)
    return state


def residual_mass(state: PushState) -> float:
    """Return the total pending mass of a push state.

    Args:
        state: the push state.

    Returns:
        The sum of the run entries.
    """
    return float(sum(state.run.values()))


def write_scores(
    stream: TextIO, scores: ScoreVector, state: Optional[PushState] = None
) -> None:
    """Write scores as `vertex_id<TAB>score` lines sorted by vertex ID.

    Args:
        stream: the text stream.
        scores: the scores.
        state: the push state, whose accounting is appended as a comment line.
    """
    for index, value in enumerate(scores.values):
        stream.write(f"{index + 1}\t{float(value)!r}\n")
    if state is not None:
        stream.write(
            f"# residual={residual_mass(state)!r} dropped={state.dropped!r} "
            f"pushes={state.pushes}\n"
        )
