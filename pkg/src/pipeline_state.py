#!/usr/bin/env python3

# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Module defining the RunConfig class which represents the settings of one pipeline run."""

import itertools
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from eval_harness import DEFAULT_EXCLUDED_FLAGS
from parw_solver import (
    DEFAULT_ALPHA,
    DEFAULT_DENSE_CAP,
    DEFAULT_GAMMA,
    DEFAULT_SWEEP_ITERATIONS,
)


# Command-line flag spellings accepted in configuration files.
KEY_ALIASES = {"algo": "algorithm", "exec": "execution", "iters": "max_iters", "out": "output"}


class Algorithm(str, Enum):
    """Represent the ranking algorithms.

    Attributes:
        PARW_I: PARW with rates alpha on every vertex.
        PARW_D: PARW with rates alpha times degree.
        PPR: personalized PageRank with decay 1 / (1 + alpha) and mixed restart.
    """

    PARW_I = "parw_i"
    PARW_D = "parw_d"
    PPR = "ppr"


class Execution(str, Enum):
    """Represent the ways scores are computed.

    Attributes:
        EXACT: dense oracle.
        PUSH_CONSERVATIVE: queue push, threshold checked before processing.
        PUSH_FAITHFUL: queue push, sub-threshold remainder dropped.
        SWEEP: synchronous supersteps.
        POWER: power iteration, personalized PageRank only.
    """

    EXACT = "exact"
    PUSH_CONSERVATIVE = "push_conservative"
    PUSH_FAITHFUL = "push_faithful"
    SWEEP = "sweep"
    POWER = "power"


class RunConfig(BaseModel):
    """Represent the settings of a ranking run.

    Attributes:
        graph: path of the serialized graph.
        algorithm: the ranking algorithm.
        alpha: the absorption-rate parameter.
        gamma: push threshold per unit degree.
        max_iters: sweep supersteps (or PageRank iterations for execution=power).
        execution: how scores are computed.
        seeds: path of the seed item keys.
        filters: path of the user attributes file.
        output: path of the ranking file.
        rng_seed: seed for randomized procedures.
        budget: maximum number of push operations.
        workers: threads used by the sweep.
        dense_cap: largest vertex count accepted by the exact oracle.
        exclude: filter flags that remove a user from the ranking.
        limit: keep only this many top users.
    """

    model_config = ConfigDict(extra="forbid")

    graph: Optional[Path] = None
    algorithm: Algorithm = Algorithm.PARW_I
    alpha: float = Field(default=DEFAULT_ALPHA, gt=0)
    gamma: float = Field(default=DEFAULT_GAMMA, ge=0)
    max_iters: int = Field(default=DEFAULT_SWEEP_ITERATIONS, ge=1)
    execution: Execution = Execution.SWEEP
    seeds: Optional[Path] = None
    filters: Optional[Path] = None
    output: Optional[Path] = None
    rng_seed: Optional[int] = None
    budget: Optional[int] = Field(default=None, ge=1)
    workers: int = Field(default=1, ge=1)
    dense_cap: int = Field(default=DEFAULT_DENSE_CAP, ge=1)
    exclude: FrozenSet[str] = DEFAULT_EXCLUDED_FLAGS
    limit: Optional[int] = Field(default=None, ge=1)

    @field_validator("exclude", mode="before")
    @classmethod
    def _split_flags(cls, value: Any) -> Any:
        """Accept a comma separated flag list.

        Args:
            value: the raw flags.

        Returns:
            the flags as an iterable.
        """
        if isinstance(value, str):
            return frozenset(flag.strip() for flag in value.split(",") if flag.strip())
        return value

    @classmethod
    def from_sources(
        cls, config_path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None
    ) -> "RunConfig":
        """Initialize a new instance of the RunConfig class from a file and overrides.

        Args:
            config_path: key=value file, optional.
            overrides: values taking precedence over the file; None values are ignored.

        Return:
            The validated configuration.

        Raises:
            RunConfigInvalidError: if the configuration is invalid.
        """
        values: Dict[str, Any] = read_key_values(config_path) if config_path else {}
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        try:
            return cls(**values)
        except ValidationError as exc:
            error_fields = set(
                itertools.chain.from_iterable(error["loc"] for error in exc.errors())
            )
            error_field_str = " ".join(str(f) for f in error_fields)
            raise RunConfigInvalidError(f"invalid configuration: {error_field_str}") from exc


class RunConfigInvalidError(Exception):
    """Exception raised when a run configuration is found to be invalid.

    Attributes:
        msg (str): Explanation of the error.
    """

    def __init__(self, msg: str):
        """Initialize a new instance of the RunConfigInvalidError exception.

        Args:
            msg (str): Explanation of the error.
        """
        super().__init__(msg)
        self.msg = msg


def read_key_values(path: Path) -> Dict[str, str]:
    """Read flat key=value lines, ignoring blank lines and # comments.

    Args:
        path: the file to read.

    Returns:
        The settings; later keys override earlier ones.

    Raises:
        RunConfigInvalidError: if the file is unreadable or a line has no '='.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise RunConfigInvalidError(f"cannot read {path}: {exc.strerror}") from exc
    values = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep or not key.strip():
            raise RunConfigInvalidError(f"{path}:{line_number}: expected key=value")
        name = key.strip().replace("-", "_")
        values[KEY_ALIASES.get(name, name)] = value.strip()
    return values
