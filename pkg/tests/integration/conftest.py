# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Fixtures for the MovieLens integration tests."""

from pathlib import Path

import pytest
from pytest import Config, fixture

from graph_core import (
    BipartiteGraph,
    InteractionFormat,
    PreprocessRules,
    apply_preprocess,
    build_graph,
    ingest_interactions,
)


@fixture(scope="module", name="movielens_file")
def movielens_file_fixture(pytestconfig: Config) -> Path:
    """Path of the MovieLens 100k u.data file given on the command line."""
    value = pytestconfig.getoption("--movielens-file")
    if not value:
        pytest.skip("--movielens-file not given")
    return Path(value)


@fixture(scope="module", name="movielens_graph")
def movielens_graph_fixture(movielens_file: Path) -> BipartiteGraph:
    """User-movie graph built from the MovieLens file without preprocessing."""
    with open(movielens_file, "rb") as stream:
        records = ingest_interactions(stream, InteractionFormat.MOVIELENS_TAB)
    return build_graph(apply_preprocess(records, PreprocessRules()))
