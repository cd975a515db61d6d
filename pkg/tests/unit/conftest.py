# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Fixtures for pipeline unit tests."""

from typing import Callable, List, Tuple

import numpy as np
import pytest

from graph_core import BipartiteGraph, InteractionRecord, build_graph

# Three users sharing item A2: U1 and U3 have several other items, U2 has only A2.
SHARED_ITEM_EDGES = [
    ("U1", "A1"),
    ("U1", "A2"),
    ("U1", "A3"),
    ("U2", "A2"),
    ("U3", "A2"),
    ("U3", "A3"),
    ("U3", "A4"),
    ("U3", "A5"),
]


def records_from(edges: List[Tuple[str, str]]) -> List[InteractionRecord]:
    """Build interaction records from (user, item) pairs."""
    return [InteractionRecord(user_key=user, item_key=item) for user, item in edges]


@pytest.fixture(name="shared_item_graph")
def shared_item_graph_fixture() -> BipartiteGraph:
    """Graph with users v1..v3 (U1..U3) and items v4..v8 (A1..A5); A2 is v5."""
    return build_graph(records_from(SHARED_ITEM_EDGES))


@pytest.fixture(name="path_graph")
def path_graph_fixture() -> BipartiteGraph:
    """Single edge between user v1 and item v2."""
    return build_graph(records_from([("u", "i")]))


@pytest.fixture(name="random_graph")
def random_graph_fixture() -> Callable[..., BipartiteGraph]:
    """Factory of random bipartite graphs where every user has at least one item."""

    def make(seed: int, num_users: int = 30, num_items: int = 20, density: float = 0.15):
        rng = np.random.default_rng(seed)
        edges = []
        for u in range(num_users):
            chosen = np.flatnonzero(rng.random(num_items) < density)
            if chosen.size == 0:
                chosen = rng.integers(0, num_items, size=1)
            edges.extend((f"u{u:03d}", f"i{int(i):03d}") for i in chosen)
        return build_graph(records_from(edges))

    return make
