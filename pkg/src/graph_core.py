# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Interaction ingestion, preprocessing and the immutable user-item bipartite graph.

Vertex IDs are 1-based: users take 1..|U| and items take |U|+1..|U|+|A|. Array-backed
attributes (degrees, CSR structure, score vectors) are indexed by ``vertex_id - 1``.
"""

import itertools
import logging
import typing
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator
from scipy import sparse

logger = logging.getLogger(__name__)

GRAPH_FORMAT_VERSION = "v1"
GRAPH_HEADER_PREFIX = "#parw-graph"


class GraphError(Exception):
    """Exception raised when a graph cannot be built or queried.

    Attributes:
        msg (str): Explanation of the error.
    """

    def __init__(self, msg: str):
        """Initialize a new instance of the GraphError exception.

        Args:
            msg (str): Explanation of the error.
        """
        super().__init__(msg)
        self.msg = msg


class InteractionParseError(GraphError):
    """Exception raised when an interaction line is malformed.

    Attributes:
        line_number (int): 1-based number of the offending line.
    """

    def __init__(self, msg: str, line_number: int):
        """Initialize a new instance of the InteractionParseError exception.

        Args:
            msg (str): Explanation of the error.
            line_number (int): 1-based number of the offending line.
        """
        super().__init__(f"line {line_number}: {msg}")
        self.line_number = line_number


class VertexBoundsError(GraphError):
    """Exception raised when a vertex ID is outside the graph."""


class InteractionFormat(str, Enum):
    """Represent the supported interaction file layouts.

    Attributes:
        EDGE_TSV: edge_tsv
        MOVIELENS_TAB: movielens_tab
        MOVIELENS_DOUBLE_COLON: movielens_double_colon
    """

    EDGE_TSV = "edge_tsv"
    MOVIELENS_TAB = "movielens_tab"
    MOVIELENS_DOUBLE_COLON = "movielens_double_colon"


class InteractionRecord(BaseModel):
    """Represent one user-item interaction.

    Attributes:
        user_key: External user identifier.
        item_key: External item identifier.
        weight: Interaction weight (a rating for MovieLens layouts).
        timestamp: Interaction time in seconds, if known.
    """

    user_key: str = Field(..., min_length=1)
    item_key: str = Field(..., min_length=1)
    weight: float = Field(default=1.0, ge=0)
    timestamp: Optional[int] = None


class PreprocessRules(BaseModel):
    """Represent the preprocessing rules applied before graph construction.

    Attributes:
        item_blocklist: Items removed unconditionally (e.g. pre-installed apps).
        max_item_degree_fraction: Items touched by more than this fraction of users are dropped.
        min_user_degree: Users with fewer remaining items are dropped.
        drop_isolated: Whether vertices without edges are left out of the graph.
    """

    item_blocklist: FrozenSet[str] = frozenset()
    max_item_degree_fraction: float = Field(default=1.0, gt=0, le=1)
    min_user_degree: int = Field(default=0, ge=0)
    drop_isolated: bool = True

    @field_validator("item_blocklist", mode="before")
    @classmethod
    def _split_blocklist(cls, value: typing.Any) -> typing.Any:
        """Accept a comma separated string as coming from a rules file.

        Args:
            value: the raw blocklist value.

        Returns:
            the blocklist as an iterable of item keys.
        """
        if isinstance(value, str):
            return frozenset(key.strip() for key in value.split(",") if key.strip())
        return value

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> "PreprocessRules":
        """Build the rules from flat key=value settings.

        Args:
            values: the raw settings.

        Returns:
            The validated rules.

        Raises:
            GraphError: if a setting is invalid.
        """
        try:
            return cls(**values)  # type: ignore[arg-type]
        except ValidationError as exc:
            error_fields = set(
                itertools.chain.from_iterable(error["loc"] for error in exc.errors())
            )
            error_field_str = " ".join(str(f) for f in error_fields)
            raise GraphError(f"invalid preprocess rules: {error_field_str}") from exc


def _parse_fields(fields: Sequence[str], fmt: InteractionFormat, line_number: int):
    """Map the split fields of one line into a record.

    Args:
        fields: the split fields.
        fmt: the declared layout.
        line_number: 1-based line number for diagnostics.

    Returns:
        The parsed record.

    Raises:
        InteractionParseError: if the line does not match the layout.
    """
    if fmt == InteractionFormat.EDGE_TSV:
        if len(fields) not in (2, 3):
            raise InteractionParseError(
                f"expected 2 or 3 tab separated fields, got {len(fields)}", line_number
            )
    elif len(fields) != 4:
        raise InteractionParseError(f"expected 4 fields, got {len(fields)}", line_number)
    try:
        return InteractionRecord(
            user_key=fields[0].strip(),
            item_key=fields[1].strip(),
            weight=float(fields[2]) if len(fields) > 2 else 1.0,
            timestamp=int(fields[3]) if len(fields) > 3 else None,
        )
    except (ValueError, ValidationError) as exc:
        raise InteractionParseError(f"invalid field value ({exc})", line_number) from exc


def ingest_interactions(
    source: Iterable[bytes], fmt: InteractionFormat
) -> List[InteractionRecord]:
    """Parse interaction records from a byte stream.

    Args:
        source: a binary stream or any iterable of encoded lines.
        fmt: the layout of the stream.

    Returns:
        One record per data line, in input order.

    Raises:
        InteractionParseError: if a line is malformed.
    """
    fmt = InteractionFormat(fmt)
    records = []
    for line_number, raw in enumerate(source, start=1):
        try:
            line = raw.decode("utf-8").rstrip("\r\n")
        except UnicodeDecodeError as exc:
            raise InteractionParseError("line is not valid UTF-8", line_number) from exc
        if not line.strip():
            continue
        if fmt == InteractionFormat.EDGE_TSV:
            if line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
        elif fmt == InteractionFormat.MOVIELENS_TAB:
            fields = line.split("\t")
        else:
            fields = line.split("::")
        records.append(_parse_fields(fields, fmt, line_number))
    logger.info("Ingested %d interaction records (%s)", len(records), fmt.value)
    return records


def apply_preprocess(
    records: Sequence[InteractionRecord], rules: PreprocessRules
) -> List[InteractionRecord]:
    """Filter the interaction records before graph construction.

    Duplicate (user, item) pairs are collapsed to their first occurrence, then the rules
    run once in a fixed order: blocklist, item popularity, minimum user degree.

    Args:
        records: the raw records.
        rules: the preprocessing rules.

    Returns:
        The surviving records, in input order.
    """
    seen = set()
    unique = []
    for record in records:
        pair = (record.user_key, record.item_key)
        if pair not in seen:
            seen.add(pair)
            unique.append(record)

    kept = [r for r in unique if r.item_key not in rules.item_blocklist]

    num_users = len({r.user_key for r in kept})
    item_users = Counter(r.item_key for r in kept)
    limit = rules.max_item_degree_fraction * num_users
    popular = {item for item, count in item_users.items() if count > limit}
    if popular:
        logger.info("Dropping %d items above the popularity limit", len(popular))
    kept = [r for r in kept if r.item_key not in popular]

    user_items = Counter(r.user_key for r in kept)
    sparse_users = {user for user, count in user_items.items() if count < rules.min_user_degree}
    kept = [r for r in kept if r.user_key not in sparse_users]

    logger.info(
        "Preprocessing kept %d of %d records (%d duplicates)",
        len(kept),
        len(records),
        len(records) - len(unique),
    )
    return kept


@dataclass(frozen=True, eq=False)
class BipartiteGraph:  # pylint: disable=too-many-instance-attributes
    """Immutable undirected user-item graph.

    Attributes:
        num_users: number of user vertices |U|.
        num_items: number of item vertices |A|.
        indptr: CSR row pointers over vertex indices.
        indices: CSR column indices (0-based), sorted within each row.
        degrees: per-vertex degree, indexed by vertex_id - 1.
        user_keys: external user keys, in ID order.
        item_keys: external item keys, in ID order.
        num_vertices: |U| + |A|.
        num_edges: number of undirected edges.
    """

    num_users: int
    num_items: int
    indptr: np.ndarray
    indices: np.ndarray
    degrees: np.ndarray
    user_keys: Tuple[str, ...]
    item_keys: Tuple[str, ...]
    _user_ids: Dict[str, int] = field(default_factory=dict, repr=False, compare=False)
    _item_ids: Dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        """Freeze the arrays and derive the key lookups."""
        for array in (self.indptr, self.indices, self.degrees):
            array.setflags(write=False)
        self._user_ids.update({key: i + 1 for i, key in enumerate(self.user_keys)})
        self._item_ids.update(
            {key: self.num_users + i + 1 for i, key in enumerate(self.item_keys)}
        )

    @property
    def num_vertices(self) -> int:
        """Total number of vertices."""
        return self.num_users + self.num_items

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return int(self.indices.shape[0]) // 2

    def check_vertex(self, vid: int) -> None:
        """Validate a vertex ID.

        Args:
            vid: the vertex ID.

        Raises:
            VertexBoundsError: if the ID is not a vertex of this graph.
        """
        if not 1 <= int(vid) <= self.num_vertices:
            raise VertexBoundsError(f"vertex {vid} outside 1..{self.num_vertices}")

    def is_user(self, vid: int) -> bool:
        """Check whether a vertex lies on the user side.

        Args:
            vid: the vertex ID.

        Returns:
            True for user vertices.
        """
        self.check_vertex(vid)
        return vid <= self.num_users

    def degree(self, vid: int) -> int:
        """Return the degree of a vertex.

        Args:
            vid: the vertex ID.

        Returns:
            The number of neighbors.
        """
        self.check_vertex(vid)
        return int(self.degrees[vid - 1])

    def neighbors(self, vid: int) -> np.ndarray:
        """Return the sorted neighbor IDs of a vertex.

        Args:
            vid: the vertex ID.

        Returns:
            1-based neighbor IDs in ascending order.
        """
        self.check_vertex(vid)
        return self.indices[self.indptr[vid - 1] : self.indptr[vid]] + 1

    def user_id(self, key: str) -> Optional[int]:
        """Look up a user vertex by external key."""
        return self._user_ids.get(key)

    def item_id(self, key: str) -> Optional[int]:
        """Look up an item vertex by external key."""
        return self._item_ids.get(key)

    def external_key(self, vid: int) -> str:
        """Return the external key of a vertex.

        Args:
            vid: the vertex ID.

        Returns:
            The user or item key.
        """
        if self.is_user(vid):
            return self.user_keys[vid - 1]
        return self.item_keys[vid - self.num_users - 1]

    def adjacency_matrix(self) -> sparse.csr_matrix:
        """Return the 0/1 adjacency matrix W in CSR form."""
        data = np.ones(self.indices.shape[0], dtype=np.float64)
        return sparse.csr_matrix(
            (data, self.indices, self.indptr), shape=(self.num_vertices, self.num_vertices)
        )

    def laplacian(self) -> sparse.csr_matrix:
        """Return the combinatorial Laplacian L = D - W in CSR form."""
        degree_matrix = sparse.diags(self.degrees.astype(np.float64))
        return (degree_matrix - self.adjacency_matrix()).tocsr()


def build_graph(
    records: Sequence[InteractionRecord],
    extra_users: Iterable[str] = (),
    extra_items: Iterable[str] = (),
    drop_isolated: bool = True,
) -> BipartiteGraph:
    """Build the bipartite graph from deduplicated records.

    Keys are sorted lexicographically within each side before numbering. Ratings are
    binarized: an edge exists iff a record exists.

    Args:
        records: the interaction records.
        extra_users: catalog users that may have no interactions.
        extra_items: catalog items that may have no interactions.
        drop_isolated: whether catalog vertices without edges are left out.

    Returns:
        The immutable graph.

    Raises:
        GraphError: if no vertex remains.
    """
    pairs = sorted({(r.user_key, r.item_key) for r in records})
    if not pairs:
        raise GraphError("empty graph")
    users = {u for u, _ in pairs}
    items = {i for _, i in pairs}
    if not drop_isolated:
        users.update(extra_users)
        items.update(extra_items)

    user_keys = tuple(sorted(users))
    item_keys = tuple(sorted(items))
    num_users = len(user_keys)
    num_vertices = num_users + len(item_keys)
    user_index = {key: i for i, key in enumerate(user_keys)}
    item_index = {key: num_users + i for i, key in enumerate(item_keys)}

    rows = np.fromiter((user_index[u] for u, _ in pairs), dtype=np.int64, count=len(pairs))
    cols = np.fromiter((item_index[i] for _, i in pairs), dtype=np.int64, count=len(pairs))
    adjacency = sparse.coo_matrix(
        (np.ones(2 * len(pairs)), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
        shape=(num_vertices, num_vertices),
    ).tocsr()
    adjacency.sort_indices()
    indptr = adjacency.indptr.astype(np.int64)
    graph = BipartiteGraph(
        num_users=num_users,
        num_items=len(item_keys),
        indptr=indptr,
        indices=adjacency.indices.astype(np.int64),
        degrees=np.diff(indptr),
        user_keys=user_keys,
        item_keys=item_keys,
    )
    logger.info(
        "Built graph users=%d items=%d edges=%d",
        graph.num_users,
        graph.num_items,
        graph.num_edges,
    )
    return graph


def transition_prob(g: BipartiteGraph, i: int, j: int) -> float:
    """Return the one-step transition probability T(i, j).

    Args:
        g: the graph.
        i: source vertex ID.
        j: target vertex ID.

    Returns:
        1/d_i if (i, j) is an edge, else 0.
    """
    g.check_vertex(j)
    neighbors = g.neighbors(i)
    position = np.searchsorted(neighbors, j)
    if position < neighbors.shape[0] and neighbors[position] == j:
        return 1.0 / g.degree(i)
    return 0.0


def conductance(g: BipartiteGraph, vertices: Iterable[int]) -> float:
    """Compute the conductance of a vertex set.

    Args:
        g: the graph.
        vertices: the vertex IDs of the set.

    Returns:
        Boundary edges over min(vol(S), vol(V minus S)); infinity for a degenerate cut.
    """
    members = np.zeros(g.num_vertices, dtype=bool)
    for vid in vertices:
        g.check_vertex(vid)
        members[vid - 1] = True
    volume = int(g.degrees[members].sum())
    complement = int(g.degrees.sum()) - volume
    sources = np.repeat(np.arange(g.num_vertices), g.degrees)
    boundary = int(np.count_nonzero(members[sources] & ~members[g.indices]))
    denominator = min(volume, complement)
    if denominator == 0:
        return float("inf")
    return boundary / denominator


def serialize_graph(g: BipartiteGraph) -> str:
    """Render the graph in the versioned text format.

    Args:
        g: the graph.

    Returns:
        The serialized text, identical for identical graphs.
    """
    lines = [
        f"{GRAPH_HEADER_PREFIX} {GRAPH_FORMAT_VERSION} "
        f"users={g.num_users} items={g.num_items} edges={g.num_edges}"
    ]
    lines.extend(f"#v\t{i + 1}\tuser\t{key}" for i, key in enumerate(g.user_keys))
    lines.extend(
        f"#v\t{g.num_users + i + 1}\titem\t{key}" for i, key in enumerate(g.item_keys)
    )
    for row in range(g.num_users):
        for col in g.indices[g.indptr[row] : g.indptr[row + 1]]:
            lines.append(f"{row + 1}\t{col + 1}")
    return "\n".join(lines) + "\n"


def parse_graph(text: str) -> BipartiteGraph:
    """Parse a graph serialized by serialize_graph.

    Args:
        text: the serialized graph.

    Returns:
        The graph with identical IDs and keys.

    Raises:
        GraphError: if the header or a line is malformed.
    """
    lines = text.splitlines()
    if not lines or not lines[0].startswith(f"{GRAPH_HEADER_PREFIX} {GRAPH_FORMAT_VERSION}"):
        raise GraphError("missing or unsupported graph header")
    header = dict(token.split("=", 1) for token in lines[0].split()[2:])
    keys: Dict[str, List[str]] = defaultdict(list)
    records = []
    by_id: Dict[int, str] = {}
    for line_number, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if line.startswith("#v\t") and len(fields) == 4:
            keys[fields[2]].append(fields[3])
            by_id[int(fields[1])] = fields[3]
        elif not line.startswith("#") and len(fields) == 2:
            records.append(
                InteractionRecord(user_key=by_id[int(fields[0])], item_key=by_id[int(fields[1])])
            )
        elif line.strip() and not line.startswith("#"):
            raise GraphError(f"line {line_number}: malformed graph line")
    graph = build_graph(
        records, extra_users=keys["user"], extra_items=keys["item"], drop_isolated=False
    )
    expected = (int(header["users"]), int(header["items"]), int(header["edges"]))
    if (graph.num_users, graph.num_items, graph.num_edges) != expected:
        raise GraphError("graph body does not match its header")
    return graph
