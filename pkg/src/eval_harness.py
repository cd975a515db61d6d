# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""User rankings and the evaluation artifacts computed over them."""

import logging
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import (
    Dict,
    FrozenSet,
    Iterable,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Set,
    TextIO,
    Tuple,
)

import numpy as np
from pydantic import BaseModel
from scipy import stats

from graph_core import BipartiteGraph, InteractionRecord, build_graph
from parw_solver import ScoreVector

logger = logging.getLogger(__name__)

DEFAULT_EXCLUDED_FLAGS = frozenset({"push_disabled"})


class EvaluationError(Exception):
    """Exception raised when an evaluation artifact is undefined for its input.

    Attributes:
        msg (str): Explanation of the error.
    """

    def __init__(self, msg: str):
        """Initialize a new instance of the EvaluationError exception.

        Args:
            msg (str): Explanation of the error.
        """
        super().__init__(msg)
        self.msg = msg


class Aggregation(str, Enum):
    """Represent the per-bucket degree statistics.

    Attributes:
        MEAN: average degree.
        SUM: total degree.
    """

    MEAN = "mean"
    SUM = "sum"


class FeedbackEvent(str, Enum):
    """Represent the feedback a pushed user can give.

    Attributes:
        RECEIVED: received
        CLICKED: clicked
        DOWNLOADED: downloaded
    """

    RECEIVED = "received"
    CLICKED = "clicked"
    DOWNLOADED = "downloaded"


class FilterRules(BaseModel):
    """Represent the user filtering rules.

    Attributes:
        excluded_flags: users carrying any of these flags are filtered out.
        attributes: flags per external user key.
    """

    excluded_flags: FrozenSet[str] = DEFAULT_EXCLUDED_FLAGS
    attributes: Dict[str, FrozenSet[str]] = {}

    def excludes(self, user_key: str) -> bool:
        """Check whether a user is filtered out.

        Args:
            user_key: the external user key.

        Returns:
            True if the user carries an excluded flag.
        """
        return bool(self.attributes.get(user_key, frozenset()) & self.excluded_flags)


class RankedUser(NamedTuple):
    """One entry of a ranking.

    Attributes:
        vertex_id: the user vertex ID, 0 when read back from a file.
        user_key: the external user key.
        score: the ranking score.
        degree: the user degree.
    """

    vertex_id: int
    user_key: str
    score: float
    degree: int


@dataclass(frozen=True)
class Ranking:
    """Ordered user list, descending score with ties broken by ascending vertex ID.

    Attributes:
        entries: the ranked users.
        filtered_out: number of users removed by the filtering rules.
    """

    entries: Tuple[RankedUser, ...]
    filtered_out: int = 0

    def __len__(self) -> int:
        """Return the number of ranked users."""
        return len(self.entries)


@dataclass(frozen=True, eq=False)
class BucketProfile:
    """Degree statistic over consecutive equal-size groups of a ranking.

    The integer totals are kept alongside the statistic: a sum profile equals them
    exactly, and a mean profile is them divided by bucket_size.

    Attributes:
        bucket_count: number of buckets.
        bucket_size: users per bucket.
        values: one statistic per bucket.
        aggregation: the statistic.
        totals: integer degree total per bucket.
    """

    bucket_count: int
    bucket_size: int
    values: np.ndarray
    aggregation: Aggregation
    totals: np.ndarray


@dataclass(frozen=True)
class FeedbackLog:
    """Feedback events of pushed users.

    Attributes:
        events: (user key, event) pairs in log order.
    """

    events: Tuple[Tuple[str, FeedbackEvent], ...]

    def __post_init__(self) -> None:
        """Check that every reacting user also received the push.

        Raises:
            EvaluationError: if a user clicked or downloaded without a received event.
        """
        reacted = {key for key, event in self.events if event != FeedbackEvent.RECEIVED}
        missing = reacted - self.users(FeedbackEvent.RECEIVED)
        if missing:
            raise EvaluationError(
                f"users without a received event: {', '.join(sorted(missing)[:5])}"
            )

    def users(self, event: FeedbackEvent) -> Set[str]:
        """Return the distinct users with a given event.

        Args:
            event: the event.

        Returns:
            The user keys.
        """
        return {key for key, logged in self.events if logged == event}


@dataclass(frozen=True)
class PlantedCommunity:
    """Synthetic graph with a planted community.

    Attributes:
        graph: the bipartite graph.
        users: community user vertex IDs.
        items: community item vertex IDs.
    """

    graph: BipartiteGraph
    users: FrozenSet[int]
    items: FrozenSet[int]


def rank_users(
    g: BipartiteGraph,
    scores: ScoreVector,
    rules: Optional[FilterRules] = None,
    limit: Optional[int] = None,
) -> Ranking:
    """Sort the user vertices by score and apply the filtering rules.

    Args:
        g: the graph.
        scores: per-vertex scores.
        rules: the filtering rules, none when omitted.
        limit: keep only this many top users.

    Returns:
        The ranking.

    Raises:
        EvaluationError: if the scores do not match the graph.
    """
    if scores.values.shape != (g.num_vertices,):
        raise EvaluationError("score dimension does not match the graph")
    user_scores = scores.values[: g.num_users]
    ids = np.arange(1, g.num_users + 1)
    order = np.lexsort((ids, -user_scores))
    entries = []
    filtered_out = 0
    for index in order:
        key = g.user_keys[index]
        if rules is not None and rules.excludes(key):
            filtered_out += 1
            continue
        entries.append(
            RankedUser(int(ids[index]), key, float(user_scores[index]), int(g.degrees[index]))
        )
    if filtered_out:
        logger.info("Filtered out %d users", filtered_out)
    if limit is not None:
        entries = entries[:limit]
    return Ranking(entries=tuple(entries), filtered_out=filtered_out)


def bucket_degree_profile(
    r: Ranking,
    g: Optional[BipartiteGraph],
    buckets: int,
    agg: Aggregation = Aggregation.MEAN,
) -> BucketProfile:
    """Aggregate user degrees over consecutive equal-size buckets of a ranking.

    Trailing users beyond buckets * floor(N / buckets) are left out.

    Args:
        r: the ranking.
        g: the graph to read degrees from; the ranking's own degrees are used when None.
        buckets: number of buckets.
        agg: mean or total degree per bucket.

    Returns:
        The profile.

    Raises:
        EvaluationError: if there are fewer ranked users than buckets.
    """
    if buckets < 1:
        raise EvaluationError("bucket count must be at least 1")
    if len(r) < buckets:
        raise EvaluationError(f"ranking shorter than B ({len(r)} < {buckets})")
    size = len(r) // buckets
    if g is None:
        degrees = np.array([entry.degree for entry in r.entries], dtype=np.int64)
    else:
        degrees = np.array([g.degree(entry.vertex_id) for entry in r.entries], dtype=np.int64)
    totals = degrees[: buckets * size].reshape(buckets, size).sum(axis=1)
    agg = Aggregation(agg)
    values = totals.astype(np.float64) if agg == Aggregation.SUM else totals / size
    return BucketProfile(
        bucket_count=buckets, bucket_size=size, values=values, aggregation=agg, totals=totals
    )


def auc(scores: Sequence[Tuple[float, int]]) -> float:
    """Compute the area under the ROC curve.

    Tied scores between a positive and a negative count one half.

    Args:
        scores: (score, label) pairs with labels in {0, 1}.

    Returns:
        The probability that a random positive outranks a random negative.

    Raises:
        EvaluationError: if only one class is present.
    """
    values = np.array([score for score, _ in scores], dtype=np.float64)
    labels = np.array([label for _, label in scores], dtype=bool)
    positives = int(labels.sum())
    negatives = labels.shape[0] - positives
    if positives == 0 or negatives == 0:
        raise EvaluationError("undefined AUC")
    ranks = stats.rankdata(values)
    concordant = ranks[labels].sum() - positives * (positives + 1) / 2.0
    return float(concordant / (positives * negatives))


def _rate(log: FeedbackLog, event: FeedbackEvent) -> float:
    """Return the fraction of received users with an event.

    Args:
        log: the feedback log.
        event: the event counted.

    Returns:
        Distinct users with the event over distinct users who received.

    Raises:
        EvaluationError: if no user received the push.
    """
    received = log.users(FeedbackEvent.RECEIVED)
    if not received:
        raise EvaluationError("no user received the push")
    return len(log.users(event) & received) / len(received)


def ctr(log: FeedbackLog) -> float:
    """Return the click-through rate of a feedback log."""
    return _rate(log, FeedbackEvent.CLICKED)


def dtr(log: FeedbackLog) -> float:
    """Return the download-through rate of a feedback log."""
    return _rate(log, FeedbackEvent.DOWNLOADED)


def tendency_curve(
    r: Ranking,
    log: FeedbackLog,
    bucket_size: int,
    event: FeedbackEvent = FeedbackEvent.CLICKED,
) -> List[float]:
    """Compute the per-bucket rate of an event along a ranking.

    Every ranked user counts as having received the push; the remainder is dropped.

    Args:
        r: the ranking.
        log: the feedback log.
        bucket_size: users per bucket.
        event: clicked for a CTR curve, downloaded for a DTR curve.

    Returns:
        One rate per full bucket.

    Raises:
        EvaluationError: if bucket_size is below 1.
    """
    if bucket_size < 1:
        raise EvaluationError("bucket size must be at least 1")
    reacted = log.users(FeedbackEvent(event))
    hits = np.array([entry.user_key in reacted for entry in r.entries], dtype=np.float64)
    buckets = len(r) // bucket_size
    if buckets == 0:
        logger.warning("Ranking of %d users is shorter than one bucket", len(r))
        return []
    return [float(v) for v in hits[: buckets * bucket_size].reshape(buckets, -1).mean(axis=1)]


def ranking_auc(
    r: Ranking, log: FeedbackLog, event: FeedbackEvent = FeedbackEvent.CLICKED
) -> float:
    """Compute the AUC of a ranking against logged feedback.

    Args:
        r: the ranking.
        log: the feedback log.
        event: the event that makes a user positive.

    Returns:
        The AUC over the ranked users.
    """
    reacted = log.users(FeedbackEvent(event))
    return auc([(entry.score, int(entry.user_key in reacted)) for entry in r.entries])


def simulate_feedback(
    g: BipartiteGraph,
    community: Iterable[int],
    p_in: float,
    p_out: float,
    rng_seed: int,
) -> FeedbackLog:
    """Draw synthetic push feedback for every user of a graph.

    Community users click with probability p_in, the others with p_out; downloads are
    drawn independently with half the click probability.

    Args:
        g: the graph.
        community: community user vertex IDs.
        p_in: click probability inside the community.
        p_out: click probability outside the community.
        rng_seed: seed of the random generator.

    Returns:
        The synthetic log, identical for identical arguments.

    Raises:
        EvaluationError: unless 0 <= p_out <= p_in <= 1.
    """
    if not 0 <= p_out <= p_in <= 1:
        raise EvaluationError("probabilities must satisfy 0 <= p_out <= p_in <= 1")
    members = frozenset(community)
    rng = np.random.default_rng(rng_seed)
    draws = rng.random((g.num_users, 2))
    events = []
    for index, key in enumerate(g.user_keys):
        p_click = p_in if index + 1 in members else p_out
        events.append((key, FeedbackEvent.RECEIVED))
        if draws[index, 0] < p_click:
            events.append((key, FeedbackEvent.CLICKED))
        if draws[index, 1] < p_click / 2:
            events.append((key, FeedbackEvent.DOWNLOADED))
    return FeedbackLog(events=tuple(events))


def plant_community(  # pylint: disable=too-many-arguments,too-many-locals
    rng_seed: int,
    num_users: int = 400,
    num_items: int = 200,
    community_users: int = 40,
    community_items: int = 20,
    community_degree: Tuple[int, int] = (2, 4),
    outside_degree: Tuple[int, int] = (8, 20),
    leak: float = 0.1,
) -> PlantedCommunity:
    """Generate a bipartite graph with a planted low-conductance community.

    Community users have low degree and only touch community items; each outside user
    has a higher degree and, with probability leak, one edge into the community.

    Args:
        rng_seed: seed of the random generator.
        num_users: total users.
        num_items: total items.
        community_users: users inside the community.
        community_items: items inside the community.
        community_degree: inclusive degree range of community users.
        outside_degree: inclusive degree range of outside users.
        leak: probability that an outside user touches one community item.

    Returns:
        The graph with the community vertex IDs.
    """
    rng = np.random.default_rng(rng_seed)
    inside_items = [f"c{i:05d}" for i in range(community_items)]
    outside_items = [f"i{i:05d}" for i in range(num_items - community_items)]
    records = []
    inside_users = [f"c{u:05d}" for u in range(community_users)]
    for user in inside_users:
        degree = int(rng.integers(community_degree[0], community_degree[1] + 1))
        for item in rng.choice(inside_items, size=min(degree, community_items), replace=False):
            records.append(InteractionRecord(user_key=user, item_key=str(item)))
    for u in range(num_users - community_users):
        user = f"u{u:05d}"
        degree = int(rng.integers(outside_degree[0], outside_degree[1] + 1))
        chosen = [str(i) for i in rng.choice(outside_items, size=degree, replace=False)]
        if rng.random() < leak:
            chosen[0] = str(rng.choice(inside_items))
        records.extend(InteractionRecord(user_key=user, item_key=item) for item in chosen)
    graph = build_graph(records)
    users = frozenset(v for key in inside_users if (v := graph.user_id(key)) is not None)
    items = frozenset(v for key in inside_items if (v := graph.item_id(key)) is not None)
    return PlantedCommunity(graph=graph, users=users, items=items)


def overlap(r_a: Ranking, r_b: Ranking) -> int:
    """Return the number of users present in both rankings."""
    return len({e.user_key for e in r_a.entries} & {e.user_key for e in r_b.entries})


def first_crossing(profile_a: Sequence[float], profile_b: Sequence[float]) -> Optional[int]:
    """Return the 1-based index of the first bucket where A falls below B.

    Args:
        profile_a: the first profile.
        profile_b: the second profile.

    Returns:
        The bucket index, or None if A never falls below B.
    """
    for index, (a, b) in enumerate(zip(profile_a, profile_b), start=1):
        if a < b:
            return index
    return None


def max_drop(curve: Sequence[float]) -> float:
    """Return the largest decrease between consecutive buckets of a curve."""
    drops = [before - after for before, after in zip(curve, curve[1:])]
    return max(drops, default=0.0)


def read_attributes(stream: TextIO) -> Dict[str, FrozenSet[str]]:
    """Parse `user_key<TAB>flag1,flag2` lines.

    Args:
        stream: the text stream.

    Returns:
        Flags per user key.

    Raises:
        EvaluationError: if a line is malformed.
    """
    attributes: Dict[str, Set[str]] = defaultdict(set)
    for line_number, line in enumerate(stream, start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise EvaluationError(f"line {line_number}: expected user_key<TAB>flags")
        attributes[fields[0]].update(f.strip() for f in fields[1].split(",") if f.strip())
    return {key: frozenset(flags) for key, flags in attributes.items()}


def read_feedback(stream: TextIO) -> FeedbackLog:
    """Parse `user_key<TAB>event` lines.

    Args:
        stream: the text stream.

    Returns:
        The feedback log.

    Raises:
        EvaluationError: if a line is malformed.
    """
    events = []
    for line_number, line in enumerate(stream, start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        try:
            events.append((fields[0], FeedbackEvent(fields[1].strip())))
        except (IndexError, ValueError) as exc:
            raise EvaluationError(f"line {line_number}: expected user_key<TAB>event") from exc
    return FeedbackLog(events=tuple(events))


def write_feedback(stream: TextIO, log: FeedbackLog) -> None:
    """Write a feedback log as `user_key<TAB>event` lines."""
    for key, event in log.events:
        stream.write(f"{key}\t{event.value}\n")


def write_ranking(stream: TextIO, r: Ranking, trailer: Optional[str] = None) -> None:
    """Write a ranking as `rank<TAB>user_key<TAB>score<TAB>degree` lines.

    Args:
        stream: the text stream.
        r: the ranking.
        trailer: metadata written on a final comment line.
    """
    for rank, entry in enumerate(r.entries, start=1):
        stream.write(f"{rank}\t{entry.user_key}\t{entry.score!r}\t{entry.degree}\n")
    if trailer:
        stream.write(f"# {trailer}\n")


def read_ranking(stream: TextIO) -> Ranking:
    """Parse a ranking written by write_ranking.

    Args:
        stream: the text stream.

    Returns:
        The ranking, with vertex IDs unknown (0).

    Raises:
        EvaluationError: if a line is malformed.
    """
    entries = []
    for line_number, line in enumerate(stream, start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        try:
            entries.append(RankedUser(0, fields[1], float(fields[2]), int(fields[3])))
        except (IndexError, ValueError) as exc:
            raise EvaluationError(f"line {line_number}: malformed ranking line") from exc
    return Ranking(entries=tuple(entries))


def write_curve(stream: TextIO, values: Iterable[float]) -> None:
    """Write `bucket_index,value` CSV lines with 1-based bucket indices."""
    stream.write("bucket_index,value\n")
    for index, value in enumerate(values, start=1):
        stream.write(f"{index},{float(value)!r}\n")
