# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Ranking and evaluation unit tests."""

import io
import logging

import numpy as np
import pytest

from eval_harness import (
    Aggregation,
    EvaluationError,
    FeedbackEvent,
    FeedbackLog,
    FilterRules,
    RankedUser,
    Ranking,
    auc,
    bucket_degree_profile,
    ctr,
    dtr,
    first_crossing,
    max_drop,
    overlap,
    plant_community,
    rank_users,
    ranking_auc,
    read_attributes,
    read_feedback,
    read_ranking,
    simulate_feedback,
    tendency_curve,
    write_curve,
    write_feedback,
    write_ranking,
)
from graph_core import BipartiteGraph, conductance
from parw_solver import LambdaSpec, ScoreVector, lambda_vector, seed_vector, solve_exact
from ppr_engine import decay_for_dmode, dmode_equivalent

RECEIVED = FeedbackEvent.RECEIVED
CLICKED = FeedbackEvent.CLICKED
DOWNLOADED = FeedbackEvent.DOWNLOADED


def _ranking(*keys: str) -> Ranking:
    """Build a ranking with decreasing scores and unit degrees."""
    return Ranking(
        entries=tuple(
            RankedUser(index + 1, key, float(len(keys) - index), 1)
            for index, key in enumerate(keys)
        )
    )


def _log(*events) -> FeedbackLog:
    """Build a feedback log from (user key, event) pairs."""
    return FeedbackLog(events=tuple(events))


def _scores(g: BipartiteGraph, user_scores) -> ScoreVector:
    """Build a score vector with the given user scores and zero item scores."""
    values = np.zeros(g.num_vertices)
    values[: g.num_users] = user_scores
    return ScoreVector(values=values)


def test_rank_users_breaks_ties_by_vertex_id(shared_item_graph: BipartiteGraph):
    """
    arrange: user scores with a tie between U1 and U3.
    act: rank the users.
    assert: U2 first, then U1 before U3, items never ranked.
    """
    ranking = rank_users(shared_item_graph, _scores(shared_item_graph, [0.2, 0.5, 0.2]))

    assert [entry.user_key for entry in ranking.entries] == ["U2", "U1", "U3"]
    assert [entry.degree for entry in ranking.entries] == [1, 3, 4]
    assert ranking.filtered_out == 0


def test_rank_users_applies_filters_and_limit(shared_item_graph: BipartiteGraph):
    """
    arrange: U2 carries an excluded flag.
    act: rank with the filtering rules and a limit of one.
    assert: U2 is counted as filtered out and only U1 remains.
    """
    rules = FilterRules(attributes={"U2": frozenset({"push_disabled", "vip"})})

    ranking = rank_users(
        shared_item_graph, _scores(shared_item_graph, [0.2, 0.5, 0.1]), rules, limit=1
    )

    assert [entry.user_key for entry in ranking.entries] == ["U1"]
    assert ranking.filtered_out == 1


def test_rank_users_rejects_foreign_scores(shared_item_graph: BipartiteGraph):
    """
    arrange: a score vector of the wrong length.
    act: rank the users.
    assert: EvaluationError.
    """
    with pytest.raises(EvaluationError):
        rank_users(shared_item_graph, ScoreVector(values=np.zeros(3)))


@pytest.mark.parametrize(
    "agg, expected",
    [
        pytest.param(Aggregation.MEAN, [2.0, 3.5], id="mean"),
        pytest.param(Aggregation.SUM, [4.0, 7.0], id="sum"),
    ],
)
def test_bucket_degree_profile_drops_the_remainder(agg, expected):
    """
    arrange: five ranked users with degrees 1, 3, 2, 5, 9.
    act: aggregate them into two buckets.
    assert: buckets of two users each and the fifth user is left out.
    """
    degrees = [1, 3, 2, 5, 9]
    ranking = Ranking(
        entries=tuple(RankedUser(i + 1, f"u{i}", 1.0, d) for i, d in enumerate(degrees))
    )

    profile = bucket_degree_profile(ranking, None, 2, agg)

    assert profile.bucket_size == 2
    assert list(profile.values) == expected


def test_bucket_degree_profile_reads_graph_degrees(shared_item_graph: BipartiteGraph):
    """
    arrange: a ranking of the shared item graph.
    act: aggregate into three buckets using the graph.
    assert: one user per bucket with the graph degrees.
    """
    ranking = rank_users(shared_item_graph, _scores(shared_item_graph, [0.3, 0.2, 0.1]))

    profile = bucket_degree_profile(ranking, shared_item_graph, 3)

    assert list(profile.values) == [3.0, 1.0, 4.0]


def test_bucket_degree_profile_needs_enough_users():
    """
    arrange: a ranking of three users.
    act: aggregate into four buckets.
    assert: EvaluationError names both sizes.
    """
    with pytest.raises(EvaluationError, match=r"ranking shorter than B \(3 < 4\)"):
        bucket_degree_profile(_ranking("a", "b", "c"), None, 4)


def test_auc_counts_ties_as_half():
    """
    arrange: scored labels with and without ties.
    act: compute the AUC.
    assert: 0.75 for the untied case and 0.5 for a full tie.
    """
    assert auc([(0.9, 1), (0.8, 0), (0.7, 1), (0.1, 0)]) == pytest.approx(0.75)
    assert auc([(0.5, 1), (0.5, 0)]) == pytest.approx(0.5)


def test_auc_with_a_single_class_is_undefined():
    """
    arrange: only positive labels.
    act: compute the AUC.
    assert: EvaluationError.
    """
    with pytest.raises(EvaluationError, match="undefined AUC"):
        auc([(0.3, 1), (0.2, 1)])


def test_feedback_requires_a_received_event():
    """
    arrange: a click without a received event.
    act: build the log.
    assert: EvaluationError.
    """
    with pytest.raises(EvaluationError):
        _log(("a", RECEIVED), ("b", CLICKED))


def test_rates_count_distinct_users():
    """
    arrange: four receivers, a repeated click and one download.
    act: compute CTR and DTR.
    assert: 2/4 and 1/4.
    """
    log = _log(
        ("a", RECEIVED),
        ("b", RECEIVED),
        ("c", RECEIVED),
        ("d", RECEIVED),
        ("a", CLICKED),
        ("a", CLICKED),
        ("b", CLICKED),
        ("a", DOWNLOADED),
    )

    assert ctr(log) == 0.5
    assert dtr(log) == 0.25


def test_rates_without_receivers_are_undefined():
    """
    arrange: an empty log.
    act: compute the CTR.
    assert: EvaluationError.
    """
    with pytest.raises(EvaluationError, match="no user received the push"):
        ctr(_log())


def test_tendency_curve_buckets_the_ranking():
    """
    arrange: five ranked users with clicks at ranks 1 and 4.
    act: compute the curve with buckets of two.
    assert: two full buckets at one half each.
    """
    ranking = _ranking("a", "b", "c", "d", "e")
    log = _log(*[(key, RECEIVED) for key in "abcde"], ("a", CLICKED), ("d", CLICKED))

    assert tendency_curve(ranking, log, 2) == [0.5, 0.5]
    assert tendency_curve(ranking, log, 5, DOWNLOADED) == [0.0]


def test_tendency_curve_shorter_than_a_bucket(caplog):
    """
    arrange: a ranking of two users.
    act: compute the curve with buckets of three.
    assert: an empty curve and a warning.
    """
    with caplog.at_level(logging.WARNING, logger="eval_harness"):
        curve = tendency_curve(_ranking("a", "b"), _log(("a", RECEIVED)), 3)

    assert curve == []
    assert "shorter than one bucket" in caplog.text


def test_tendency_curve_rejects_empty_buckets():
    """
    arrange: a bucket size of zero.
    act: compute the curve.
    assert: EvaluationError.
    """
    with pytest.raises(EvaluationError):
        tendency_curve(_ranking("a"), _log(), 0)


def test_ranking_auc_uses_the_chosen_event():
    """
    arrange: a ranking with one clicker at the top and one downloader at the bottom.
    act: compute the AUC for clicks and for downloads.
    assert: 1 for clicks and 0 for downloads.
    """
    ranking = _ranking("a", "b", "c")
    log = _log(*[(key, RECEIVED) for key in "abc"], ("a", CLICKED), ("c", DOWNLOADED))

    assert ranking_auc(ranking, log) == 1.0
    assert ranking_auc(ranking, log, DOWNLOADED) == 0.0


def test_profile_helpers():
    """
    arrange: two profiles and two rankings.
    act: compute the first crossing, the largest drop and the overlap.
    assert: the expected values.
    """
    assert first_crossing([3.0, 2.0, 1.0], [1.0, 2.0, 3.0]) == 3
    assert first_crossing([3.0, 2.0], [1.0, 2.0]) is None
    assert max_drop([0.5, 0.2, 0.3, 0.0]) == pytest.approx(0.3)
    assert max_drop([]) == 0.0
    assert overlap(_ranking("a", "b", "c"), _ranking("c", "d", "a")) == 2


def test_ranking_file_keeps_keys_scores_and_degrees():
    """
    arrange: a ranking and a trailer.
    act: write it and read it back.
    assert: the lines match the tabular layout and the entries survive except the IDs.
    """
    ranking = _ranking("a", "b")
    stream = io.StringIO()

    write_ranking(stream, ranking, "residual=0.0")
    parsed = read_ranking(io.StringIO(stream.getvalue()))

    assert stream.getvalue() == "1\ta\t2.0\t1\n2\tb\t1.0\t1\n# residual=0.0\n"
    assert [(e.user_key, e.score, e.degree) for e in parsed.entries] == [
        ("a", 2.0, 1),
        ("b", 1.0, 1),
    ]


def test_read_ranking_rejects_short_lines():
    """
    arrange: a ranking line without degree.
    act: read it.
    assert: EvaluationError names the line.
    """
    with pytest.raises(EvaluationError, match="line 1"):
        read_ranking(io.StringIO("1\ta\t0.5\n"))


def test_curve_file_has_a_header_and_1_based_buckets():
    """
    arrange: a two-bucket curve.
    act: write it.
    assert: a CSV header followed by one line per bucket.
    """
    stream = io.StringIO()

    write_curve(stream, [0.5, 0.25])

    assert stream.getvalue() == "bucket_index,value\n1,0.5\n2,0.25\n"


def test_attributes_and_feedback_files():
    """
    arrange: an attributes file and a feedback log.
    act: read the attributes and write then read the log.
    assert: flags are split on commas and the events are unchanged.
    """
    attributes = read_attributes(io.StringIO("# flags\nu1\tpush_disabled, vip\nu2\t\n"))
    log = _log(("u1", RECEIVED), ("u1", CLICKED))
    stream = io.StringIO()

    write_feedback(stream, log)

    assert attributes == {"u1": frozenset({"push_disabled", "vip"}), "u2": frozenset()}
    assert read_feedback(io.StringIO(stream.getvalue())).events == log.events


@pytest.mark.parametrize(
    "reader, text",
    [
        pytest.param(read_attributes, "u1\tflag\textra\n", id="attributes"),
        pytest.param(read_feedback, "u1\topened\n", id="feedback"),
    ],
)
def test_malformed_side_files(reader, text):
    """
    arrange: a malformed attributes or feedback line.
    act: read it.
    assert: EvaluationError.
    """
    with pytest.raises(EvaluationError):
        reader(io.StringIO(text))


def test_simulated_feedback_is_reproducible(shared_item_graph: BipartiteGraph):
    """
    arrange: a graph and a community.
    act: simulate feedback twice with the same seed.
    assert: identical logs where every user received the push.
    """
    first = simulate_feedback(shared_item_graph, [1], 0.9, 0.1, rng_seed=5)
    second = simulate_feedback(shared_item_graph, [1], 0.9, 0.1, rng_seed=5)

    assert first == second
    assert first.users(RECEIVED) == {"U1", "U2", "U3"}


def test_simulated_feedback_rejects_inverted_probabilities(shared_item_graph: BipartiteGraph):
    """
    arrange: p_out larger than p_in.
    act: simulate feedback.
    assert: EvaluationError.
    """
    with pytest.raises(EvaluationError):
        simulate_feedback(shared_item_graph, [1], 0.1, 0.5, rng_seed=5)


def test_planted_community_is_isolated_on_the_user_side():
    """
    arrange: a planted community graph.
    act: inspect the community users.
    assert: their edges stay on community items and the community has low conductance.
    """
    planted = plant_community(rng_seed=3)
    g = planted.graph

    assert (g.num_users, len(planted.users)) == (400, 40)
    for vid in planted.users:
        assert set(g.neighbors(vid).tolist()) <= planted.items
        assert 2 <= g.degree(vid) <= 4
    assert conductance(g, planted.users | planted.items) < 0.5


def test_constant_rates_find_the_planted_community_more_often():
    """
    arrange: twenty planted community graphs with simulated feedback.
    act: rank users exactly with constant and with degree-proportional rates.
    assert: constant rates reach at least the same AUC in sixteen of them or more.
    """
    wins = 0
    for rng_seed in range(20):
        planted = plant_community(rng_seed=rng_seed)
        g = planted.graph
        seed = seed_vector(g, sorted(planted.items))
        log = simulate_feedback(g, planted.users, 0.6, 0.05, rng_seed=rng_seed)
        imode = solve_exact(g, lambda_vector(g, LambdaSpec.imode(0.01)), seed)
        dmode = solve_exact(g, lambda_vector(g, LambdaSpec.dmode(0.01)), seed)

        auc_i = ranking_auc(rank_users(g, imode), log)
        auc_d = ranking_auc(rank_users(g, dmode), log)

        wins += int(auc_i >= auc_d)
    assert wins >= 16


def test_bucket_totals_are_exact_for_a_non_dyadic_bucket_size():
    """
    arrange: fourteen ranked users, seven per bucket, with degree totals 29 and 31.
    act: aggregate them by sum and by mean.
    assert: the sum profile equals the integer totals exactly and the mean profile is
        those totals divided by the bucket size.
    """
    degrees = [5, 4, 3, 6, 2, 7, 2, 1, 9, 3, 4, 6, 5, 3]
    ranking = Ranking(
        entries=tuple(RankedUser(i + 1, f"u{i}", 1.0, d) for i, d in enumerate(degrees))
    )

    total = bucket_degree_profile(ranking, None, 2, Aggregation.SUM)
    mean = bucket_degree_profile(ranking, None, 2, Aggregation.MEAN)

    assert total.bucket_size == mean.bucket_size == 7
    assert total.totals.tolist() == mean.totals.tolist() == [29, 31]
    assert np.array_equal(total.values, total.totals)
    assert np.array_equal(mean.values, mean.totals / 7)


def test_auc_is_invariant_under_increasing_transforms():
    """
    arrange: random scores with random labels.
    act: compute the AUC of the scores and of strictly increasing transforms of them.
    assert: the three values are equal.
    """
    rng = np.random.default_rng(41)
    values = rng.random(200)
    labels = rng.integers(0, 2, size=200)

    def score_pairs(scores):
        """Pair scores with the fixed labels."""
        return list(zip(scores.tolist(), labels.tolist()))

    plain = auc(score_pairs(values))

    assert auc(score_pairs(np.exp(3 * values))) == pytest.approx(plain, abs=1e-12)
    assert auc(score_pairs(values**3 - 7)) == pytest.approx(plain, abs=1e-12)


def test_auc_of_independent_labels_matches_pair_counting():
    """
    arrange: a thousand random scores with labels drawn independently of them.
    act: compute the AUC and count concordant pairs directly.
    assert: both agree and stay within 0.05 of one half.
    """
    rng = np.random.default_rng(2024)
    values = rng.random(1000)
    labels = rng.integers(0, 2, size=1000).astype(bool)
    positives, negatives = values[labels], values[~labels]
    wins = (positives[:, None] > negatives[None, :]).sum()
    ties = (positives[:, None] == negatives[None, :]).sum()
    expected = (wins + 0.5 * ties) / (positives.size * negatives.size)

    result = auc(list(zip(values.tolist(), labels.astype(int).tolist())))

    assert result == pytest.approx(expected, abs=1e-12)
    assert abs(result - 0.5) <= 0.05


def test_certain_feedback_clicks_exactly_the_community(shared_item_graph: BipartiteGraph):
    """
    arrange: a community of U1 and U3.
    act: simulate feedback with click probabilities one inside and zero outside.
    assert: the clickers are exactly U1 and U3.
    """
    log = simulate_feedback(shared_item_graph, [1, 3], 1.0, 0.0, rng_seed=9)

    assert log.users(CLICKED) == {"U1", "U3"}
    assert log.users(RECEIVED) == {"U1", "U2", "U3"}


def test_constant_rates_front_load_the_tendency_curve():
    """
    arrange: twenty planted community graphs where exactly the community clicks.
    act: bucket the constant-rate and PageRank rankings by the community size.
    assert: the constant-rate curve has at least the PageRank curve's largest drop in
        sixteen graphs or more.
    """
    wins = 0
    for rng_seed in range(20):
        planted = plant_community(rng_seed=rng_seed)
        g = planted.graph
        seed = seed_vector(g, sorted(planted.items))
        log = simulate_feedback(g, planted.users, 1.0, 0.0, rng_seed=rng_seed)
        imode = solve_exact(g, lambda_vector(g, LambdaSpec.imode(0.01)), seed)
        pagerank = dmode_equivalent(g, decay_for_dmode(0.01), seed)
        size = len(planted.users)

        curve_i = tendency_curve(rank_users(g, imode), log, size)
        curve_p = tendency_curve(rank_users(g, pagerank), log, size)

        wins += int(max_drop(curve_i) >= max_drop(curve_p))
    assert wins >= 16
