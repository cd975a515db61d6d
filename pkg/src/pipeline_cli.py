#!/usr/bin/env python3

# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Command-line pipeline: build a graph, rank target users, compare and evaluate rankings."""

import argparse
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Callable, List, Optional, Sequence, TextIO, Tuple, cast

import numpy as np

import eval_harness
import graph_core
import parw_solver
import ppr_engine
from pipeline_state import (
    Algorithm,
    Execution,
    RunConfig,
    RunConfigInvalidError,
    read_key_values,
)

logger = logging.getLogger(__name__)

VALID_LOG_LEVELS = ["info", "debug", "warning", "error", "critical"]
EVAL_MODES = ["auc", "ctr", "dtr", "tendency"]
APPROXIMATE_EXECUTIONS = {
    Execution.PUSH_CONSERVATIVE: parw_solver.PushMode.CONSERVATIVE,
    Execution.PUSH_FAITHFUL: parw_solver.PushMode.FAITHFUL,
}


class PipelineError(Exception):
    """Exception raised when a command cannot run on its inputs.

    Attributes:
        msg (str): Explanation of the error.
    """

    def __init__(self, msg: str):
        """Initialize a new instance of the PipelineError exception.

        Args:
            msg (str): Explanation of the error.
        """
        super().__init__(msg)
        self.msg = msg


HANDLED_ERRORS = (
    PipelineError,
    RunConfigInvalidError,
    graph_core.GraphError,
    parw_solver.SolverError,
    eval_harness.EvaluationError,
)


def _write_atomically(path: Path, render: Callable[[TextIO], None]) -> None:
    """Write a file through a temporary sibling renamed into place.

    Args:
        path: the destination.
        render: callback writing the content.
    """
    path = Path(path)
    handle, temporary = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(handle, "w", encoding="utf-8", newline="\n") as stream:
            render(stream)
        os.replace(temporary, path)
    except BaseException:
        Path(temporary).unlink(missing_ok=True)
        raise


def load_graph(path: Path) -> graph_core.BipartiteGraph:
    """Read a serialized graph.

    Args:
        path: the graph file.

    Returns:
        The graph.
    """
    return graph_core.parse_graph(Path(path).read_text(encoding="utf-8"))


def read_seed_keys(path: Path) -> List[str]:
    """Read one seed item key per line, ignoring blank lines and # comments.

    Args:
        path: the seeds file.

    Returns:
        The seed keys in file order.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line.strip() for line in lines if line.strip() and not line.startswith("#")]


def resolve_seeds(g: graph_core.BipartiteGraph, keys: Sequence[str]) -> List[int]:
    """Map seed item keys to vertex IDs.

    Args:
        g: the graph.
        keys: external item keys.

    Returns:
        The item vertex IDs.

    Raises:
        PipelineError: if a key is unknown or names a user.
    """
    if not keys:
        raise PipelineError("no seed keys given")
    user_side = [key for key in keys if g.item_id(key) is None and g.user_id(key) is not None]
    if user_side:
        raise PipelineError(f"seeds must be items, got users: {', '.join(user_side)}")
    unknown = [key for key in keys if g.item_id(key) is None]
    if unknown:
        raise PipelineError(f"unknown seed keys: {', '.join(unknown)}")
    return [cast(int, g.item_id(key)) for key in keys]


def _check_oracle_size(g: graph_core.BipartiteGraph, config: RunConfig) -> None:
    """Fail before any computation when the exact oracle cannot take the graph.

    Args:
        g: the graph.
        config: the run settings.

    Raises:
        OracleSizeExceededError: if the graph exceeds the dense cap.
    """
    if config.execution == Execution.EXACT and g.num_vertices > config.dense_cap:
        raise parw_solver.OracleSizeExceededError(
            f"oracle size exceeded: {g.num_vertices} vertices > cap {config.dense_cap}"
        )


def compute_scores(
    g: graph_core.BipartiteGraph, config: RunConfig, seed_ids: Sequence[int]
) -> Tuple[parw_solver.ScoreVector, Optional[parw_solver.PushState]]:
    """Score every vertex with the configured algorithm and execution.

    Args:
        g: the graph.
        config: the run settings.
        seed_ids: seed item vertex IDs.

    Returns:
        The scores and, for approximate executions, the push state.

    Raises:
        PipelineError: if the execution does not apply to the algorithm.
    """
    _check_oracle_size(g, config)
    seed = parw_solver.seed_vector(g, seed_ids)
    if config.algorithm == Algorithm.PARW_I:
        spec = parw_solver.LambdaSpec.imode(config.alpha)
    else:
        spec = parw_solver.LambdaSpec.dmode(config.alpha)
    decay = ppr_engine.decay_for_dmode(config.alpha)
    start = ppr_engine.mixed_seed(g, seed) if config.algorithm == Algorithm.PPR else seed

    if config.execution == Execution.POWER:
        if config.algorithm != Algorithm.PPR:
            raise PipelineError("execution=power applies to algorithm=ppr only")
        cfg = ppr_engine.PPRConfig(alpha=decay)
        return ppr_engine.ppr_iterate(g, cfg, seed), None
    if config.execution == Execution.EXACT:
        if config.algorithm == Algorithm.PPR:
            return ppr_engine.dmode_equivalent(g, decay, seed, dense_cap=config.dense_cap), None
        rates = parw_solver.lambda_vector(g, spec)
        return parw_solver.solve_exact(g, rates, start, dense_cap=config.dense_cap), None

    rates = parw_solver.lambda_vector(g, spec)
    if config.execution in APPROXIMATE_EXECUTIONS:
        state = parw_solver.aparw_push(
            g,
            rates,
            start,
            gamma=config.gamma,
            budget=config.budget,
            mode=APPROXIMATE_EXECUTIONS[config.execution],
        )
    else:
        state = parw_solver.aparw_sweep(
            g,
            rates,
            start,
            gamma=config.gamma,
            max_iters=config.max_iters,
            workers=config.workers,
        )
    return state.scores, state


def filter_rules(config: RunConfig) -> eval_harness.FilterRules:
    """Build the user filtering rules of a run.

    Args:
        config: the run settings.

    Returns:
        The rules, without attributes when no filters file is configured.
    """
    attributes = {}
    if config.filters:
        with open(config.filters, encoding="utf-8") as stream:
            attributes = eval_harness.read_attributes(stream)
    return eval_harness.FilterRules(excluded_flags=config.exclude, attributes=attributes)


def run_ranking(
    g: graph_core.BipartiteGraph, config: RunConfig, seed_ids: Sequence[int]
) -> Tuple[eval_harness.Ranking, Optional[parw_solver.PushState]]:
    """Score, sort and filter the users of a graph.

    Args:
        g: the graph.
        config: the run settings.
        seed_ids: seed item vertex IDs.

    Returns:
        The ranking and, for approximate executions, the push state.
    """
    scores, state = compute_scores(g, config, seed_ids)
    ranking = eval_harness.rank_users(g, scores, filter_rules(config), limit=config.limit)
    return ranking, state


def _require(config: RunConfig, *fields: str) -> None:
    """Check that path settings are present.

    Args:
        config: the run settings.
        fields: the required field names.

    Raises:
        PipelineError: if any of them is missing.
    """
    missing = [name for name in fields if getattr(config, name) is None]
    if missing:
        raise PipelineError(f"missing settings: {', '.join(missing)}")


def cmd_build(
    input_path: Path,
    fmt: graph_core.InteractionFormat,
    rules_path: Optional[Path],
    output_path: Path,
) -> int:
    """Build and serialize the user-item graph.

    Args:
        input_path: the interaction file.
        fmt: the interaction layout.
        rules_path: key=value preprocessing rules, optional.
        output_path: the graph file to write.

    Returns:
        The exit status.
    """
    rules = graph_core.PreprocessRules()
    if rules_path:
        rules = graph_core.PreprocessRules.from_mapping(read_key_values(rules_path))
    with open(input_path, "rb") as stream:
        records = graph_core.ingest_interactions(stream, fmt)
    # Every key seen in the input is catalogued, so filtered vertices can stay isolated.
    users = {r.user_key for r in records}
    items = {r.item_key for r in records}
    records = graph_core.apply_preprocess(records, rules)
    graph = graph_core.build_graph(
        records, extra_users=users, extra_items=items, drop_isolated=rules.drop_isolated
    )
    text = graph_core.serialize_graph(graph)
    _write_atomically(output_path, lambda stream: stream.write(text))
    print(f"users={graph.num_users} items={graph.num_items} edges={graph.num_edges}")
    return 0


def cmd_rank(config: RunConfig) -> int:
    """Rank the users of a graph for a set of seed items.

    Args:
        config: the run settings.

    Returns:
        The exit status.
    """
    _require(config, "graph", "seeds", "output")
    graph = load_graph(cast(Path, config.graph))
    _check_oracle_size(graph, config)
    keys = read_seed_keys(cast(Path, config.seeds))
    ranking, state = run_ranking(graph, config, resolve_seeds(graph, keys))
    header = (
        f"# algorithm={config.algorithm.value} execution={config.execution.value} "
        f"alpha={config.alpha!r} gamma={config.gamma!r} max_iters={config.max_iters} "
        f"seeds={','.join(keys)}\n"
    )
    trailer = None
    if state is not None:
        trailer = (
            f"residual={parw_solver.residual_mass(state)!r} dropped={state.dropped!r} "
            f"pushes={state.pushes} iterations={state.iterations}"
        )

    def render(stream: TextIO) -> None:
        """Write the header, the ranking and the accounting trailer."""
        stream.write(header)
        eval_harness.write_ranking(stream, ranking, trailer)

    _write_atomically(cast(Path, config.output), render)
    logger.info("Wrote %d ranked users to %s", len(ranking), config.output)
    return 0


def _profile(
    graph: graph_core.BipartiteGraph,
    config: RunConfig,
    seed_ids: Sequence[int],
    buckets: int,
    agg: eval_harness.Aggregation,
) -> Tuple[eval_harness.Ranking, np.ndarray]:
    """Rank once and aggregate the ranking into a degree profile."""
    ranking, _ = run_ranking(graph, config, seed_ids)
    profile = eval_harness.bucket_degree_profile(ranking, graph, buckets, agg)
    return ranking, profile.values


def cmd_compare(  # pylint: disable=too-many-arguments,too-many-locals
    config_a: RunConfig,
    config_b: RunConfig,
    buckets: int,
    output_prefix: Path,
    trials: int = 0,
    seed_count: int = 1,
    agg: eval_harness.Aggregation = eval_harness.Aggregation.MEAN,
) -> int:
    """Compare the degree profiles of two rankings of one graph.

    With trials > 0 the seeds files are ignored and every trial draws seed_count random
    items; the written profiles are then trial averages.

    Args:
        config_a: settings of ranking A.
        config_b: settings of ranking B.
        buckets: number of buckets.
        output_prefix: prefix of the two CSV files and the summary.
        trials: number of random seed trials, 0 to use the configured seeds.
        seed_count: random seed items per trial.
        agg: the bucket statistic.

    Returns:
        The exit status.

    Raises:
        PipelineError: if the configurations do not share one graph, or the bucket, trial
            or seed counts are out of range.
    """
    if buckets < 1:
        raise PipelineError("bucket count must be at least 1")
    if trials < 0:
        raise PipelineError("trial count must not be negative")
    _require(config_a, "graph")
    _require(config_b, "graph")
    if Path(cast(Path, config_a.graph)).resolve() != Path(cast(Path, config_b.graph)).resolve():
        raise PipelineError("both configurations must use the same graph")
    graph = load_graph(cast(Path, config_a.graph))
    _check_oracle_size(graph, config_a)
    _check_oracle_size(graph, config_b)
    summary = {"bucket_size": str(graph.num_users // buckets)}

    if trials > 0:
        if config_a.rng_seed is None:
            raise PipelineError("random trials require an explicit rng_seed")
        if not 1 <= seed_count <= graph.num_items:
            raise PipelineError(f"seed count must be between 1 and {graph.num_items}")
        rng = np.random.default_rng(config_a.rng_seed)
        item_ids = np.arange(graph.num_users + 1, graph.num_vertices + 1)
        totals_a = np.zeros(buckets)
        totals_b = np.zeros(buckets)
        wins = crossings = shared = 0
        for trial in range(trials):
            seed_ids = [int(v) for v in rng.choice(item_ids, size=seed_count, replace=False)]
            ranking_a, profile_a = _profile(graph, config_a, seed_ids, buckets, agg)
            ranking_b, profile_b = _profile(graph, config_b, seed_ids, buckets, agg)
            totals_a += profile_a
            totals_b += profile_b
            wins += int(profile_a[0] > profile_b[0])
            crossings += int(eval_harness.first_crossing(profile_a, profile_b) is not None)
            shared += eval_harness.overlap(ranking_a, ranking_b)
            logger.debug("Trial %d: bucket-1 %.3f vs %.3f", trial, profile_a[0], profile_b[0])
        profile_a, profile_b = totals_a / trials, totals_b / trials
        summary.update(
            trials=str(trials),
            bucket1_a_wins=str(wins),
            crossing_trials=str(crossings),
            mean_overlap=repr(shared / trials),
        )
    else:
        _require(config_a, "seeds")
        _require(config_b, "seeds")
        seeds_a = resolve_seeds(graph, read_seed_keys(cast(Path, config_a.seeds)))
        seeds_b = resolve_seeds(graph, read_seed_keys(cast(Path, config_b.seeds)))
        ranking_a, profile_a = _profile(graph, config_a, seeds_a, buckets, agg)
        ranking_b, profile_b = _profile(graph, config_b, seeds_b, buckets, agg)
        summary["overlap"] = str(eval_harness.overlap(ranking_a, ranking_b))

    crossing = eval_harness.first_crossing(profile_a, profile_b)
    summary.update(
        bucket1_a=repr(float(profile_a[0])),
        bucket1_b=repr(float(profile_b[0])),
        crossing="none" if crossing is None else str(crossing),
    )
    prefix = str(output_prefix)
    _write_atomically(
        Path(f"{prefix}_a.csv"), lambda s: eval_harness.write_curve(s, profile_a)
    )
    _write_atomically(
        Path(f"{prefix}_b.csv"), lambda s: eval_harness.write_curve(s, profile_b)
    )
    report = "".join(f"{key}={value}\n" for key, value in summary.items())
    _write_atomically(Path(f"{prefix}_summary.txt"), lambda s: s.write(report))
    sys.stdout.write(report)
    return 0


def cmd_eval(  # pylint: disable=too-many-arguments
    ranking_path: Path,
    feedback_path: Path,
    mode: str,
    bucket_size: int = 1,
    event: eval_harness.FeedbackEvent = eval_harness.FeedbackEvent.CLICKED,
    output_path: Optional[Path] = None,
) -> int:
    """Evaluate a ranking against a feedback log.

    Args:
        ranking_path: the ranking file.
        feedback_path: the feedback file.
        mode: auc, ctr, dtr or tendency.
        bucket_size: users per bucket for the tendency curve.
        event: the positive event for auc and tendency.
        output_path: where to write the result instead of standard output.

    Returns:
        The exit status.

    Raises:
        PipelineError: if the mode is unknown.
    """
    with open(ranking_path, encoding="utf-8") as stream:
        ranking = eval_harness.read_ranking(stream)
    with open(feedback_path, encoding="utf-8") as stream:
        log = eval_harness.read_feedback(stream)

    if mode == "tendency":
        curve = eval_harness.tendency_curve(ranking, log, bucket_size, event)
        logger.info(
            "Tendency curve over %d buckets, largest drop %.6f",
            len(curve),
            eval_harness.max_drop(curve),
        )

        def render(stream: TextIO) -> None:
            """Write the curve as CSV."""
            eval_harness.write_curve(stream, curve)

    else:
        if mode == "auc":
            value = eval_harness.ranking_auc(ranking, log, event)
        elif mode == "ctr":
            value = eval_harness.ctr(log)
        elif mode == "dtr":
            value = eval_harness.dtr(log)
        else:
            raise PipelineError(f"unknown evaluation mode {mode}")

        def render(stream: TextIO) -> None:
            """Write the metric value."""
            stream.write(f"{value!r}\n")

    if output_path:
        _write_atomically(output_path, render)
    else:
        render(sys.stdout)
    return 0


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    """Declare the RunConfig override flags of a subcommand."""
    parser.add_argument("--config", type=Path, help="key=value run configuration file")
    parser.add_argument("--graph", type=Path, help="serialized graph file")
    parser.add_argument("--algo", choices=[a.value for a in Algorithm], dest="algorithm")
    parser.add_argument(
        "--alpha",
        type=float,
        help="parw_i: absorption rate; parw_d: degree multiplier; ppr: decay is 1/(1+alpha)",
    )
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--iters", type=int, dest="max_iters")
    parser.add_argument("--exec", choices=[e.value for e in Execution], dest="execution")
    parser.add_argument("--seeds", type=Path, help="seed item keys, one per line")
    parser.add_argument("--filters", type=Path, help="user attributes TSV")
    parser.add_argument("--exclude", help="comma separated excluded flags")
    parser.add_argument("--budget", type=int, help="maximum push operations")
    parser.add_argument("--workers", type=int, help="sweep threads")
    parser.add_argument("--limit", type=int, help="keep only the top users")
    parser.add_argument("--dense-cap", type=int, dest="dense_cap")
    parser.add_argument("--rng-seed", type=int, dest="rng_seed")


RUN_FLAGS = (
    "graph",
    "algorithm",
    "alpha",
    "gamma",
    "max_iters",
    "execution",
    "seeds",
    "filters",
    "exclude",
    "budget",
    "workers",
    "limit",
    "dense_cap",
    "rng_seed",
)


def build_parser() -> argparse.ArgumentParser:
    """Build the command-line parser.

    Returns:
        The parser with the build, rank, compare and eval subcommands.
    """
    parser = argparse.ArgumentParser(prog="parw", description=__doc__)
    parser.add_argument("--log-level", choices=VALID_LOG_LEVELS, default="warning")
    commands = parser.add_subparsers(dest="command", required=True)

    build = commands.add_parser("build", help="build the user-item graph")
    build.add_argument("input", type=Path)
    build.add_argument(
        "--format",
        choices=[f.value for f in graph_core.InteractionFormat],
        default=graph_core.InteractionFormat.EDGE_TSV.value,
    )
    build.add_argument("--rules", type=Path, help="key=value preprocessing rules")
    build.add_argument("--out", type=Path, required=True)

    rank = commands.add_parser("rank", help="rank target users for seed items")
    _add_run_flags(rank)
    rank.add_argument("--out", type=Path, dest="output")

    compare = commands.add_parser("compare", help="compare degree profiles of two rankings")
    compare.add_argument("config_a", type=Path)
    compare.add_argument("config_b", type=Path)
    compare.add_argument("--buckets", type=int, default=100)
    compare.add_argument(
        "--agg", choices=[a.value for a in eval_harness.Aggregation], default="mean"
    )
    compare.add_argument("--trials", type=int, default=0)
    compare.add_argument("--seed-count", type=int, default=1, dest="seed_count")
    compare.add_argument("--rng-seed", type=int, dest="rng_seed")
    compare.add_argument("--out", type=Path, required=True)

    evaluate = commands.add_parser("eval", help="evaluate a ranking against feedback")
    evaluate.add_argument("ranking", type=Path)
    evaluate.add_argument("feedback", type=Path)
    evaluate.add_argument("--mode", choices=EVAL_MODES, required=True)
    evaluate.add_argument("--bucket-size", type=int, default=1, dest="bucket_size")
    evaluate.add_argument(
        "--event",
        choices=[e.value for e in eval_harness.FeedbackEvent if e.value != "received"],
        default=eval_harness.FeedbackEvent.CLICKED.value,
    )
    evaluate.add_argument("--out", type=Path)
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    """Run the selected subcommand.

    Args:
        args: the parsed arguments.

    Returns:
        The exit status.
    """
    if args.command == "build":
        return cmd_build(args.input, graph_core.InteractionFormat(args.format), args.rules, args.out)
    if args.command == "rank":
        overrides = {name: getattr(args, name) for name in RUN_FLAGS + ("output",)}
        return cmd_rank(RunConfig.from_sources(args.config, overrides))
    if args.command == "compare":
        overrides = {"rng_seed": args.rng_seed}
        return cmd_compare(
            RunConfig.from_sources(args.config_a, overrides),
            RunConfig.from_sources(args.config_b, overrides),
            args.buckets,
            args.out,
            trials=args.trials,
            seed_count=args.seed_count,
            agg=eval_harness.Aggregation(args.agg),
        )
    return cmd_eval(
        args.ranking,
        args.feedback,
        args.mode,
        bucket_size=args.bucket_size,
        event=eval_harness.FeedbackEvent(args.event),
        output_path=args.out,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse the command line and run one command.

    Args:
        argv: the arguments, defaulting to sys.argv.

    Returns:
        0 when every declared output was written, 1 on a handled failure.
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return _dispatch(args)
    except HANDLED_ERRORS as exc:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(f"error: {exc.msg}", file=sys.stderr)
    except OSError as exc:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":  # pragma: nocover
    sys.exit(main())
