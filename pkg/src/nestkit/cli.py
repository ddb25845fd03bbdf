"""nestkit command-line interface."""

import argparse
import inspect
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from . import __version__
from .config import NestkitConfig, get_config, load_config
from .exceptions import InvalidArgumentException, NestkitException
from .experiments import (
    DIAMOND_RING_SAMPLERS,
    ExperimentManifest,
    acceptance_scaling_experiment,
    cost_curve_experiment,
    diamond_ring_benchmark,
    recommended_live_points,
    utest_power_experiment,
    write_experiment,
)
from .problems import PROBLEMS, Problem, get_problem, list_problems
from .runner import NestedRun, diagnose_run, format_results, merge_runs
from .samplers import step_config_for
from .schema import (
    AgentKind,
    AgentPolicy,
    AutoTune,
    DirectionMode,
    EstimatorKind,
    PlateauMode,
    RunManifest,
    SamplerKind,
    ShrinkageEstimator,
    StepSamplerConfig,
    TerminationPolicy,
    validated,
)

logger = logging.getLogger(__name__)

EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_INTERRUPTED = 130

AGENTS = {
    "classic": AgentKind.CONSTANT_N,
    "dynamic": AgentKind.DYNAMIC_QUANTILE,
    "posterior-weight": AgentKind.POSTERIOR_WEIGHT,
    "min-live-floor": AgentKind.MIN_LIVE_FLOOR,
}
DIRECTIONS = {
    "axis": DirectionMode.AXIS,
    "sphere": DirectionMode.RANDOM_SPHERE,
    "covariance": DirectionMode.COVARIANCE,
}
EXPERIMENTS = ("acceptance-scaling", "utest-power", "diamond-ring", "cost-curve")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}"
        )


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated numbers, got {text!r}"
        )


def _nlive(text: str) -> Any:
    if text == "auto":
        return text
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"--nlive takes a positive integer or 'auto', got {text!r}"
        )
    if value < 1:
        raise argparse.ArgumentTypeError("--nlive must be positive")
    return value


def _scalar(text: str) -> Any:
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def problem_params(args: argparse.Namespace) -> Dict[str, Any]:
    """Problem parameters from --d/--sigma/--r/--w and --param K=V.

    Parameters the problem factory does not accept are dropped with a warning.
    """
    params: Dict[str, Any] = {}
    for key in ("d", "sigma", "r", "w"):
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    for item in args.param or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise InvalidArgumentException(
                f"--param expects KEY=VALUE, got {item!r}", argument="param"
            )
        params[key.replace("-", "_")] = _scalar(value)

    factory = PROBLEMS.get(args.problem)
    if factory is None:
        return params
    accepted = inspect.signature(factory).parameters
    ignored = sorted(set(params) - set(accepted))
    if ignored:
        logger.warning(f"Problem {args.problem} ignores parameters {ignored}")
    return {k: v for k, v in params.items() if k in accepted}


def seed_from(args: argparse.Namespace, config: NestkitConfig) -> int:
    """NESTKIT_SEED wins over --seed."""
    if os.getenv("NESTKIT_SEED") is not None:
        return load_config().seed
    return args.seed if args.seed is not None else config.seed


def build_manifest(
    args: argparse.Namespace,
    problem: Problem,
    params: Dict[str, Any],
    config: NestkitConfig,
) -> RunManifest:
    kind = SamplerKind(args.sampler)
    step = None
    if kind not in (SamplerKind.ELLIPSOID, SamplerKind.MLFRIENDS):
        values: Dict[str, Any] = {
            "auto_tune": AutoTune(args.adapt),
            "region_filter": args.region_filter,
            "max_steps": config.sampler.max_steps,
        }
        if args.steps is not None:
            values["steps_per_sample"] = args.steps
        values["scale"] = args.scale
        if args.scale is None:
            values["scale"] = config.sampler.walk_scale
        if args.direction is not None:
            values["direction"] = DIRECTIONS[args.direction]
        step = step_config_for(kind, validated(StepSamplerConfig, **values))

    n_live = args.nlive if args.nlive is not None else config.nlive
    if n_live == "auto":
        n_min = args.nlive_min or config.nlive_min
        n_live = recommended_live_points(problem.dimension, n_min)
        logger.info(f"Using N = {n_live} live points for d = {problem.dimension}")

    agent_values: Dict[str, Any] = {"kind": AGENTS[args.agent], "n_live": n_live}
    if args.target_logz_err is not None:
        agent_values["target_sigma"] = args.target_logz_err
    if args.target_ess is not None:
        agent_values["target_ess"] = args.target_ess
    elif args.target_logz_err is None:
        agent_values["target_ess"] = config.target_ess
    for key in ("max_rounds", "expansions", "max_live"):
        if getattr(args, key) is not None:
            agent_values[key] = getattr(args, key)

    termination_values: Dict[str, Any] = {
        "epsilon_remainder": args.eps,
        "min_iterations_factor": args.min_h_factor,
        "plateau_mode": PlateauMode(args.plateau_mode),
    }
    if args.max_iter is not None:
        termination_values["max_iterations"] = args.max_iter

    return validated(
        RunManifest,
        problem=args.problem,
        problem_params=params,
        sampler=kind,
        step=step,
        agent=validated(AgentPolicy, **agent_values),
        termination=validated(TerminationPolicy, **termination_values),
        estimator=validated(ShrinkageEstimator, kind=EstimatorKind(args.estimator)),
        seed=seed_from(args, config),
        bootstrap_rounds=(
            config.sampler.bootstrap_rounds
            if args.bootstrap_rounds is None
            else args.bootstrap_rounds
        ),
    )


def _run_dir(path: str) -> Path:
    p = Path(path)
    return p.parent if p.suffix == ".nstree" or p.is_file() else p


def cmd_run(
    args: argparse.Namespace, parser: argparse.ArgumentParser, config: NestkitConfig
) -> int:
    if args.resume:
        return _resume(_run_dir(args.resume), config)
    if not args.problem:
        parser.error("run needs --problem (or --resume)")

    params = problem_params(args)
    problem = get_problem(args.problem, **params)
    manifest = build_manifest(args, problem, params, config)
    with NestedRun(manifest, args.out, config, problem=problem) as run:
        outcome = run.execute()
    sys.stdout.write(format_results(outcome.summary))
    return 0


def _resume(run_dir: Path, config: NestkitConfig) -> int:
    with NestedRun.resume(run_dir, config) as run:
        outcome = run.execute()
    sys.stdout.write(format_results(outcome.summary))
    return 0


def cmd_resume(
    args: argparse.Namespace, parser: argparse.ArgumentParser, config: NestkitConfig
) -> int:
    return _resume(_run_dir(args.run), config)


def cmd_merge(
    args: argparse.Namespace, parser: argparse.ArgumentParser, config: NestkitConfig
) -> int:
    outcome = merge_runs(args.runs, args.out, config)
    sys.stdout.write(format_results(outcome.summary))
    return 0


def cmd_diagnose(
    args: argparse.Namespace, parser: argparse.ArgumentParser, config: NestkitConfig
) -> int:
    report = diagnose_run(
        _run_dir(args.run), fold_posteriors=args.fold_posteriors, config=config
    )
    for line in report.lines():
        sys.stdout.write(f"# {line}\n")
    sys.stdout.write("insertion\tz_rolling\n")
    for i, z in enumerate(report.z_trace):
        sys.stdout.write(f"{i}\t{z!r}\n")
    return 0


def cmd_experiment(
    args: argparse.Namespace, parser: argparse.ArgumentParser, config: NestkitConfig
) -> int:
    seed = seed_from(args, config)
    jobs = config.jobs
    params: Dict[str, Any]
    rows: Sequence[Any]

    if args.name == "acceptance-scaling":
        params = {
            "d_list": args.d_list or [2, 4, 8],
            "n_list": args.n_list or [100, 400, 2000],
            "bootstrap_rounds": (
                args.bootstrap_rounds or config.sampler.bootstrap_rounds
            ),
            "repeats": args.repeats,
        }
        rows = acceptance_scaling_experiment(seed=seed, jobs=jobs, **params)
    elif args.name == "utest-power":
        params = {"n_list": args.n_list or [1000, 400, 100], "trials": args.trials}
        if args.values:
            params["coverages"] = params["slants"] = args.values
        rows = utest_power_experiment(seed=seed, jobs=jobs, **params)
    elif args.name == "diamond-ring":
        params = {
            "samplers": args.samplers or ["mlfriends", "harm-auto", "harm-64"],
            "n_live": args.nlive or 100,
            "seeds": args.seeds or [1, 2, 3, 4, 5],
        }
        rows = diamond_ring_benchmark(jobs=jobs, **params)
    else:
        params = {
            "d_list": args.d_list or list(range(1, 21)),
            "n_live": args.nlive or 400,
            "case": args.case,
            "epsilon": args.eps,
        }
        rows = cost_curve_experiment(**params)

    manifest = ExperimentManifest(
        experiment=args.name, seed=seed, jobs=jobs, params=params
    )
    table = write_experiment(args.out, manifest, rows)
    sys.stdout.write(f"{table}\n")
    return 0


def cmd_problems(
    args: argparse.Namespace, parser: argparse.ArgumentParser, config: NestkitConfig
) -> int:
    for name, description in list_problems():
        sys.stdout.write(f"{name}\t{description}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nestkit",
        description=(
            "Nested sampling as a tree search: evidence, posteriors and sampler "
            "diagnostics."
        ),
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    parser.add_argument(
        "--log-level",
        default=None,
        help="Logging level (default: NESTKIT_LOG_LEVEL or INFO)",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    p_run = subparsers.add_parser("run", help="Run nested sampling on a problem")
    p_run.add_argument("--problem", help="Built-in problem name or problem file path")
    p_run.add_argument(
        "--resume",
        metavar="PATH",
        help="Continue the run in this directory or tree file",
    )
    p_run.add_argument("--d", type=int, help="Problem dimension")
    p_run.add_argument("--sigma", type=float, help="Gaussian width")
    p_run.add_argument("--r", type=float, help="Shell radius")
    p_run.add_argument("--w", type=float, help="Shell width")
    p_run.add_argument(
        "--param", action="append", metavar="KEY=VALUE", help="Extra problem parameter"
    )
    p_run.add_argument(
        "--sampler",
        choices=[k.value for k in SamplerKind],
        default=SamplerKind.MLFRIENDS.value,
    )
    p_run.add_argument(
        "--steps", type=int, help="Steps per new point for walk samplers"
    )
    p_run.add_argument(
        "--adapt", choices=[a.value for a in AutoTune], default=AutoTune.OFF.value
    )
    p_run.add_argument(
        "--region-filter",
        action="store_true",
        help="Reject walk proposals outside the MLFriends region",
    )
    p_run.add_argument(
        "--direction", choices=sorted(DIRECTIONS), help="Slice direction proposal"
    )
    p_run.add_argument("--scale", type=float, help="Initial gauss-walk scale")
    p_run.add_argument("--agent", choices=sorted(AGENTS), default="classic")
    p_run.add_argument(
        "--nlive",
        type=_nlive,
        help="Live points, or 'auto' for max(7 d^2, --nlive-min)",
    )
    p_run.add_argument("--nlive-min", type=int, help="Lower bound for --nlive auto")
    p_run.add_argument(
        "--target-ess",
        type=float,
        help="Dynamic agents stop at this effective sample size",
    )
    p_run.add_argument(
        "--target-logz-err", type=float, help="Target sigma(logZ) for dynamic agents"
    )
    p_run.add_argument("--max-rounds", type=int, help="Maximum dynamic rounds")
    p_run.add_argument(
        "--expansions", type=int, help="Siblings per posterior-weight round"
    )
    p_run.add_argument(
        "--max-live", type=int, help="Ceiling for the min-live-floor agent"
    )
    p_run.add_argument(
        "--eps",
        type=float,
        default=1e-3,
        help="Remainder fraction Z_live/Z_dead to stop at",
    )
    p_run.add_argument(
        "--min-h-factor",
        type=float,
        default=1.0,
        help="Run at least factor * H * N iterations",
    )
    p_run.add_argument("--max-iter", type=int, help="Hard iteration cap")
    p_run.add_argument(
        "--plateau-mode",
        choices=[m.value for m in PlateauMode],
        default=PlateauMode.REMOVE_WITHOUT_REPLACEMENT.value,
    )
    p_run.add_argument(
        "--estimator",
        choices=[e.value for e in EstimatorKind],
        default=EstimatorKind.ARITHMETIC.value,
    )
    p_run.add_argument("--bootstrap-rounds", type=int, help="Region bootstrap rounds")
    p_run.add_argument("--seed", type=int, help="Master seed (NESTKIT_SEED overrides)")
    p_run.add_argument(
        "--jobs", type=int, help="Worker threads for uncertainty resampling"
    )
    p_run.add_argument("--out", default="out", help="Output directory")
    p_run.set_defaults(func=cmd_run)

    p_resume = subparsers.add_parser("resume", help="Continue an interrupted run")
    p_resume.add_argument("run", help="Run directory or its tree file")
    p_resume.add_argument("--jobs", type=int)
    p_resume.set_defaults(func=cmd_resume)

    p_merge = subparsers.add_parser(
        "merge", help="Merge completed runs of the same problem"
    )
    p_merge.add_argument("runs", nargs="+", help="Run directories")
    p_merge.add_argument(
        "--out", required=True, help="Output directory for the merged run"
    )
    p_merge.add_argument("--jobs", type=int)
    p_merge.set_defaults(func=cmd_merge)

    p_diag = subparsers.add_parser(
        "diagnose", help="Insertion-order tests from a run's dead-point log"
    )
    p_diag.add_argument("run", help="Run directory")
    p_diag.add_argument(
        "--fold-posteriors",
        type=int,
        metavar="K",
        help="Also write K per-fold posterior tables",
    )
    p_diag.set_defaults(func=cmd_diagnose)

    p_exp = subparsers.add_parser("experiment", help="Run a scripted study")
    p_exp.add_argument("name", choices=EXPERIMENTS)
    p_exp.add_argument("--out", required=True, help="Output directory")
    p_exp.add_argument("--seed", type=int)
    p_exp.add_argument("--jobs", type=int)
    p_exp.add_argument("--d-list", type=_int_list, help="Dimensions, comma-separated")
    p_exp.add_argument(
        "--n-list", type=_int_list, help="Live point counts, comma-separated"
    )
    p_exp.add_argument("--repeats", type=int, default=40)
    p_exp.add_argument("--bootstrap-rounds", type=int)
    p_exp.add_argument("--trials", type=int, default=10000)
    p_exp.add_argument(
        "--values", type=_float_list, help="Coverage/slant values, comma-separated"
    )
    p_exp.add_argument(
        "--samplers",
        type=lambda s: s.split(","),
        help=f"Any of {','.join(DIAMOND_RING_SAMPLERS)}",
    )
    p_exp.add_argument("--seeds", type=_int_list)
    p_exp.add_argument("--nlive", type=int)
    p_exp.add_argument("--case", choices=["A", "B"], default="A")
    p_exp.add_argument("--eps", type=float, default=1e-3)
    p_exp.set_defaults(func=cmd_experiment)

    p_problems = subparsers.add_parser("problems", help="Built-in problems")
    p_problems.add_argument("action", choices=["list"])
    p_problems.set_defaults(func=cmd_problems)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point for the ``nestkit`` console script."""
    parser = build_parser()
    args = parser.parse_args(argv)
    level = args.log_level or os.getenv("NESTKIT_LOG_LEVEL", "INFO")
    logging.basicConfig(
        level=level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        config = get_config()
        if getattr(args, "jobs", None):
            config = replace(config, jobs=args.jobs)
        return args.func(args, parser, config)
    except KeyboardInterrupt:
        logger.warning(
            "Interrupted; the tree file and last checkpoint are kept for resume"
        )
        return EXIT_INTERRUPTED
    except NestkitException as e:
        logger.error(f"{e.error_code}: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
