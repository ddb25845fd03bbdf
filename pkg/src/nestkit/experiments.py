"""Scripted studies: ellipsoid acceptance scaling, cost curves, U-test power
and the diamond-ring sampler comparison.

Every experiment derives its random streams from the master seed by
counter, so results do not depend on ``jobs``. Tables are written as
tab-separated text next to a JSON manifest of the exact configuration.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import (
    Any,
    Callable,
    Dict,
    Iterable,
    List,
    Optional,
    Sequence,
    Tuple,
    TypeVar,
    Union,
)

import numpy as np
from pydantic import BaseModel, Field
from scipy import stats

from .agents import ConstantNAgent
from .config import get_config, make_rng
from .exceptions import InvalidArgumentException, NestkitException
from .integrator import RunResult, estimate_uncertainty, integrate
from .problems import Problem, diamond_ring
from .regions import fit_ellipsoid, log_unit_ball_volume, sample_unit_ball
from .samplers import StepSampler, create_sampler
from .schema import (
    FORMAT_VERSION,
    AutoTune,
    SamplerKind,
    StepKind,
    StepSamplerConfig,
    TerminationPolicy,
)
from .tree import create_tree

logger = logging.getLogger(__name__)

EXPERIMENT_MAGIC = "# nestkit-experiment"
DETECTION_Z = 3.0
DETECTION_P = 0.0027

T = TypeVar("T")
R = TypeVar("R")


class ExperimentManifest(BaseModel):
    """Exact configuration of one experiment invocation."""
    format_version: int = Field(
        default=FORMAT_VERSION, description="Manifest format version"
    )
    experiment: str = Field(description="Experiment name")
    seed: int = Field(description="Master seed")
    jobs: int = Field(default=1, description="Worker threads")
    params: Dict[str, Any] = Field(
        default_factory=dict, description="Experiment parameters"
    )


def _map(func: Callable[[T], R], tasks: Sequence[T], jobs: int) -> List[R]:
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(func, tasks))
    return [func(task) for task in tasks]


def write_table(path: Union[str, Path], name: str, rows: Sequence[Any]) -> None:
    """Tab-separated table of dataclass rows with a versioned header."""
    records = [asdict(row) for row in rows]
    columns = list(records[0]) if records else []
    with open(path, "w", encoding="utf-8") as stream:
        stream.write(f"{EXPERIMENT_MAGIC} version={FORMAT_VERSION} name={name}\n")
        stream.write("\t".join(columns) + "\n")
        for record in records:
            stream.write("\t".join(_cell(record[c]) for c in columns) + "\n")


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_cell(v) for v in value)
    return str(value).replace("\t", " ")


def write_experiment(
    out_dir: Union[str, Path], manifest: ExperimentManifest, rows: Sequence[Any]
) -> Path:
    """Write ``<name>.tsv`` and ``<name>.manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / f"{manifest.experiment}.tsv"
    write_table(table, manifest.experiment, rows)
    (out / f"{manifest.experiment}.manifest.json").write_text(
        json.dumps(manifest.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8"
    )
    logger.info(f"Wrote {len(rows)} rows to {table}")
    return table


# Ellipsoid acceptance and cost scaling

def predicted_acceptance(d: int, n_live: int) -> float:
    """Empirical acceptance rate of a bootstrapped ellipsoid around N points in d."""
    if d < 1 or n_live < 1:
        raise InvalidArgumentException("d and N must be positive", argument="d")
    return (1.07 - math.log(d) / 3.0) * math.exp(-((6.83 * d**1.9) / n_live) ** 0.75)


def recommended_live_points(d: int, n_min: int = 0) -> int:
    """max(7 d^2, n_min): keeps the ellipsoid acceptance rate near one half."""
    if d < 1:
        raise InvalidArgumentException("d must be positive", argument="d")
    return max(7 * d * d, n_min)


@dataclass
class AcceptanceRow:
    d: int
    n_live: int
    alpha_mean: Optional[float]
    alpha_std: Optional[float]
    alpha_formula: float
    repeats: int
    note: str = ""


def ellipsoid_acceptance(
    d: int, n_live: int, bootstrap_rounds: int, rng: np.random.Generator
) -> float:
    """Volume of the unit ball over the ellipsoid fitted to N points drawn from it."""
    points = np.vstack([sample_unit_ball(d, rng) for _ in range(n_live)])
    ellipsoid = fit_ellipsoid(points, bootstrap_rounds, rng)
    return math.exp(log_unit_ball_volume(d) - ellipsoid.log_volume)


def acceptance_scaling_experiment(
    d_list: Iterable[int],
    n_list: Iterable[int],
    bootstrap_rounds: int = 50,
    repeats: int = 40,
    seed: int = 1,
    jobs: int = 1,
) -> List[AcceptanceRow]:
    """Measured ellipsoid acceptance against the empirical formula for every (d, N)."""
    rows = []
    for d in d_list:
        for n_live in n_list:
            formula = predicted_acceptance(d, n_live)
            if n_live <= d + 1:
                rows.append(
                    AcceptanceRow(
                        d,
                        n_live,
                        None,
                        None,
                        formula,
                        0,
                        f"skipped: N must exceed d + 1 = {d + 1}",
                    )
                )
                continue

            def one(r: int, d: int = d, n_live: int = n_live) -> float:
                return ellipsoid_acceptance(
                    d, n_live, bootstrap_rounds, make_rng(seed, d, n_live, r)
                )

            alphas = np.array(_map(one, list(range(repeats)), jobs))
            row = AcceptanceRow(
                d,
                n_live,
                float(alphas.mean()),
                float(alphas.std(ddof=1)) if repeats > 1 else 0.0,
                formula,
                repeats,
            )
            logger.info(
                f"d={d} N={n_live}: alpha {row.alpha_mean:.3f} "
                f"+- {row.alpha_std:.3f} (formula {formula:.3f})"
            )
            rows.append(row)
    return rows


@dataclass
class CostRow:
    d: int
    n_live: int
    case: str
    alpha: float
    iterations: float
    cost: float


def cost_curve_experiment(
    d_list: Iterable[int],
    n_live: int = 400,
    case: str = "A",
    epsilon: float = 1e-3,
    information_per_dim: float = 10.0,
) -> List[CostRow]:
    """Total likelihood evaluations C = N + N ln(Vp / (Vt eps)) / alpha.

    Case "A" gains ``information_per_dim`` per added parameter
    (Vp/Vt = K^d); case "B" keeps the total information fixed (Vp/Vt = K).
    The remainder fraction eps plays the role of the termination fraction s.
    """
    if case not in ("A", "B"):
        raise InvalidArgumentException(f"unknown case {case!r}", argument="case")
    if not 0.0 < epsilon < 1.0:
        raise InvalidArgumentException("epsilon must be in (0, 1)", argument="epsilon")
    rows = []
    for d in d_list:
        log_ratio = (d if case == "A" else 1) * math.log(information_per_dim)
        iterations = n_live * (log_ratio - math.log(epsilon))
        alpha = predicted_acceptance(d, n_live)
        if not alpha > 0:
            raise InvalidArgumentException(
                f"acceptance formula is not positive at d={d}", argument="d"
            )
        rows.append(
            CostRow(d, n_live, case, alpha, iterations, n_live + iterations / alpha)
        )
    return rows


# U test against KS test

@dataclass
class PowerRow:
    n_live: int
    scenario: str
    value: float
    trials: int
    ks_fraction: float
    u_fraction: float


def coverage_orders(
    n_live: int, coverage: float, size: int, rng: np.random.Generator
) -> np.ndarray:
    """Insertion orders uniform on 0 .. ceil(N * coverage) - 1."""
    top = min(max(1, math.ceil(n_live * coverage)), n_live)
    return rng.integers(0, top, size=size)


def slant_orders(
    n_live: int, slant: float, size: int, rng: np.random.Generator
) -> np.ndarray:
    """Insertion orders with P(i) proportional to (i + 1)^(slant - 1); 1 is uniform."""
    p = np.arange(1, n_live + 1, dtype=float) ** (slant - 1.0)
    return rng.choice(n_live, size=size, p=p / p.sum())


def u_test_z(orders: np.ndarray, n_live: int) -> float:
    n = len(orders)
    return float((np.sum((2.0 * orders + 1.0) / n_live) - n) / math.sqrt(n / 3.0))


def utest_power_experiment(
    n_list: Sequence[int] = (1000, 400, 100),
    coverages: Sequence[float] = (0.9, 0.96, 0.98),
    slants: Sequence[float] = (0.9, 0.96, 0.98),
    trials: int = 10000,
    seed: int = 1,
    jobs: int = 1,
) -> List[PowerRow]:
    """Fraction of |z| > 3 detections by the KS and U tests on N orders per trial."""
    if trials < 1:
        raise InvalidArgumentException("need at least one trial", argument="trials")
    scenarios: List[Tuple[str, float, Callable[..., np.ndarray]]] = [
        ("coverage", c, coverage_orders) for c in coverages
    ] + [("slant", s, slant_orders) for s in slants]

    rows = []
    for n_live in n_list:
        for index, (name, value, generate) in enumerate(scenarios):

            def one(
                t: int,
                n_live: int = n_live,
                index: int = index,
                value: float = value,
                generate=generate,
            ) -> Tuple[bool, bool]:
                orders = generate(
                    n_live, value, n_live, make_rng(seed, n_live, index, t)
                )
                ks_p = float(stats.kstest(orders / n_live, "uniform").pvalue)
                return ks_p < DETECTION_P, abs(u_test_z(orders, n_live)) > DETECTION_Z

            hits = np.array(_map(one, list(range(trials)), jobs))
            row = PowerRow(
                n_live,
                name,
                value,
                trials,
                float(hits[:, 0].mean()),
                float(hits[:, 1].mean()),
            )
            logger.info(
                f"N={n_live} {name}={value}: "
                f"KS {row.ks_fraction:.5f}, U {row.u_fraction:.5f}"
            )
            rows.append(row)
    return rows


# Diamond ring benchmark

DIAMOND_RING_SAMPLERS: Dict[str, Tuple[SamplerKind, Optional[StepSamplerConfig]]] = {
    "mlfriends": (SamplerKind.MLFRIENDS, None),
    "harm-auto": (
        SamplerKind.HARM,
        StepSamplerConfig(kind=StepKind.HARM, auto_tune=AutoTune.MOVE_DISTANCE),
    ),
    "harm-64": (
        SamplerKind.HARM, StepSamplerConfig(kind=StepKind.HARM, steps_per_sample=64)
    ),
    "slice-auto": (
        SamplerKind.SLICE,
        StepSamplerConfig(kind=StepKind.SLICE_AXIS, auto_tune=AutoTune.MOVE_DISTANCE),
    ),
    "gauss-auto": (
        SamplerKind.GAUSS,
        StepSamplerConfig(kind=StepKind.GAUSS_WALK, auto_tune=AutoTune.MOVE_DISTANCE),
    ),
}


@dataclass
class PhaseTransition:
    """A flat stretch of accumulated log Z followed by a jump."""
    iteration: int
    plateau_start: int
    rise: float


def accumulated_log_evidence(result: RunResult) -> np.ndarray:
    log_w = np.array([p.log_weight for p in result.state.dead_points])
    return np.logaddexp.accumulate(log_w)


def detect_phase_transition(
    log_evidence_trace: Sequence[float],
    window: Optional[int] = None,
    flat: float = 0.05,
    jump: float = 1.0,
) -> Optional[PhaseTransition]:
    """First point where log Z, flat over the previous window, rises by ``jump`` nats.

    ``window`` defaults to 2% of the trace. Returns None when the trace has
    no such feature.
    """
    trace = np.asarray(log_evidence_trace, dtype=float)
    if window is None:
        window = max(1, len(trace) // 50)
    finite = np.isfinite(trace)
    if not finite.any():
        return None
    start = int(np.argmax(finite))
    for i in range(start + window, len(trace) - window):
        before = trace[i] - trace[i - window]
        after = trace[i + window] - trace[i]
        if before < flat and after > jump:
            plateau_start = i - window
            while plateau_start > start and trace[i] - trace[plateau_start - 1] < flat:
                plateau_start -= 1
            return PhaseTransition(i, plateau_start, float(after))
    return None


def count_rises(
    trace: Sequence[float], factor: float = 4.0, baseline_fraction: float = 0.2
) -> int:
    """Separate excursions of ``trace`` above ``factor`` times its early baseline.

    The baseline is the median of the first 20% of the trace. An excursion
    ends once the trace drops below half the threshold again.
    """
    values = np.asarray(trace, dtype=float)
    if values.size == 0:
        return 0
    head = values[: max(1, int(len(values) * baseline_fraction))]
    threshold = factor * float(np.median(head))
    rises = 0
    above = False
    for v in values:
        if not above and v > threshold:
            rises += 1
            above = True
        elif above and v < 0.5 * threshold:
            above = False
    return rises


@dataclass
class DiamondRingRow:
    sampler: str
    seed: int
    n_live: int
    likelihood_evaluations: Optional[int] = None
    effective_sample_size: Optional[float] = None
    log_evidence: Optional[float] = None
    log_evidence_uncertainty: Optional[float] = None
    oracle_log_evidence: Optional[float] = None
    deviation_sigma: Optional[float] = None
    phase_transition_iteration: Optional[int] = None
    step_rises: Optional[int] = None
    error: str = ""


def nested_run(
    problem: Problem,
    kind: SamplerKind,
    step: Optional[StepSamplerConfig],
    n_live: int,
    seed: int,
    termination: Optional[TerminationPolicy] = None,
) -> Tuple[RunResult, Any, int]:
    """In-memory constant-N run; returns result, sampler and evaluation count."""
    config = get_config()
    sampler = create_sampler(kind, step, config.sampler)
    rng = make_rng(seed)
    tree = create_tree(problem.dimension)
    agent = ConstantNAgent(problem, sampler, rng, n_live, termination)
    result = integrate(tree, agent=agent)
    folds = min(config.uncertainty_folds, len(tree.root_children()))
    if folds >= 2:
        result.log_evidence_uncertainty = estimate_uncertainty(
            tree, folds=folds, resamples=config.uncertainty_resamples, seed=seed
        )
    return result, sampler, agent.initial_evaluations + sampler.evaluations


def diamond_ring_benchmark(
    samplers: Sequence[str] = ("mlfriends", "harm-auto", "harm-64"),
    n_live: int = 100,
    seeds: Sequence[int] = (1, 2, 3, 4, 5),
    problem: Optional[Problem] = None,
    jobs: int = 1,
) -> List[DiamondRingRow]:
    """Run each sampler on the diamond ring and compare with the quadrature oracle."""
    unknown = [s for s in samplers if s not in DIAMOND_RING_SAMPLERS]
    if unknown:
        raise InvalidArgumentException(
            f"unknown samplers {unknown}; choose from {sorted(DIAMOND_RING_SAMPLERS)}",
            argument="samplers",
        )
    problem = problem or diamond_ring()
    oracle = problem.analytic_log_z

    def one(task: Tuple[str, int]) -> DiamondRingRow:
        label, seed = task
        kind, step = DIAMOND_RING_SAMPLERS[label]
        row = DiamondRingRow(label, seed, n_live, oracle_log_evidence=oracle)
        try:
            result, sampler, evaluations = nested_run(problem, kind, step, n_live, seed)
        except NestkitException as e:
            logger.warning(f"{label} seed {seed} failed: {e}")
            row.error = f"{e.error_code}: {e}"
            return row
        row.likelihood_evaluations = evaluations
        row.effective_sample_size = result.effective_sample_size
        row.log_evidence = result.log_evidence
        row.log_evidence_uncertainty = result.log_evidence_uncertainty
        if oracle is not None and result.log_evidence_uncertainty > 0:
            deviation = result.log_evidence - oracle
            row.deviation_sigma = deviation / result.log_evidence_uncertainty
        transition = detect_phase_transition(accumulated_log_evidence(result))
        row.phase_transition_iteration = transition.iteration if transition else None
        tuned = isinstance(sampler, StepSampler)
        if tuned and sampler.config.auto_tune != AutoTune.OFF:
            row.step_rises = count_rises(sampler.step_trace)
        logger.info(
            f"{label} seed {seed}: logZ {result.log_evidence:.3f} "
            f"+- {result.log_evidence_uncertainty:.3f} (oracle {oracle!r}), "
            f"{evaluations} evaluations, ESS {result.effective_sample_size:.0f}"
        )
        return row

    return _map(one, [(label, seed) for label in samplers for seed in seeds], jobs)
