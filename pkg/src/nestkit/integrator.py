"""Breadth-first integration of an exploration tree.

The frontier holds the live nodes sorted by log-likelihood. Each iteration
removes the lowest node, shrinks the remaining prior volume according to
the shrinkage estimator, books the node as a dead point and enqueues its
children. All accumulation is done in log space.
"""

import bisect
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    TYPE_CHECKING,
    Dict,
    Iterable,
    List,
    Optional,
    Sequence,
    TextIO,
    Tuple,
    Union,
)

import numpy as np
from scipy.special import logsumexp

from .config import make_rng
from .exceptions import (
    DataException,
    InvalidArgumentException,
    InvalidStateException,
    ParseException,
)
from .schema import FORMAT_VERSION, EstimatorKind, RunSummary, ShrinkageEstimator
from .tree import TreeLike

if TYPE_CHECKING:
    from .agents import NodeExpandingAgent
    from .diagnostics import InsertionOrderMonitor

logger = logging.getLogger(__name__)

DEAD_POINT_MAGIC = "# nestkit-deadpoints"
DEAD_POINT_COLUMNS = (
    "iteration",
    "node_id",
    "log_likelihood",
    "log_volume",
    "log_weight",
    "n_live",
    "insertion_order",
    "insertion_n",
)


def _log_shrink(
    estimator: ShrinkageEstimator, n: int, rng: np.random.Generator
) -> Tuple[float, float]:
    """(log removed fraction, log retained fraction) for one step at N live points."""
    if n < 1:
        raise InvalidArgumentException(
            f"live point count must be positive, got {n}", argument="N"
        )
    if estimator.kind == EstimatorKind.ARITHMETIC:
        return -math.log(n + 1), math.log(n) - math.log(n + 1)
    if estimator.kind == EstimatorKind.GEOMETRIC:
        return math.log(-math.expm1(-1.0 / n)), -1.0 / n
    t = float(rng.beta(1.0, n))
    return math.log(t), math.log1p(-t)


def shrink_fraction(
    estimator: ShrinkageEstimator, n: int, rng: Optional[np.random.Generator] = None
) -> float:
    """Fraction of the remaining volume removed by one iteration with N live points."""
    if rng is None:
        rng = make_rng(estimator.seed or 0)
    return math.exp(_log_shrink(estimator, n, rng)[0])


class Frontier:
    """Live nodes sorted by (log-likelihood, id)."""

    def __init__(self) -> None:
        self._keys: List[Tuple[float, int]] = []

    def __len__(self) -> int:
        return len(self._keys)

    def push(self, node_id: int, log_likelihood: float) -> int:
        """Insert a node and return its insertion order among the current members."""
        rank = bisect.bisect_left(self._keys, (log_likelihood, -math.inf))
        bisect.insort(self._keys, (log_likelihood, node_id))
        return rank

    def pop_lowest(self) -> Tuple[float, int]:
        return self._keys.pop(0)

    def peek_lowest(self) -> Tuple[float, int]:
        return self._keys[0]

    @property
    def max_log_likelihood(self) -> float:
        return self._keys[-1][0] if self._keys else -math.inf

    def ids(self) -> List[int]:
        return [node_id for _, node_id in self._keys]

    def entries(self) -> List[Tuple[float, int]]:
        return list(self._keys)

    def ids_at(self, log_likelihood: float) -> List[int]:
        lo = bisect.bisect_left(self._keys, (log_likelihood, -math.inf))
        hi = bisect.bisect_right(self._keys, (log_likelihood, math.inf))
        return [node_id for _, node_id in self._keys[lo:hi]]


@dataclass
class DeadPoint:
    """One integration step."""
    iteration: int
    node_id: int
    log_likelihood: float
    log_volume: float  # remaining volume after this step
    log_weight: float
    n_live: int
    insertion_order: int = -1
    insertion_n: int = 0


@dataclass
class IntegratorState:
    """Volume, evidence and dead points accumulated so far."""
    log_volume_remaining: float = 0.0
    log_evidence: float = -math.inf
    dead_points: List[DeadPoint] = field(default_factory=list)
    live_count_history: List[int] = field(default_factory=list)
    log_remainder_trace: List[float] = field(default_factory=list)
    insertions: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    drain_start: Optional[int] = None
    current_live_count: int = 0
    current_log_likelihood: float = -math.inf
    _drain_log_volume: float = 0.0
    _drain_size: int = 0
    _weighted_log_l: float = 0.0

    @property
    def iteration(self) -> int:
        return len(self.dead_points)

    def running_information_gain(self) -> float:
        """H estimated from the dead points so far (0 before any weight)."""
        if self.log_evidence == -math.inf:
            return 0.0
        return max(self._weighted_log_l - self.log_evidence, 0.0)

    def shrinkage_live_counts(self) -> List[int]:
        """Live counts of the iterations before the remainder was split."""
        end = self.drain_start if self.drain_start is not None else len(
            self.live_count_history
        )
        return self.live_count_history[:end]

    def _begin_drain(self, n_live: int) -> None:
        self.drain_start = self.iteration
        self._drain_log_volume = self.log_volume_remaining
        self._drain_size = n_live

    def _drain_step(self) -> Tuple[float, float]:
        drained = self.iteration - (self.drain_start or 0) + 1
        log_removed = self._drain_log_volume - math.log(self._drain_size)
        left = self._drain_size - drained
        if left <= 0:
            return log_removed, -math.inf
        return log_removed, self._drain_log_volume + math.log(left) - math.log(
            self._drain_size
        )

    def _book(
        self, node_id: int, log_l: float, log_removed: float, log_v: float, n_live: int
    ) -> None:
        log_w = log_l + log_removed if log_removed > -math.inf else -math.inf
        order, order_n = self.insertions.get(node_id, (-1, 0))
        self.dead_points.append(
            DeadPoint(
                self.iteration, node_id, log_l, log_v, log_w, n_live, order, order_n
            )
        )
        self.live_count_history.append(n_live)
        self.log_volume_remaining = log_v
        if log_w == -math.inf:
            return
        log_z = float(np.logaddexp(self.log_evidence, log_w))
        self._weighted_log_l *= math.exp(self.log_evidence - log_z)
        if math.isfinite(log_l):
            self._weighted_log_l += math.exp(log_w - log_z) * log_l
        self.log_evidence = log_z


def effective_sample_size(weights: np.ndarray) -> float:
    total = float(np.sum(weights))
    return total * total / float(np.sum(weights * weights))


@dataclass
class RunResult:
    """Evidence, posterior and bookkeeping of one integration."""
    log_evidence: float
    log_evidence_uncertainty: float
    information_gain: float
    effective_sample_size: float
    node_ids: np.ndarray
    log_likelihoods: np.ndarray
    weights: np.ndarray
    samples_unit: np.ndarray
    samples_physical: np.ndarray
    state: IntegratorState

    @property
    def posterior_samples(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.samples_physical, self.weights

    @property
    def iterations(self) -> int:
        return self.state.iteration

    def parameter_moments(self) -> Tuple[np.ndarray, np.ndarray]:
        mean = self.weights @ self.samples_physical
        var = self.weights @ (self.samples_physical - mean) ** 2
        return mean, np.sqrt(np.maximum(var, 0.0))

    def summary(self, **extra: object) -> RunSummary:
        mean, std = self.parameter_moments()
        return RunSummary(
            log_evidence=self.log_evidence,
            log_evidence_uncertainty=self.log_evidence_uncertainty,
            information_gain=self.information_gain,
            effective_sample_size=self.effective_sample_size,
            iterations=self.iterations,
            parameter_means=mean.tolist(),
            parameter_stds=std.tolist(),
            **extra,  # type: ignore[arg-type]
        )


def information_gain(state: IntegratorState) -> float:
    """Kullback-Leibler divergence from prior to posterior, in nats."""
    if not state.dead_points:
        raise InvalidStateException("information gain needs at least one dead point")
    log_l = np.array([p.log_likelihood for p in state.dead_points])
    log_w = np.array([p.log_weight for p in state.dead_points])
    log_z = float(logsumexp(log_w))
    if log_z == -math.inf:
        return 0.0
    w = np.exp(log_w - log_z)
    mask = w > 0
    return float(np.sum(w[mask] * (log_l[mask] - log_z)))


def _checked_log_l(tree: TreeLike, node_id: int) -> float:
    log_l = tree.node(node_id).log_likelihood
    if math.isnan(log_l):
        raise DataException("log-likelihood is NaN", node_id=node_id)
    return log_l


def _drain_ready(
    tree: TreeLike, frontier: Frontier, agent: "Optional[NodeExpandingAgent]"
) -> bool:
    if not frontier:
        return True
    if agent is not None and not agent.finished:
        return False
    return not any(tree.children_ids(node_id) for node_id in frontier.ids())


def integrate(
    tree: TreeLike,
    estimator: Optional[ShrinkageEstimator] = None,
    agent: "Optional[NodeExpandingAgent]" = None,
    monitor: "Optional[InsertionOrderMonitor]" = None,
    rng: Optional[np.random.Generator] = None,
) -> RunResult:
    """Run the breadth-first search over ``tree`` and book every node.

    Once no live node can receive further children, the remaining volume is
    split equally among the remaining live nodes.
    """
    estimator = estimator or ShrinkageEstimator()
    if rng is None:
        rng = make_rng(estimator.seed or 0)

    if agent is not None:
        agent.initialize(tree)
    root_children = tree.children_ids(tree.root_id)
    if not root_children:
        raise InvalidArgumentException(
            "frontier is empty: root has no children", argument="tree"
        )

    frontier = Frontier()
    for child_id in root_children:
        frontier.push(child_id, _checked_log_l(tree, child_id))

    state = IntegratorState()
    while frontier:
        n_live = len(frontier)
        log_l, node_id = frontier.pop_lowest()
        node = tree.node(node_id)
        state.current_live_count = n_live
        state.current_log_likelihood = log_l

        if agent is not None:
            agent.expand(node, frontier, state, tree)
        children = tree.children_ids(node_id)

        if state.drain_start is None and not children and _drain_ready(
            tree, frontier, agent
        ):
            state._begin_drain(n_live)
            logger.debug(
                f"Splitting remaining volume among {n_live} live points "
                f"at iteration {state.iteration}"
            )

        if state.drain_start is not None:
            log_removed, log_v = state._drain_step()
        else:
            log_frac, log_keep = _log_shrink(estimator, n_live, rng)
            log_removed = state.log_volume_remaining + log_frac
            log_v = state.log_volume_remaining + log_keep
        state._book(node_id, log_l, log_removed, log_v, n_live)

        for child_id in children:
            rank = frontier.push(child_id, _checked_log_l(tree, child_id))
            state.insertions[child_id] = (rank, len(frontier))
            if monitor is not None:
                monitor.record(rank, len(frontier))

        l_max = max(frontier.max_log_likelihood, log_l)
        remainder = math.inf
        if state.log_evidence > -math.inf:
            remainder = l_max + log_v - state.log_evidence
        state.log_remainder_trace.append(remainder)

    return _result_from_state(tree, state)


def _result_from_state(tree: TreeLike, state: IntegratorState) -> RunResult:
    node_ids = np.array([p.node_id for p in state.dead_points], dtype=int)
    log_l = np.array([p.log_likelihood for p in state.dead_points])
    log_w = np.array([p.log_weight for p in state.dead_points])
    log_z = float(logsumexp(log_w))
    if log_z == -math.inf:
        logger.warning(
            "All dead points carry zero weight; using uniform posterior weights"
        )
        weights = np.full(len(log_w), 1.0 / len(log_w))
    else:
        weights = np.exp(log_w - log_z)
        weights /= weights.sum()

    samples_unit = np.vstack([tree.node(int(i)).point_unit for i in node_ids])
    samples_physical = np.vstack([tree.node(int(i)).point_physical for i in node_ids])

    h = information_gain(state)
    counts = state.shrinkage_live_counts()
    if counts and h > 0:
        sigma = math.sqrt(h * float(np.mean(1.0 / np.asarray(counts, dtype=float))))
    else:
        sigma = 0.0

    return RunResult(
        log_evidence=log_z,
        log_evidence_uncertainty=sigma,
        information_gain=h,
        effective_sample_size=effective_sample_size(weights),
        node_ids=node_ids,
        log_likelihoods=log_l,
        weights=weights,
        samples_unit=samples_unit,
        samples_physical=samples_physical,
        state=state,
    )


def _fold_evidences(
    tree: TreeLike,
    folds: List[np.ndarray],
    resamples: int,
    seed: int,
    jobs: int,
    reattach: bool,
) -> List[float]:
    n_root = len(tree.root_children())  # type: ignore[union-attr]
    tasks = [(k, b) for k in range(len(folds)) for b in range(resamples)]
    views = [
        tree.unlink_root_children(  # type: ignore[union-attr]
            sorted(set(range(n_root)) - set(fold.tolist())), reattach=reattach
        )
        for fold in folds
    ]
    estimator = ShrinkageEstimator(kind=EstimatorKind.STOCHASTIC)

    def run(task: Tuple[int, int]) -> float:
        k, b = task
        return integrate(views[k], estimator, rng=make_rng(seed, k, b)).log_evidence

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, tasks))
    return [run(task) for task in tasks]


def estimate_uncertainty(
    tree: TreeLike,
    folds: Optional[int] = None,
    resamples: int = 30,
    estimator: Optional[ShrinkageEstimator] = None,
    seed: int = 0,
    jobs: int = 1,
    reattach: bool = False,
) -> float:
    """Standard deviation of log Z over K fold views times B stochastic shrinkages.

    ``estimator`` only contributes its seed; the resampling always uses
    stochastic shrinkage.
    """
    n_root = len(tree.root_children())  # type: ignore[union-attr]
    k = min(n_root, 10) if folds is None else folds
    if k < 2:
        raise InvalidArgumentException(f"need at least 2 folds, got {k}", argument="K")
    if n_root < k:
        raise InvalidArgumentException(
            f"{n_root} root children cannot be split into {k} folds", argument="K"
        )
    if resamples < 1:
        raise InvalidArgumentException("need at least one resample", argument="B")
    if estimator is not None and estimator.seed is not None:
        seed = estimator.seed

    split = np.array_split(np.arange(n_root), k)
    values = _fold_evidences(tree, split, resamples, seed, jobs, reattach)
    sigma = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    logger.info(
        f"log Z uncertainty from {k} folds x {resamples} resamples: {sigma:.4f}"
    )
    return sigma


def fold_results(tree: TreeLike, folds: int, seed: int = 0) -> List[RunResult]:
    """One stochastic-shrinkage integration per K-fold view, for per-fold posteriors."""
    n_root = len(tree.root_children())  # type: ignore[union-attr]
    if folds < 2 or n_root < folds:
        raise InvalidArgumentException(
            f"{n_root} root children cannot be split into {folds} folds", argument="K"
        )
    results = []
    estimator = ShrinkageEstimator(kind=EstimatorKind.STOCHASTIC)
    for k, fold in enumerate(np.array_split(np.arange(n_root), folds)):
        kept = sorted(set(range(n_root)) - set(fold.tolist()))
        view = tree.unlink_root_children(kept)  # type: ignore[union-attr]
        results.append(integrate(view, estimator, rng=make_rng(seed, k)))
    return results


def resample_equal_weight(
    result: RunResult, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``count`` physical points with replacement, proportional to weight."""
    if len(result.weights) == 0:
        raise InvalidArgumentException("posterior is empty", argument="result")
    idx = rng.choice(len(result.weights), size=count, replace=True, p=result.weights)
    return result.samples_physical[idx]


def frontier_snapshots(
    tree: TreeLike, node_ids: Iterable[int]
) -> Dict[int, np.ndarray]:
    """Unit points of the live nodes present when each requested node was removed.

    The root is never removed; its snapshot is the full set of root children.
    """
    wanted = set(node_ids)
    snapshots: Dict[int, np.ndarray] = {}
    if tree.root_id in wanted:
        snapshots[tree.root_id] = _unit_points(tree, tree.children_ids(tree.root_id))
        wanted.discard(tree.root_id)

    frontier = Frontier()
    for child_id in tree.children_ids(tree.root_id):
        frontier.push(child_id, tree.node(child_id).log_likelihood)
    while frontier and wanted:
        _, node_id = frontier.pop_lowest()
        if node_id in wanted:
            ids = frontier.ids() or [node_id]
            snapshots[node_id] = _unit_points(tree, ids)
            wanted.discard(node_id)
        for child_id in tree.children_ids(node_id):
            frontier.push(child_id, tree.node(child_id).log_likelihood)
    return snapshots


def _unit_points(tree: TreeLike, ids: Sequence[int]) -> np.ndarray:
    return np.vstack([tree.node(i).point_unit for i in ids])


def write_dead_point_log(state: IntegratorState, stream: TextIO) -> None:
    """Tab-separated dead-point log with a versioned header."""
    stream.write(f"{DEAD_POINT_MAGIC} version={FORMAT_VERSION}\n")
    stream.write("\t".join(DEAD_POINT_COLUMNS) + "\n")
    for p in state.dead_points:
        stream.write(
            f"{p.iteration}\t{p.node_id}\t{p.log_likelihood!r}\t{p.log_volume!r}\t"
            f"{p.log_weight!r}\t{p.n_live}\t{p.insertion_order}\t{p.insertion_n}\n"
        )


def read_dead_point_log(source: Union[str, Path, TextIO]) -> List[DeadPoint]:
    """Parse a log written by :func:`write_dead_point_log`."""
    if isinstance(source, (str, Path)):
        lines = Path(source).read_text(encoding="utf-8").splitlines()
    else:
        lines = source.read().splitlines()
    if not lines or not lines[0].startswith(DEAD_POINT_MAGIC):
        raise ParseException("missing nestkit-deadpoints header", line=1, offset=0)
    version = lines[0][len(DEAD_POINT_MAGIC):].strip()
    if version != f"version={FORMAT_VERSION}":
        raise ParseException(
            f"unsupported dead-point log {version!r}", line=1, offset=0
        )
    if len(lines) < 2 or tuple(lines[1].split("\t")) != DEAD_POINT_COLUMNS:
        raise ParseException("unexpected column header", line=2, offset=0)

    points = []
    for line_no, line in enumerate(lines[2:], start=3):
        fields = line.split("\t")
        if len(fields) != len(DEAD_POINT_COLUMNS):
            raise ParseException(
                f"expected {len(DEAD_POINT_COLUMNS)} fields", line=line_no, offset=0
            )
        try:
            points.append(
                DeadPoint(
                    int(fields[0]),
                    int(fields[1]),
                    float(fields[2]),
                    float(fields[3]),
                    float(fields[4]),
                    int(fields[5]),
                    int(fields[6]),
                    int(fields[7]),
                )
            )
        except ValueError as e:
            raise ParseException(str(e), line=line_no, offset=0)
    return points
