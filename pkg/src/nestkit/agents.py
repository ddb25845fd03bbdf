"""Node-expanding agents: who gets children, when, and how many.

Any schedule of insertions yields a valid tree; the agents differ only in
where they spend likelihood evaluations. ``ConstantNAgent`` runs inside the
integration loop and reproduces classic nested sampling. The dynamic agents
work between integrations, attaching new subtrees to a completed tree.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterable, List, Optional, Sequence

import numpy as np

from .exceptions import InvalidArgumentException
from .integrator import (
    Frontier,
    IntegratorState,
    RunResult,
    frontier_snapshots,
    integrate,
)
from .schema import (
    AgentKind,
    AgentPolicy,
    ShrinkageEstimator,
    TerminationPolicy,
    TerminationReason,
)
from .termination import handle_plateau, should_continue
from .tree import ExplorationTree, Node, TreeLike

if TYPE_CHECKING:
    from .diagnostics import InsertionOrderMonitor
    from .problems import Problem
    from .samplers.base import LRPSampler

logger = logging.getLogger(__name__)


class NodeExpandingAgent(ABC):
    """Hook called by the integrator for every node it removes."""

    finished: bool = False

    def initialize(self, tree: TreeLike) -> None:
        """Prepare the tree before the first node is removed."""
        pass

    @abstractmethod
    def expand(
        self, node: Node, frontier: Frontier, state: IntegratorState, tree: TreeLike
    ) -> None:
        """Optionally attach children to ``node``; enqueued once it is booked."""
        pass


def _attach(tree: TreeLike, parent_id: int, draw) -> int:
    if not isinstance(tree, ExplorationTree):
        raise InvalidArgumentException(
            "agents can only grow a writable tree", argument="tree"
        )
    return tree.attach_child(parent_id, draw.u, draw.p, draw.log_likelihood)


def _live_points(tree: TreeLike, ids: Sequence[int], fallback: Node) -> np.ndarray:
    if not ids:
        return np.atleast_2d(fallback.point_unit)
    return np.vstack([tree.node(i).point_unit for i in ids])


class ConstantNAgent(NodeExpandingAgent):
    """Classic nested sampling: replace every removed node with one child.

    Nodes that already have children are left alone, which is what lets a
    truncated tree be replayed and continued. Live points tied at the
    lowest likelihood are removed together without replacement and the
    batch is refilled once the last of them is gone. When every live point
    ties, replacement goes on as usual and children may equal the threshold.
    """

    def __init__(
        self,
        problem: "Problem",
        sampler: "LRPSampler",
        rng: np.random.Generator,
        n_live: int,
        termination: Optional[TerminationPolicy] = None,
        monitor: "Optional[InsertionOrderMonitor]" = None,
        floor: Optional[int] = None,
        checkpoint: Optional[Callable[[int], None]] = None,
    ):
        if n_live < 1:
            raise InvalidArgumentException(
                f"need at least one live point, got {n_live}", argument="N"
            )
        self.problem = problem
        self.sampler = sampler
        self.rng = rng
        self.n_live = n_live
        self.termination = termination or TerminationPolicy()
        self.monitor = monitor
        self.floor = floor
        self.checkpoint = checkpoint
        self.finished = False
        self.termination_reason: Optional[TerminationReason] = None
        self.initial_evaluations = 0
        self._batch_size = 0
        self._batch_remaining = 0
        self._flat_level: Optional[float] = None

    def initialize(self, tree: TreeLike) -> None:
        """Top the root up to N children drawn from the whole prior."""
        self.finished = False
        self._batch_size = self._batch_remaining = 0
        self._flat_level = None
        missing = self.n_live - len(tree.children_ids(tree.root_id))
        for _ in range(max(0, missing)):
            u = self.rng.random(tree.dimension)
            p, log_l = self.problem.evaluate(u)
            self.initial_evaluations += 1
            assert isinstance(tree, ExplorationTree)
            tree.attach_child(tree.root_id, u, p, log_l)
        if missing > 0:
            logger.debug(f"Drew {missing} initial live points from the prior")

    def _stop(self, reason: TerminationReason, iteration: int) -> None:
        self.finished = True
        self.termination_reason = reason
        logger.info(
            f"Stopped inserting children at iteration {iteration}: {reason.value}"
        )

    def expand(
        self, node: Node, frontier: Frontier, state: IntegratorState, tree: TreeLike
    ) -> None:
        in_batch = self._batch_remaining > 0
        if in_batch:
            self._batch_remaining -= 1
        last_of_batch = in_batch and self._batch_remaining == 0
        if self.finished or tree.children_ids(node.id):
            return
        if in_batch and not last_of_batch:
            return

        log_l = node.log_likelihood
        threshold = log_l
        if not in_batch and frontier.ids_at(log_l):
            tied = handle_plateau(
                frontier.entries() + [(log_l, node.id)],
                log_l,
                self.termination.plateau_mode,
            )
            if tied and len(tied) >= state.current_live_count:
                if log_l == -math.inf:
                    self._stop(TerminationReason.PLATEAU_EXHAUSTED, state.iteration)
                    return
                # whole live set is flat: keep replacing, children may tie
                if self._flat_level != log_l:
                    self._flat_level = log_l
                    if self.monitor is not None:
                        self.monitor.warn_plateau(tied, log_l)
                threshold = float(np.nextafter(log_l, -np.inf))
            elif tied:
                if self.monitor is not None:
                    self.monitor.warn_plateau(tied, log_l)
                self._batch_size = len(tied)
                self._batch_remaining = len(tied) - 1
                return

        decision = should_continue(self.termination, state, frontier)
        self.termination_reason = decision.reason
        if not decision:
            self._stop(decision.reason, state.iteration)
            return

        count = self._batch_size if last_of_batch else 1
        if self.floor is not None:
            count = max(count, self.floor - len(frontier))
        if last_of_batch:
            self._batch_size = 0
        elif self.checkpoint is not None and self.sampler.refit_due(state.iteration):
            self.checkpoint(state.iteration)

        live_u = _live_points(tree, frontier.ids(), node)
        for _ in range(count):
            draw = self.sampler.sample(
                self.problem, threshold, live_u, self.rng, iteration=state.iteration
            )
            _attach(tree, node.id, draw)
            live_u = np.vstack([live_u, draw.u])


def log_evidence_sigma(live_counts: Iterable[int]) -> float:
    """sqrt(sum 1/N_i^2) over the shrinking iterations."""
    counts = np.asarray(list(live_counts), dtype=float)
    if counts.size == 0:
        return 0.0
    return float(math.sqrt(np.sum(1.0 / counts**2)))


def min_live_floor(
    state: IntegratorState,
    target_sigma: float,
    projected_iterations: Optional[int] = None,
    max_live: Optional[int] = None,
) -> int:
    """Constant live-point count whose log Z uncertainty meets ``target_sigma``.

    With a projected iteration count I the floor is sqrt(I) / sigma.
    Otherwise the iteration count scales with N: a run of N live points
    takes about N * D iterations, D = sum 1/N_i of the pilot, so the floor
    is D / sigma^2.
    """
    if not target_sigma > 0:
        raise InvalidArgumentException(
            "target sigma must be positive", argument="target_sigma"
        )
    if projected_iterations is not None:
        floor = math.ceil(math.sqrt(projected_iterations) / target_sigma)
    else:
        counts = np.asarray(state.shrinkage_live_counts(), dtype=float)
        if counts.size == 0:
            raise InvalidArgumentException(
                "pilot run has no shrinking iterations", argument="state"
            )
        floor = math.ceil(float(np.sum(1.0 / counts)) / target_sigma**2)
    if max_live is not None and floor > max_live:
        logger.warning(
            f"Reaching sigma(logZ)={target_sigma} needs {floor} live points; "
            f"capped at {max_live}"
        )
        return max_live
    return max(floor, 1)


@dataclass
class QuantileBracket:
    """Likelihood interval a dynamic round refines, and where it attaches."""
    log_l_low: float
    log_l_high: float
    attach_id: int


def quantile_bracket(result: RunResult, policy: AgentPolicy) -> QuantileBracket:
    """Mix the posterior CDF with the volume CDF; read off the quantile likelihoods."""
    dead = result.state.dead_points
    if len(dead) < 2:
        raise InvalidArgumentException(
            f"dynamic expansion needs at least 2 dead points, got {len(dead)}",
            argument="run",
        )
    log_l = np.array([p.log_likelihood for p in dead])
    volume_cdf = 1.0 - np.exp([p.log_volume for p in dead])
    mix = policy.cdf_mix_posterior_weight
    mixed = mix * np.cumsum(result.weights) + (1.0 - mix) * volume_cdf

    i_low = min(int(np.searchsorted(mixed, policy.q_low)), len(dead) - 1)
    i_high = min(int(np.searchsorted(mixed, policy.q_high)), len(dead) - 1)
    low, high = float(log_l[i_low]), float(log_l[i_high])
    attach = int(np.flatnonzero(log_l <= low)[-1])
    return QuantileBracket(low, high, dead[attach].node_id)


def dynamic_quantile_agent(
    tree: ExplorationTree,
    result: RunResult,
    policy: AgentPolicy,
    problem: "Problem",
    sampler: "LRPSampler",
    rng: np.random.Generator,
) -> int:
    """One dynamic round: a fresh N'-point run from L_low up to L_high.

    The new run hangs under the deepest dead node at or below L_low, so its
    volume bookkeeping stays exact when the tree is integrated again.
    Returns the number of nodes added.
    """
    bracket = quantile_bracket(result, policy)
    start = tree.node(bracket.attach_id)
    snapshot = frontier_snapshots(tree, [start.id])[start.id]
    logger.info(
        f"Dynamic round: {policy.n_live} live points from logL={bracket.log_l_low:.4g} "
        f"to {bracket.log_l_high:.4g} under node {start.id}"
    )

    added = 0
    live = Frontier()
    live_u = snapshot
    for _ in range(policy.n_live):
        draw = sampler.sample(
            problem, start.log_likelihood, live_u, rng, iteration=tree.non_root_count
        )
        child_id = _attach(tree, start.id, draw)
        live.push(child_id, draw.log_likelihood)
        added += 1

    while live and live.peek_lowest()[0] < bracket.log_l_high:
        log_l, node_id = live.pop_lowest()
        live_u = _live_points(tree, live.ids(), tree.node(node_id))
        draw = sampler.sample(
            problem, log_l, live_u, rng, iteration=tree.non_root_count
        )
        child_id = _attach(tree, node_id, draw)
        live.push(child_id, draw.log_likelihood)
        added += 1
    return added


def posterior_weight_agent(
    tree: ExplorationTree,
    result: RunResult,
    count: int,
    problem: "Problem",
    sampler: "LRPSampler",
    rng: np.random.Generator,
) -> List[int]:
    """Attach ``count`` siblings next to nodes drawn by posterior weight."""
    if count == 0:
        return []
    if count < 0:
        raise InvalidArgumentException("count must be non-negative", argument="count")
    if not np.any(result.weights > 0):
        raise InvalidArgumentException(
            "run has no dead point with positive weight", argument="run"
        )

    picks = rng.choice(len(result.weights), size=count, p=result.weights)
    parents = [tree.node(int(result.node_ids[i])).parent_id for i in picks]
    snapshots = frontier_snapshots(tree, set(parents))  # type: ignore[arg-type]
    parents.sort(
        key=lambda i: (tree.node(i).log_likelihood, i)  # type: ignore[arg-type]
    )

    new_ids = []
    for parent_id in parents:
        assert parent_id is not None
        threshold = tree.node(parent_id).log_likelihood
        draw = sampler.sample(
            problem, threshold, snapshots[parent_id], rng, iteration=tree.non_root_count
        )
        new_ids.append(_attach(tree, parent_id, draw))
    logger.info(
        f"Posterior-weight round attached {len(new_ids)} siblings "
        f"under {len(snapshots)} parents"
    )
    return new_ids


@dataclass
class RoundRecord:
    """Evidence and ESS after one dynamic round."""
    round: int
    nodes_added: int
    log_evidence: float
    log_evidence_uncertainty: float
    effective_sample_size: float


@dataclass
class DynamicRun:
    result: RunResult
    rounds: List[RoundRecord] = field(default_factory=list)
    floor: Optional[int] = None

    def ess_trace(self) -> List[float]:
        return [r.effective_sample_size for r in self.rounds]


def _targets_met(result: RunResult, policy: AgentPolicy) -> bool:
    if policy.target_sigma is not None:
        return result.log_evidence_uncertainty <= policy.target_sigma
    if policy.target_ess is not None:
        return result.effective_sample_size >= policy.target_ess
    return False


def run_dynamic(
    tree: ExplorationTree,
    base: RunResult,
    policy: AgentPolicy,
    problem: "Problem",
    sampler: "LRPSampler",
    rng: np.random.Generator,
    estimator: Optional[ShrinkageEstimator] = None,
    termination: Optional[TerminationPolicy] = None,
    monitor_factory: "Optional[Callable[[], InsertionOrderMonitor]]" = None,
) -> DynamicRun:
    """Grow a completed base run according to ``policy`` and re-integrate."""
    run = DynamicRun(base)
    if policy.kind == AgentKind.CONSTANT_N:
        return run

    def reintegrate(agent: Optional[NodeExpandingAgent] = None) -> RunResult:
        monitor = monitor_factory() if monitor_factory is not None else None
        return integrate(tree, estimator, agent=agent, monitor=monitor)

    if policy.kind == AgentKind.MIN_LIVE_FLOOR:
        if policy.target_sigma is None:
            raise InvalidArgumentException(
                "min-live-floor needs a target sigma", argument="target_sigma"
            )
        floor = min_live_floor(
            base.state, policy.target_sigma, max_live=policy.max_live
        )
        run.floor = floor
        if floor > len(tree.root_children()):
            logger.info(f"Raising the live-point floor to {floor}")
            agent = ConstantNAgent(
                problem, sampler, rng, floor, termination, floor=floor
            )
            run.result = reintegrate(agent)
            run.rounds.append(
                RoundRecord(
                    1,
                    agent.initial_evaluations,
                    run.result.log_evidence,
                    run.result.log_evidence_uncertainty,
                    run.result.effective_sample_size,
                )
            )
        return run

    for k in range(1, policy.max_rounds + 1):
        if _targets_met(run.result, policy):
            break
        if policy.kind == AgentKind.DYNAMIC_QUANTILE:
            added = dynamic_quantile_agent(
                tree, run.result, policy, problem, sampler, rng
            )
        else:
            added = len(
                posterior_weight_agent(
                    tree, run.result, policy.expansions, problem, sampler, rng
                )
            )
        run.result = reintegrate()
        run.rounds.append(
            RoundRecord(
                k,
                added,
                run.result.log_evidence,
                run.result.log_evidence_uncertainty,
                run.result.effective_sample_size,
            )
        )
        logger.info(
            f"Round {k}: +{added} nodes, logZ={run.result.log_evidence:.4f}, "
            f"ESS={run.result.effective_sample_size:.1f}"
        )
    return run

