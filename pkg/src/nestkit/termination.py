"""Termination rules: remainder fraction, H*N minimum, iteration cap, plateaus."""

import math
from typing import Iterable, NamedTuple, Set, Tuple

from .exceptions import PlateauDetectedException
from .integrator import Frontier, IntegratorState
from .schema import PlateauMode, TerminationPolicy, TerminationReason


class TerminationDecision(NamedTuple):
    """Outcome of one termination check."""
    continue_: bool
    reason: TerminationReason

    def __bool__(self) -> bool:
        return self.continue_


def log_remainder_ratio(state: IntegratorState, frontier: Frontier) -> float:
    """log(Z_live / Z_dead) with Z_live = L_max * V_remaining."""
    if state.log_evidence == -math.inf:
        return math.inf
    l_max = max(frontier.max_log_likelihood, state.current_log_likelihood)
    return l_max + state.log_volume_remaining - state.log_evidence


def should_continue(
    policy: TerminationPolicy, state: IntegratorState, frontier: Frontier
) -> TerminationDecision:
    """Whether agents should keep inserting children.

    ``state.current_live_count`` and ``state.current_log_likelihood`` describe
    the node being expanded; the frontier holds the other live nodes.
    """
    if policy.max_iterations is not None and state.iteration >= policy.max_iterations:
        return TerminationDecision(False, TerminationReason.MAX_ITERATIONS)

    if log_remainder_ratio(state, frontier) >= math.log(policy.epsilon_remainder):
        return TerminationDecision(True, TerminationReason.REMAINDER_ABOVE_EPSILON)

    n_live = max(state.current_live_count, len(frontier))
    needed = policy.min_iterations_factor * state.running_information_gain() * n_live
    if state.iteration < needed:
        return TerminationDecision(True, TerminationReason.BELOW_MIN_ITERATIONS)
    return TerminationDecision(False, TerminationReason.REMAINDER)


def handle_plateau(
    live: Iterable[Tuple[float, int]], log_l_min: float, mode: PlateauMode
) -> Set[int]:
    """Ids of all live nodes tied exactly at ``log_l_min`` (empty without a tie).

    ``live`` are (log-likelihood, id) pairs. Ties use exact equality.
    """
    tied = {node_id for log_l, node_id in live if log_l == log_l_min}
    if len(tied) < 2:
        return set()
    if mode == PlateauMode.ERROR:
        raise PlateauDetectedException(sorted(tied), log_l_min)
    return tied
