#!/usr/bin/env python3
"""
Tests for termination rules and likelihood plateaus.
"""

import math

import pytest

from conftest import ExactBoxSampler
from nestkit.agents import ConstantNAgent
from nestkit.config import make_rng
from nestkit.diagnostics import InsertionOrderMonitor
from nestkit.exceptions import PlateauDetectedException
from nestkit.integrator import Frontier, IntegratorState, integrate
from nestkit.problems import constant, step_plateau
from nestkit.schema import PlateauMode, TerminationPolicy, TerminationReason
from nestkit.termination import handle_plateau, log_remainder_ratio, should_continue
from nestkit.tree import create_tree


def converged_state(n_live=100):
    """Two dead points carrying nearly all the evidence, tiny volume left."""
    state = IntegratorState()
    state._book(1, -10.0, math.log(0.5), math.log(0.5), n_live)
    state._book(2, 0.0, math.log(0.49), -50.0, n_live)
    state.current_live_count = n_live
    state.current_log_likelihood = 0.0
    return state


def test_empty_run_continues():
    decision = should_continue(TerminationPolicy(), IntegratorState(), Frontier())
    assert decision
    assert decision.reason == TerminationReason.REMAINDER_ABOVE_EPSILON


def test_iteration_cap_wins():
    state = converged_state()
    decision = should_continue(TerminationPolicy(max_iterations=2), state, Frontier())
    assert not decision
    assert decision.reason == TerminationReason.MAX_ITERATIONS


def test_minimum_iterations_before_remainder_stop():
    """A small remainder alone is not enough before H * N iterations."""
    state = converged_state()
    assert log_remainder_ratio(state, Frontier()) < math.log(1e-3)
    assert state.running_information_gain() > 0.5

    decision = should_continue(TerminationPolicy(), state, Frontier())
    assert decision
    assert decision.reason == TerminationReason.BELOW_MIN_ITERATIONS

    decision = should_continue(
        TerminationPolicy(min_iterations_factor=0.0), state, Frontier()
    )
    assert not decision
    assert decision.reason == TerminationReason.REMAINDER


def test_handle_plateau():
    live = [(0.0, 1), (0.0, 2), (1.0, 3)]
    assert handle_plateau(live, 0.0, PlateauMode.REMOVE_WITHOUT_REPLACEMENT) == {1, 2}
    assert handle_plateau(live, 1.0, PlateauMode.REMOVE_WITHOUT_REPLACEMENT) == set()
    with pytest.raises(PlateauDetectedException) as info:
        handle_plateau(live, 0.0, PlateauMode.ERROR)
    assert info.value.node_ids == [1, 2]


def test_step_plateau_evidence():
    """The lower plateau goes without replacement; the upper one shrinks as usual."""
    problem = step_plateau()
    tree = create_tree(1)
    agent = ConstantNAgent(problem, ExactBoxSampler(), make_rng(21), 200)
    result = integrate(tree, agent=agent)
    assert agent.termination_reason == TerminationReason.REMAINDER
    deviation = abs(result.log_evidence - math.log(1.5))
    assert deviation < 4 * result.log_evidence_uncertainty + 0.03
    assert set(result.log_likelihoods.tolist()) == {0.0, math.log(2.0)}


def test_plateau_error_mode_raises():
    tree = create_tree(2)
    termination = TerminationPolicy(plateau_mode=PlateauMode.ERROR)
    agent = ConstantNAgent(
        constant(2), ExactBoxSampler(), make_rng(1), 10, termination=termination
    )
    with pytest.raises(PlateauDetectedException):
        integrate(tree, agent=agent)


def test_flat_likelihood_warns_once_and_keeps_replacing():
    monitor = InsertionOrderMonitor()
    tree = create_tree(2)
    agent = ConstantNAgent(
        constant(2), ExactBoxSampler(), make_rng(4), 10, monitor=monitor
    )
    result = integrate(tree, agent=agent, monitor=monitor)
    assert monitor.plateau_warnings == 1
    assert agent.termination_reason == TerminationReason.REMAINDER
    assert result.state.drain_start > 10
    assert all(tree.node(i).log_likelihood == 0.0 for i in result.node_ids)
