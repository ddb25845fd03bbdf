#!/usr/bin/env python3
"""
Tests for node-expanding agents and the live-point floor.
"""

import math

import numpy as np
import pytest

from nestkit.agents import (
    ConstantNAgent,
    dynamic_quantile_agent,
    log_evidence_sigma,
    min_live_floor,
    posterior_weight_agent,
    quantile_bracket,
    run_dynamic,
)
from nestkit.config import SamplerSettings, make_rng
from nestkit.exceptions import InvalidArgumentException
from nestkit.integrator import IntegratorState, integrate
from nestkit.problems import gaussian
from nestkit.samplers.rejection import MLFriendsSampler
from nestkit.schema import AgentKind, AgentPolicy
from nestkit.tree import create_tree


def base_run(n_live=50, seed=1, sigma=0.2):
    problem = gaussian(d=2, sigma=sigma)
    sampler = MLFriendsSampler(SamplerSettings(bootstrap_rounds=10))
    rng = make_rng(seed)
    tree = create_tree(2)
    result = integrate(tree, agent=ConstantNAgent(problem, sampler, rng, n_live))
    return problem, sampler, rng, tree, result


def test_constant_n_keeps_live_count():
    problem, sampler, _, tree, result = base_run()
    counts = result.state.shrinkage_live_counts()
    assert counts and set(counts) == {50}
    assert len(tree.root_children()) == 50
    assert tree.non_root_count == result.iterations
    assert sampler.draws == tree.non_root_count - 50


def test_constant_n_rejects_empty_live_set():
    problem = gaussian(d=2)
    with pytest.raises(InvalidArgumentException):
        ConstantNAgent(problem, MLFriendsSampler(), make_rng(0), 0)


def test_replaying_a_finished_tree_adds_nothing():
    """Nodes with children are left alone, so a second pass reproduces the run."""
    problem, sampler, rng, tree, result = base_run(n_live=30)
    count = tree.non_root_count
    again = integrate(tree, agent=ConstantNAgent(problem, sampler, rng, 30))
    assert tree.non_root_count == count
    assert np.array_equal(again.log_likelihoods, result.log_likelihoods)
    assert again.log_evidence == result.log_evidence


def test_log_evidence_sigma():
    assert log_evidence_sigma([]) == 0.0
    assert log_evidence_sigma([4, 4, 4, 4]) == pytest.approx(0.5)


def test_min_live_floor():
    state = IntegratorState()
    for i in range(128):
        state._book(i + 1, float(i), -1.0 - i, -1.0 - i, 64)
    # D = 128 / 64 = 2, floor = D / sigma^2
    assert min_live_floor(state, 0.5) == 8
    assert min_live_floor(state, 0.5, projected_iterations=256) == 32
    assert min_live_floor(state, 0.5, max_live=5) == 5
    with pytest.raises(InvalidArgumentException):
        min_live_floor(state, 0.0)
    with pytest.raises(InvalidArgumentException):
        min_live_floor(IntegratorState(), 0.1)


def test_quantile_bracket_is_ordered():
    _, _, _, tree, result = base_run()
    bracket = quantile_bracket(result, AgentPolicy())
    assert bracket.log_l_low <= bracket.log_l_high
    assert tree.node(bracket.attach_id).log_likelihood <= bracket.log_l_low


def test_dynamic_quantile_round_grows_tree():
    problem, sampler, rng, tree, result = base_run()
    before = tree.non_root_count
    policy = AgentPolicy(kind=AgentKind.DYNAMIC_QUANTILE, n_live=50)
    added = dynamic_quantile_agent(tree, result, policy, problem, sampler, rng)
    assert added >= 50
    assert tree.non_root_count == before + added


def test_dynamic_rounds_increase_ess():
    """Each quantile round adds resolution where the posterior is; ESS climbs."""
    problem, sampler, rng, tree, result = base_run()
    policy = AgentPolicy(
        kind=AgentKind.DYNAMIC_QUANTILE, n_live=50, target_ess=1e9, max_rounds=4
    )
    run = run_dynamic(tree, result, policy, problem, sampler, rng)
    trace = [result.effective_sample_size] + run.ess_trace()
    assert len(run.rounds) == 4
    assert all(b > a for a, b in zip(trace, trace[1:]))
    assert abs(run.result.log_evidence - problem.analytic_log_z) < 0.3


def test_dynamic_run_stops_at_target():
    problem, sampler, rng, tree, result = base_run()
    policy = AgentPolicy(kind=AgentKind.DYNAMIC_QUANTILE, n_live=50, target_ess=1.0)
    run = run_dynamic(tree, result, policy, problem, sampler, rng)
    assert run.rounds == []
    assert run.result is result


def test_posterior_weight_agent_attaches_siblings():
    problem, sampler, rng, tree, result = base_run()
    new_ids = posterior_weight_agent(tree, result, 20, problem, sampler, rng)
    assert len(new_ids) == 20
    for node_id in new_ids:
        node = tree.node(node_id)
        parent = tree.node(node.parent_id)
        assert node.log_likelihood >= parent.log_likelihood
    assert posterior_weight_agent(tree, result, 0, problem, sampler, rng) == []
    with pytest.raises(InvalidArgumentException):
        posterior_weight_agent(tree, result, -1, problem, sampler, rng)


def test_min_live_floor_reaches_target_sigma():
    """Raising N to the floor brings sqrt(sum 1/N_i^2) to the requested sigma."""
    problem, sampler, rng, tree, result = base_run()
    policy = AgentPolicy(kind=AgentKind.MIN_LIVE_FLOOR, target_sigma=0.25)
    run = run_dynamic(tree, result, policy, problem, sampler, rng)
    assert run.floor is not None and run.floor > 50
    counts = run.result.state.shrinkage_live_counts()
    assert min(counts) == run.floor
    assert math.isclose(log_evidence_sigma(counts), 0.25, rel_tol=0.1)


def test_min_live_floor_requires_target():
    problem, sampler, rng, tree, result = base_run(n_live=20)
    with pytest.raises(InvalidArgumentException):
        run_dynamic(
            tree,
            result,
            AgentPolicy(kind=AgentKind.MIN_LIVE_FLOOR),
            problem,
            sampler,
            rng,
        )
