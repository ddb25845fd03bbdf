#!/usr/bin/env python3
"""
Tests for the scripted studies: acceptance scaling, cost curves, U-test power
and the diamond-ring benchmark helpers.
"""

import json
import math

import numpy as np
import pytest

from nestkit.config import make_rng
from nestkit.diagnostics import UTestAccumulator
from nestkit.exceptions import InvalidArgumentException
from nestkit.experiments import (
    EXPERIMENT_MAGIC,
    CostRow,
    ExperimentManifest,
    acceptance_scaling_experiment,
    count_rises,
    coverage_orders,
    cost_curve_experiment,
    detect_phase_transition,
    diamond_ring_benchmark,
    predicted_acceptance,
    recommended_live_points,
    slant_orders,
    u_test_z,
    utest_power_experiment,
    write_experiment,
)


def test_predicted_acceptance():
    assert predicted_acceptance(2, 400) == pytest.approx(0.739, abs=1e-3)
    assert predicted_acceptance(2, 4000) > predicted_acceptance(2, 400)
    assert predicted_acceptance(8, 2000) < predicted_acceptance(4, 2000)
    with pytest.raises(InvalidArgumentException):
        predicted_acceptance(0, 100)


def test_recommended_live_points():
    assert recommended_live_points(3) == 63
    assert recommended_live_points(3, 100) == 100
    with pytest.raises(InvalidArgumentException):
        recommended_live_points(0)


def test_cost_curve_case_a():
    (row,) = cost_curve_experiment([2], n_live=400, case="A", epsilon=1e-3)
    assert row.iterations == pytest.approx(
        400 * (2 * math.log(10.0) + math.log(1000.0))
    )
    assert row.alpha == pytest.approx(predicted_acceptance(2, 400))
    assert row.cost == pytest.approx(400 + row.iterations / row.alpha)


def test_cost_curve_shapes():
    a = cost_curve_experiment([1, 2, 4, 8], case="A")
    b = cost_curve_experiment([1, 2, 4, 8], case="B")
    costs = [row.cost for row in a]
    assert costs == sorted(costs)
    for row_a, row_b in zip(a[1:], b[1:]):
        assert row_b.cost < row_a.cost
    assert all(isinstance(row, CostRow) for row in a + b)


def test_cost_curve_rejects_bad_input():
    with pytest.raises(InvalidArgumentException):
        cost_curve_experiment([2], case="C")
    # the acceptance formula goes negative this far out
    with pytest.raises(InvalidArgumentException):
        cost_curve_experiment([30])
    with pytest.raises(InvalidArgumentException):
        cost_curve_experiment([2], epsilon=1.5)


def test_order_generators():
    rng = make_rng(3)
    orders = coverage_orders(100, 0.9, 5000, rng)
    assert orders.min() >= 0
    assert orders.max() <= 89
    slanted = slant_orders(100, 0.5, 5000, rng)
    assert slanted.max() <= 99
    assert slanted.mean() < 49.5


def test_u_test_z_matches_accumulator():
    orders = coverage_orders(50, 0.8, 300, make_rng(4))
    acc = UTestAccumulator()
    for order in orders:
        acc.record_insertion(int(order), 50)
    assert u_test_z(orders, 50) == pytest.approx(acc.z_score())


def test_u_test_detects_truncated_coverage():
    (row,) = utest_power_experiment(
        n_list=[1000], coverages=[0.9], slants=[], trials=200, seed=5
    )
    assert row.scenario == "coverage"
    assert row.u_fraction >= 0.97


def test_no_detections_without_bias():
    rows = utest_power_experiment(
        n_list=[100], coverages=[1.0], slants=[1.0], trials=2000, seed=6
    )
    for row in rows:
        assert row.u_fraction < 0.01
        # orders are discrete, so KS runs a little hot
        assert row.ks_fraction < 0.02
    with pytest.raises(InvalidArgumentException):
        utest_power_experiment(trials=0)


def test_count_rises():
    assert count_rises([16] * 20 + [100] * 5 + [16] * 5 + [100] * 5) == 2
    # dipping to 50 does not fall below half of the 64 threshold
    assert count_rises([16] * 20 + [100, 50, 100] + [16] * 5) == 1
    assert count_rises([]) == 0


def test_detect_phase_transition():
    trace = np.concatenate(
        [
            np.linspace(-30, -5, 300),
            np.full(400, -5.0),
            np.linspace(-5, 0, 20)[1:],
            np.zeros(300),
        ]
    )
    found = detect_phase_transition(trace)
    assert found is not None
    assert found.iteration == 683
    assert found.plateau_start == 299
    assert found.rise > 1.0


def test_no_phase_transition():
    assert detect_phase_transition(np.linspace(-30, 0, 1000)) is None
    assert detect_phase_transition(np.full(100, -np.inf)) is None


def test_acceptance_experiment_rows():
    rows = acceptance_scaling_experiment(
        [2], [3, 60], bootstrap_rounds=10, repeats=3, seed=2
    )
    skipped, measured = rows
    assert skipped.alpha_mean is None
    assert skipped.note.startswith("skipped")
    assert measured.repeats == 3
    assert 0.0 < measured.alpha_mean < 1.5
    assert measured.alpha_formula == pytest.approx(predicted_acceptance(2, 60))


def test_acceptance_experiment_is_independent_of_jobs():
    one = acceptance_scaling_experiment(
        [2], [40], bootstrap_rounds=5, repeats=4, seed=3, jobs=1
    )
    two = acceptance_scaling_experiment(
        [2], [40], bootstrap_rounds=5, repeats=4, seed=3, jobs=2
    )
    assert one == two


def test_write_experiment(tmp_path):
    rows = cost_curve_experiment([1, 2], case="B")
    manifest = ExperimentManifest(experiment="cost-curve", seed=1, params={"case": "B"})
    table = write_experiment(tmp_path / "out", manifest, rows)
    lines = table.read_text().splitlines()
    assert lines[0].startswith(f"{EXPERIMENT_MAGIC} version=")
    assert lines[1].split("\t") == [
        "d", "n_live", "case", "alpha", "iterations", "cost"
    ]
    assert len(lines) == 4
    saved = json.loads((tmp_path / "out" / "cost-curve.manifest.json").read_text())
    assert saved["experiment"] == "cost-curve"
    assert saved["params"] == {"case": "B"}


def test_diamond_ring_benchmark_rejects_unknown_sampler():
    with pytest.raises(InvalidArgumentException):
        diamond_ring_benchmark(samplers=["nuts"])


@pytest.mark.slow
def test_acceptance_matches_formula():
    rows = acceptance_scaling_experiment([2], [100, 400], repeats=10, seed=7)
    rows += acceptance_scaling_experiment([4], [400], repeats=10, seed=7)
    rows += acceptance_scaling_experiment([8], [2000], repeats=10, seed=7)
    for row in rows:
        assert abs(row.alpha_mean - row.alpha_formula) < 0.10, row


@pytest.mark.slow
def test_u_test_power_at_desk_scale():
    (row,) = utest_power_experiment(
        n_list=[400], coverages=[0.96], slants=[], trials=10000, seed=8, jobs=4
    )
    assert 0.03 <= row.u_fraction <= 0.07


@pytest.mark.slow
def test_diamond_ring_with_harm_auto_tune(quick_config):
    rows = diamond_ring_benchmark(samplers=["harm-auto"], seeds=[1, 2, 3, 4, 5], jobs=5)
    assert not any(row.error for row in rows)
    agreeing = [row for row in rows if abs(row.deviation_sigma) <= 3.0]
    assert len(agreeing) >= 4
    assert any(row.phase_transition_iteration is not None for row in rows)
    assert any(row.step_rises and row.step_rises >= 2 for row in rows)


@pytest.mark.slow
def test_recommended_live_points_follow_the_formula():
    """At N = 7 d^2 the measured acceptance tracks the fitted curve as d grows."""
    alphas = []
    for d in (2, 4, 8):
        n_live = recommended_live_points(d)
        (row,) = acceptance_scaling_experiment([d], [n_live], repeats=10, seed=11)
        assert abs(row.alpha_mean - row.alpha_formula) < 0.15, row
        alphas.append(row.alpha_mean)
    assert alphas[0] > alphas[1] > alphas[2] > 0.05


@pytest.mark.slow
def test_mlfriends_beats_fixed_step_harm_on_diamond_ring():
    rows = diamond_ring_benchmark(
        samplers=["mlfriends", "harm-64"], seeds=[1, 2, 3], jobs=3
    )
    efficiency = {}
    for label in ("mlfriends", "harm-64"):
        done = [row for row in rows if row.sampler == label and not row.error]
        assert done
        efficiency[label] = np.mean(
            [row.effective_sample_size / row.likelihood_evaluations for row in done]
        )
    assert efficiency["mlfriends"] > efficiency["harm-64"]
