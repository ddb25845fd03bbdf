#!/usr/bin/env python3
"""
Tests for the built-in problems and problem files with external likelihoods.
"""

import math
import shlex
import sys
import textwrap

import numpy as np
import pytest

from nestkit.exceptions import (
    DataException,
    ExternalLikelihoodException,
    InvalidArgumentException,
    NotFoundException,
    ParseException,
)
from nestkit.problems import (
    DiamondRingParams,
    ExternalLikelihood,
    Problem,
    diamond_ring,
    diamond_ring_log_z,
    gaussian,
    get_problem,
    heavy_tail_equal_weight,
    hyper_rectangle,
    list_problems,
    load_problem_file,
    step_plateau,
)
from nestkit.priors import identity_transform

LOGLIKE_SCRIPT = """\
import sys
for line in sys.stdin:
    values = [float(v) for v in line.split()]
    print(-0.5 * sum(v * v for v in values), flush=True)
"""


def test_registry():
    names = [name for name, _ in list_problems()]
    assert {
        "constant",
        "gaussian",
        "hyper-rectangle",
        "heavy-tail",
        "step-plateau",
        "diamond-ring",
    } <= set(names)
    assert all(description for _, description in list_problems())
    assert get_problem("gaussian", d=3, sigma=0.1).dimension == 3
    with pytest.raises(NotFoundException):
        get_problem("no-such-problem")
    with pytest.raises(InvalidArgumentException):
        get_problem("gaussian", radius=1.0)


def test_hyper_rectangle_values():
    problem = hyper_rectangle(d=1)
    _, log_l = problem.evaluate(np.array([0.25]))
    assert math.exp(log_l) == pytest.approx(4.0)
    assert problem.analytic_log_z is None

    problem = hyper_rectangle(d=3)
    assert problem.analytic_log_z == pytest.approx(math.log(3.0))
    assert problem.volume_at(math.log(4.0)) == pytest.approx(0.125)
    assert problem.volume_at(0.0) == 1.0


def test_heavy_tail_evidence():
    problem = heavy_tail_equal_weight()
    assert problem.analytic_log_z == pytest.approx(math.log(101.0))
    assert problem.evaluate(np.array([math.exp(-10.0)]))[1] == pytest.approx(10.0)
    assert problem.evaluate(np.array([0.0]))[1] == 100.0
    assert problem.volume_at(10.0) == pytest.approx(math.exp(-10.0))


def test_step_plateau():
    problem = step_plateau()
    assert problem.evaluate(np.array([0.2]))[1] == 0.0
    assert problem.evaluate(np.array([0.7]))[1] == pytest.approx(math.log(2.0))
    assert math.exp(problem.analytic_log_z) == pytest.approx(1.5)
    assert problem.volume_at(0.5) == pytest.approx(0.5)


def test_gaussian_volume_and_evidence():
    problem = gaussian(d=2, sigma=0.1)
    # erf(1 / (0.1 sqrt 2)) is 1 to double precision
    assert problem.analytic_log_z == pytest.approx(math.log(2.0 * math.pi * 0.01 / 4.0))
    log_l = -0.5 * (0.2 / 0.1) ** 2
    assert problem.volume_at(log_l) == pytest.approx(math.pi * 0.04 / 4.0)
    assert problem.evaluate(np.array([0.5, 0.5]))[1] == 0.0


def test_diamond_ring():
    problem = diamond_ring()
    params = DiamondRingParams()
    assert problem.dimension == 2
    assert math.isfinite(problem.analytic_log_z)
    assert problem.analytic_log_z == pytest.approx(diamond_ring_log_z(params))
    far = problem.evaluate(np.array([0.9, 0.9]))[1]
    assert far == -math.inf or far < -1e6

    # a point on the big ring, in unit-cube coordinates (box prior [-1, 1])
    on_ring = problem.evaluate(np.array([0.5 + 0.5 * params.r1, 0.5]))[1]
    assert on_ring > far
    with pytest.raises(InvalidArgumentException):
        diamond_ring(r1=-1.0)


def test_nan_likelihood_is_rejected():
    problem = Problem("nan", 1, identity_transform(1), lambda theta: float("nan"))
    with pytest.raises(DataException):
        problem.evaluate(np.array([0.5]))


def write_problem_file(tmp_path, extra=""):
    script = tmp_path / "loglike.py"
    script.write_text(LOGLIKE_SCRIPT)
    command = f"{shlex.quote(sys.executable)} {shlex.quote(str(script))}"
    path = tmp_path / "model.ini"
    path.write_text(
        textwrap.dedent(
            f"""\
            [problem]
            name = toy
            likelihood = {command}
            log_z = -1.5

            [prior.x]
            kind = uniform
            a = -1
            b = 1

            [prior.y]
            kind = normal
            mu = 0
            sigma = 2
            """
        )
        + extra
    )
    return path


def test_problem_file_with_external_likelihood(tmp_path):
    problem = get_problem(str(write_problem_file(tmp_path)))
    try:
        assert problem.name == "toy"
        assert problem.dimension == 2
        assert problem.analytic_log_z == -1.5
        theta, log_l = problem.evaluate(np.array([0.75, 0.5]))
        assert theta == pytest.approx([0.5, 0.0])
        assert log_l == pytest.approx(-0.125)
    finally:
        problem.close()


def test_problem_file_with_blocks(tmp_path):
    extra = textwrap.dedent(
        """
        [block.fractions]
        kind = dirichlet
        k = 3
        """
    )
    problem = load_problem_file(write_problem_file(tmp_path, extra))
    try:
        assert problem.dimension == 5
        theta, _ = problem.evaluate(np.full(5, 0.5))
        assert theta[2:].sum() == pytest.approx(1.0)
    finally:
        problem.close()


def test_problem_file_errors(tmp_path):
    with pytest.raises(NotFoundException):
        load_problem_file(tmp_path / "missing.ini")
    bad = tmp_path / "bad.ini"
    bad.write_text("[prior.x]\nkind = uniform\na = 0\nb = 1\n")
    with pytest.raises(ParseException):
        load_problem_file(bad)
    bad.write_text("[problem]\nlikelihood = true\n")
    with pytest.raises(ParseException):
        load_problem_file(bad)


def test_external_likelihood_failures(tmp_path):
    missing = ExternalLikelihood([str(tmp_path / "does-not-exist")])
    with pytest.raises(ExternalLikelihoodException):
        missing(np.array([0.0]))

    silent = ExternalLikelihood([sys.executable, "-c", "pass"])
    with pytest.raises(ExternalLikelihoodException):
        silent(np.array([0.0]))
    silent.close()
