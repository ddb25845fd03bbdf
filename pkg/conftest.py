"""Shared fixtures: exact and deliberately biased samplers, quick configuration."""

import math
from typing import List

import numpy as np
import pytest

from nestkit import config as config_module
from nestkit.config import NestkitConfig
from nestkit.exceptions import BudgetExhaustedException
from nestkit.samplers.base import Draw, LRPSampler


class ExactBoxSampler(LRPSampler):
    """Rejection from the whole unit cube; exact but slow at small volumes."""

    max_draws = 1000000

    @property
    def name(self) -> str:
        return "exact-box"

    @property
    def description(self) -> str:
        return "Uniform rejection from the unit cube"

    def sample(self, problem, log_l_min, live_u, rng, iteration=0) -> Draw:
        for evaluations in range(1, self.max_draws + 1):
            u = rng.random(problem.dimension)
            p, log_l = problem.evaluate(u)
            if log_l > log_l_min:
                return self._count(Draw(u, p, log_l, evaluations))
        raise BudgetExhaustedException(self.max_draws, self.max_draws, self.max_draws)


class BoxContourSampler(LRPSampler):
    """Direct draws inside hyper-rectangle contours.

    With ``fraction=1`` the draw is uniform in the contour (an exact
    sampler); smaller fractions only reach the inner part of the contour
    holding that share of its volume.
    """

    def __init__(self, fraction: float = 1.0):
        super().__init__()
        self.fraction = fraction

    @property
    def name(self) -> str:
        return f"box-contour-{self.fraction:g}"

    @property
    def description(self) -> str:
        return "Uniform draws inside the sup-norm contour box"

    def sample(self, problem, log_l_min, live_u, rng, iteration=0) -> Draw:
        d = problem.dimension
        half = 0.5 if log_l_min == -math.inf else min(0.5, math.exp(-log_l_min))
        half *= self.fraction ** (1.0 / d)
        while True:
            u = 0.5 + (2.0 * rng.random(d) - 1.0) * half
            p, log_l = problem.evaluate(u)
            if log_l > log_l_min:
                return self._count(Draw(u, p, log_l, 1))


def reference_nested_sampling(
    problem, sampler, n_live: int, iterations: int, seed_rng
) -> List[tuple]:
    """Straight-line nested sampling with the arithmetic estimator.

    Returns (node order, logL, log weight) triples in removal order, with the
    remaining volume split equally among the final live points.
    """
    live = []
    for i in range(n_live):
        u = seed_rng.random(problem.dimension)
        _, log_l = problem.evaluate(u)
        live.append((log_l, i + 1))
    next_id = n_live + 1

    dead = []
    log_x = 0.0
    for _ in range(iterations):
        live.sort()
        log_l, node_id = live.pop(0)
        log_frac, log_keep = -math.log(n_live + 1), math.log(n_live) - math.log(
            n_live + 1
        )
        log_removed = log_x + log_frac
        dead.append((node_id, log_l, log_l + log_removed))
        log_x = log_x + log_keep
        draw = sampler.sample(problem, log_l, None, seed_rng)
        live.append((draw.log_likelihood, next_id))
        next_id += 1

    live.sort()
    for log_l, node_id in live:
        dead.append((node_id, log_l, log_l + (log_x - math.log(n_live))))
    return dead


@pytest.fixture
def quick_config(monkeypatch):
    """Global configuration with few uncertainty resamples."""
    config = NestkitConfig(uncertainty_folds=5, uncertainty_resamples=5)
    monkeypatch.setattr(config_module, "_config", config)
    monkeypatch.delenv("NESTKIT_SEED", raising=False)
    return config


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
