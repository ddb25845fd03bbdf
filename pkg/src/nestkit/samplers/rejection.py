"""Rejection sampling from a bounding region of the live points."""

import logging
from abc import abstractmethod
from typing import TYPE_CHECKING, Any, Dict, Optional

import numpy as np

from ..config import SamplerSettings
from ..exceptions import (
    BudgetExhaustedException,
    DegenerateGeometryException,
    InvalidArgumentException,
)
from ..regions import Region, UnitCubeRegion, fit_ellipsoid, mlfriends_fit
from .base import Draw, LRPSampler

if TYPE_CHECKING:
    from ..problems import Problem

logger = logging.getLogger(__name__)


def lrps_rejection(
    region: Region,
    problem: "Problem",
    log_l_min: float,
    rng: np.random.Generator,
    budget: int,
) -> Draw:
    """First region draw inside the cube with logL > log_l_min.

    Draws outside the unit cube have no prior mass and are discarded
    without a likelihood evaluation; they still count against the budget.
    """
    if budget < 1:
        raise InvalidArgumentException("budget must be at least 1", argument="budget")
    evaluations = 0
    for _ in range(budget):
        u = region.sample(rng)
        if np.any(u < 0.0) or np.any(u > 1.0):
            continue
        p, log_l = problem.evaluate(u)
        evaluations += 1
        if log_l > log_l_min:
            return Draw(u, p, log_l, evaluations)
    raise BudgetExhaustedException(draws=budget, evaluations=evaluations, budget=budget)


class RegionSampler(LRPSampler):
    """Rejection sampler over a region refitted from the live points."""

    def __init__(self, settings: Optional[SamplerSettings] = None):
        super().__init__(settings)
        self.region: Optional[Region] = None
        self.fallbacks = 0
        self.wasted = 0

    @abstractmethod
    def fit(self, points: np.ndarray, rng: np.random.Generator) -> Region:
        """Fit the bounding region to unit-cube points."""
        pass

    def refit(
        self,
        live_u: np.ndarray,
        rng: np.random.Generator,
        iteration: int,
        log_l_min: float,
    ) -> Region:
        try:
            self.region = self.fit(live_u, rng)
        except DegenerateGeometryException as e:
            logger.warning(f"{self.name}: {e}; sampling from the whole unit cube")
            self.region = UnitCubeRegion(live_u.shape[1])
            self.fallbacks += 1
        self._mark_fit(iteration, log_l_min, len(live_u) + 1)
        return self.region

    def sample(
        self,
        problem: "Problem",
        log_l_min: float,
        live_u: np.ndarray,
        rng: np.random.Generator,
        iteration: int = 0,
    ) -> Draw:
        live_u = np.atleast_2d(np.asarray(live_u, dtype=float))
        if self.region is None or self._needs_refit(iteration, log_l_min):
            self.refit(live_u, rng, iteration, log_l_min)
        assert self.region is not None
        budget = self.settings.rejection_budget
        try:
            draw = lrps_rejection(self.region, problem, log_l_min, rng, budget)
        except BudgetExhaustedException as e:
            self.wasted += e.evaluations
            logger.warning(f"{self.name}: {e}; refitting and retrying once")
            self.refit(live_u, rng, iteration, log_l_min)
            draw = lrps_rejection(self.region, problem, log_l_min, rng, budget)
        return self._count(draw)

    def stats(self) -> Dict[str, float]:
        stats = super().stats()
        stats["fallbacks"] = float(self.fallbacks)
        if self.region is not None:
            stats["region_log_volume"] = float(
                getattr(self.region, "log_volume", float("nan"))
            )
        return stats

    def state_dict(self) -> Dict[str, Any]:
        state = super().state_dict()
        state.update({"fallbacks": self.fallbacks, "wasted": self.wasted})
        return state

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        super().load_state_dict(state)
        self.fallbacks = int(state.get("fallbacks", 0))
        self.wasted = int(state.get("wasted", 0))
        self.region = None


class EllipsoidSampler(RegionSampler):
    """Single bounding ellipsoid with bootstrapped enlargement."""

    @property
    def name(self) -> str:
        return "ellipsoid"

    @property
    def description(self) -> str:
        return "Rejection sampling from one bootstrapped bounding ellipsoid"

    def fit(self, points: np.ndarray, rng: np.random.Generator) -> Region:
        return fit_ellipsoid(points, self.settings.bootstrap_rounds, rng)


class MLFriendsSampler(RegionSampler):
    """Union of per-live-point ellipsoids with a cross-validated radius."""

    @property
    def name(self) -> str:
        return "mlfriends"

    @property
    def description(self) -> str:
        return "Rejection sampling from the MLFriends union of ellipsoids"

    def fit(self, points: np.ndarray, rng: np.random.Generator) -> Region:
        return mlfriends_fit(
            points,
            self.settings.bootstrap_rounds,
            rng,
            max_iterations=self.settings.mlfriends_max_iterations,
        )

    def stats(self) -> Dict[str, float]:
        stats = super().stats()
        n_clusters = getattr(self.region, "n_clusters", None)
        if n_clusters is not None:
            stats["clusters"] = float(n_clusters)
        return stats
