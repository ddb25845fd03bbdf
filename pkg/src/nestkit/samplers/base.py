"""Base class for likelihood-restricted prior samplers."""

import math
from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Any, Dict, NamedTuple, Optional

import numpy as np

from ..config import SamplerSettings, get_config

if TYPE_CHECKING:
    from ..problems import Problem


class Draw(NamedTuple):
    """A new point above the threshold, with the likelihood calls it cost."""
    u: np.ndarray
    p: np.ndarray
    log_likelihood: float
    evaluations: int


class LRPSampler(ABC):
    """Base class for likelihood-restricted prior samplers.

    A sampler turns the current live points (unit cube) and a threshold into
    one new prior draw above the threshold. Geometry fitted from the live
    points is refreshed every ceil(N / refit_divisor) iterations, and
    whenever a draw is requested below the threshold of the last fit.
    """

    def __init__(self, settings: Optional[SamplerSettings] = None):
        """Initialize sampler with settings (defaults from the environment)."""
        self.settings = settings or get_config().sampler
        self.draws = 0
        self.evaluations = 0
        self.refits = 0
        self._fit_iteration: Optional[int] = None
        self._fit_threshold = -math.inf
        self._refit_interval = 1

    @property
    @abstractmethod
    def name(self) -> str:
        """Sampler name used in manifests and logs."""
        pass

    @property
    @abstractmethod
    def description(self) -> str:
        """One-line description."""
        pass

    @abstractmethod
    def sample(
        self,
        problem: "Problem",
        log_l_min: float,
        live_u: np.ndarray,
        rng: np.random.Generator,
        iteration: int = 0,
    ) -> Draw:
        """Draw from the prior restricted to logL > log_l_min."""
        pass

    def refit_due(self, iteration: int) -> bool:
        if self._fit_iteration is None:
            return True
        return iteration - self._fit_iteration >= self._refit_interval

    def _needs_refit(self, iteration: int, log_l_min: float) -> bool:
        return self.refit_due(iteration) or log_l_min < self._fit_threshold

    def _mark_fit(self, iteration: int, log_l_min: float, n_live: int) -> None:
        self.refits += 1
        self._fit_iteration = iteration
        self._fit_threshold = log_l_min
        self._refit_interval = max(1, math.ceil(n_live / self.settings.refit_divisor))

    def _count(self, draw: Draw) -> Draw:
        self.draws += 1
        self.evaluations += draw.evaluations
        return draw

    def stats(self) -> Dict[str, float]:
        """Acceptance statistics for the run log and summary."""
        return {
            "draws": float(self.draws),
            "likelihood_evaluations": float(self.evaluations),
            "efficiency": self.draws / self.evaluations if self.evaluations else 0.0,
            "refits": float(self.refits),
        }

    def state_dict(self) -> Dict[str, Any]:
        """Adaptive state carried across a checkpoint."""
        return {
            "draws": self.draws,
            "evaluations": self.evaluations,
            "refits": self.refits,
            "fit_iteration": self._fit_iteration,
            "fit_threshold": (
                self._fit_threshold if math.isfinite(self._fit_threshold) else None
            ),
            "refit_interval": self._refit_interval,
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.draws = int(state.get("draws", 0))
        self.evaluations = int(state.get("evaluations", 0))
        self.refits = int(state.get("refits", 0))
        self._fit_iteration = state.get("fit_iteration")
        threshold = state.get("fit_threshold")
        self._fit_threshold = -math.inf if threshold is None else float(threshold)
        self._refit_interval = int(state.get("refit_interval", 1))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(name={self.name!r})"
