"""Random-walk likelihood-restricted samplers.

A walk starts from a randomly chosen live point and takes a fixed number of
steps that never leave the contour: Gaussian proposals with an adaptive
scale, or slice steps along axis, random or covariance-shaped directions.
Acceptance only compares the likelihood against the threshold.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Tuple

import numpy as np

from ..config import SamplerSettings
from ..exceptions import (
    DegenerateGeometryException,
    InvalidArgumentException,
    StuckWalkerException,
)
from ..regions import (
    MLFriendsRegion,
    covariance_factor,
    mahalanobis_norm,
    mean_pairwise_mahalanobis,
    mlfriends_fit,
)
from ..schema import AutoTune, DirectionMode, StepKind, StepSamplerConfig
from .base import Draw, LRPSampler

if TYPE_CHECKING:
    from ..problems import Problem

logger = logging.getLogger(__name__)

MIN_SLICE_WIDTH = 1e-30


@dataclass
class WalkState:
    """Position and counters of one walker."""
    current: np.ndarray
    current_log_likelihood: float = math.nan
    current_p: Optional[np.ndarray] = None
    steps_taken: int = 0
    likelihood_evals: int = 0
    accumulated_displacement: float = 0.0
    accepts: int = 0
    rejects: int = 0
    scale: float = 0.1
    start: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.current = np.array(self.current, dtype=float)
        self.start = self.current.copy()

    def _accept(self, u: np.ndarray, p: np.ndarray, log_l: float) -> None:
        self.current = u
        self.current_p = p
        self.current_log_likelihood = log_l
        self.accepts += 1


def _outside_cube(u: np.ndarray) -> bool:
    return bool(np.any(u < 0.0) or np.any(u > 1.0))


def gauss_walk_step(
    state: WalkState,
    scale: float,
    threshold: float,
    problem: "Problem",
    rng: np.random.Generator,
    chol: Optional[np.ndarray] = None,
    region: Optional[MLFriendsRegion] = None,
) -> Tuple[WalkState, float]:
    """One Gaussian proposal; returns the state and the adapted scale.

    After each proposal, with a and r the walk's running accept and reject
    counts, the scale grows by exp(1/a) while a > r and shrinks by
    exp(-1/r) otherwise.
    """
    if not scale > 0:
        raise InvalidArgumentException("scale must be positive", argument="scale")
    step = rng.standard_normal(state.current.size)
    if chol is not None:
        step = chol @ step
    proposal = state.current + scale * step
    state.steps_taken += 1

    accepted = False
    if not _outside_cube(proposal) and (region is None or region.contains(proposal)):
        p, log_l = problem.evaluate(proposal)
        state.likelihood_evals += 1
        if log_l > threshold:
            state._accept(proposal, p, log_l)
            accepted = True

    if not accepted:
        state.rejects += 1
    if state.accepts > state.rejects:
        scale *= math.exp(1.0 / state.accepts)
    else:
        scale *= math.exp(-1.0 / state.rejects)
    state.scale = scale
    return state, scale


def propose_direction(
    mode: DirectionMode,
    d: int,
    rng: np.random.Generator,
    chol: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Unit-length slice direction."""
    if mode == DirectionMode.AXIS:
        direction = np.zeros(d)
        direction[rng.integers(d)] = 1.0
        return direction
    direction = rng.standard_normal(d)
    if mode == DirectionMode.COVARIANCE and chol is not None:
        direction = chol @ direction
    return direction / np.linalg.norm(direction)


def chord_bounds(point: np.ndarray, direction: np.ndarray) -> Tuple[float, float]:
    """Range of t with point + t * direction inside the unit cube."""
    moving = direction != 0.0
    to_zero = -point[moving] / direction[moving]
    to_one = (1.0 - point[moving]) / direction[moving]
    lo = float(np.max(np.minimum(to_zero, to_one)))
    hi = float(np.min(np.maximum(to_zero, to_one)))
    return min(lo, 0.0), max(hi, 0.0)


def slice_step(
    state: WalkState,
    direction_mode: DirectionMode,
    threshold: float,
    problem: "Problem",
    rng: np.random.Generator,
    chol: Optional[np.ndarray] = None,
    region: Optional[MLFriendsRegion] = None,
) -> WalkState:
    """Slice along one direction: uniform on the cube chord, shrunk on every reject."""
    direction = propose_direction(direction_mode, state.current.size, rng, chol)
    lo, hi = chord_bounds(state.current, direction)
    while True:
        if hi - lo < MIN_SLICE_WIDTH:
            raise StuckWalkerException(
                f"slice collapsed at u={state.current.tolist()} "
                f"below threshold {threshold!r}",
                evaluations=state.likelihood_evals,
            )
        t = rng.uniform(lo, hi)
        proposal = np.clip(state.current + t * direction, 0.0, 1.0)
        if region is None or region.contains(proposal):
            p, log_l = problem.evaluate(proposal)
            state.likelihood_evals += 1
            if log_l > threshold:
                state._accept(proposal, p, log_l)
                break
        state.rejects += 1
        if t < 0.0:
            lo = t
        else:
            hi = t
    state.steps_taken += 1
    return state


def lrps_walk(
    config: StepSamplerConfig,
    live_points: np.ndarray,
    threshold: float,
    problem: "Problem",
    rng: np.random.Generator,
    start: Optional[np.ndarray] = None,
    chol: Optional[np.ndarray] = None,
    region: Optional[MLFriendsRegion] = None,
    scale: Optional[float] = None,
    steps: Optional[int] = None,
) -> Tuple[Draw, WalkState]:
    """Walk ``steps`` (default ``config.steps_per_sample``) from a random live point.

    Gauss walks keep proposing past the step count until at least one move
    is accepted, so the returned point always differs from the start.
    """
    live_points = np.atleast_2d(np.asarray(live_points, dtype=float))
    if len(live_points) < 1:
        raise InvalidArgumentException(
            "need at least one live point", argument="live_points"
        )
    if start is None:
        start = live_points[rng.integers(len(live_points))]
    steps = config.steps_per_sample if steps is None else steps
    state = WalkState(start, scale=config.scale if scale is None else scale)

    if config.kind == StepKind.GAUSS_WALK:
        for _ in range(steps):
            gauss_walk_step(state, state.scale, threshold, problem, rng, chol, region)
        while state.accepts == 0:
            if state.steps_taken >= steps + config.max_steps:
                raise StuckWalkerException(
                    f"no gauss-walk move accepted in {state.steps_taken} proposals",
                    evaluations=state.likelihood_evals,
                )
            gauss_walk_step(state, state.scale, threshold, problem, rng, chol, region)
    else:
        mode = config.direction_mode
        for _ in range(steps):
            slice_step(state, mode, threshold, problem, rng, chol, region)

    delta = state.current - state.start
    state.accumulated_displacement = (
        mahalanobis_norm(chol, delta) if chol is not None else float(
            np.linalg.norm(delta)
        )
    )
    assert state.current_p is not None
    draw = Draw(
        state.current,
        state.current_p,
        state.current_log_likelihood,
        state.likelihood_evals,
    )
    return draw, state


def auto_tune_steps(
    config: StepSamplerConfig,
    displacement: float,
    live_points: Optional[np.ndarray] = None,
    reference: Optional[float] = None,
    steps: Optional[int] = None,
) -> int:
    """Next step count from the last walk's net Mahalanobis displacement.

    Below the mean pairwise live-point distance the count doubles (capped at
    ``max_steps``); otherwise it drops by one (floor 1).
    """
    steps = config.steps_per_sample if steps is None else steps
    if config.auto_tune == AutoTune.OFF:
        return steps
    if reference is None:
        if live_points is None:
            raise InvalidArgumentException(
                "need live points or a reference distance", argument="live_points"
            )
        reference = mean_pairwise_mahalanobis(live_points)
    if displacement < reference:
        return min(2 * steps, config.max_steps)
    return max(steps - 1, 1)


class StepSampler(LRPSampler):
    """Gauss-walk, axis-slice or hit-and-run sampler with optional step tuning.

    One walker per draw, run in the calling thread: ``--jobs`` does not
    spread walks over workers, and a fixed seed always gives the same
    chain. Parallel walkers that rewind to the last point above a new
    threshold are not supported.
    """

    def __init__(
        self,
        config: Optional[StepSamplerConfig] = None,
        settings: Optional[SamplerSettings] = None,
    ):
        super().__init__(settings)
        self.config = config or StepSamplerConfig()
        self.steps = self.config.steps_per_sample
        self.scale = self.config.scale
        self.chol: Optional[np.ndarray] = None
        self.reference: Optional[float] = None
        self.region: Optional[MLFriendsRegion] = None
        self.step_trace: List[int] = []
        self.displacements: List[float] = []

    @property
    def name(self) -> str:
        return self.config.kind.value

    @property
    def description(self) -> str:
        if self.config.kind == StepKind.GAUSS_WALK:
            return "Gaussian random walk with accept/reject scale adaptation"
        return f"Slice sampling along {self.config.direction_mode.value} directions"

    def refit(
        self,
        live_u: np.ndarray,
        rng: np.random.Generator,
        iteration: int,
        log_l_min: float,
    ) -> None:
        d = live_u.shape[1]
        try:
            self.chol = covariance_factor(live_u) if len(live_u) > d else None
        except DegenerateGeometryException as e:
            logger.warning(f"{self.name}: {e}; using unit-cube directions")
            self.chol = None
        if self.config.auto_tune != AutoTune.OFF and len(live_u) >= 2:
            try:
                self.reference = mean_pairwise_mahalanobis(live_u)
            except DegenerateGeometryException:
                self.reference = None
        if self.config.region_filter:
            try:
                self.region = mlfriends_fit(
                    live_u,
                    self.settings.bootstrap_rounds,
                    rng,
                    max_iterations=self.settings.mlfriends_max_iterations,
                )
            except (DegenerateGeometryException, InvalidArgumentException) as e:
                logger.warning(
                    f"{self.name}: region filter disabled until next refit ({e})"
                )
                self.region = None
        self._mark_fit(iteration, log_l_min, len(live_u) + 1)

    def sample(
        self,
        problem: "Problem",
        log_l_min: float,
        live_u: np.ndarray,
        rng: np.random.Generator,
        iteration: int = 0,
    ) -> Draw:
        live_u = np.atleast_2d(np.asarray(live_u, dtype=float))
        if self._needs_refit(iteration, log_l_min):
            self.refit(live_u, rng, iteration, log_l_min)
        draw, walk = lrps_walk(
            self.config,
            live_u,
            log_l_min,
            problem,
            rng,
            chol=self.chol,
            region=self.region,
            scale=self.scale,
            steps=self.steps,
        )
        if self.config.kind == StepKind.GAUSS_WALK:
            self.scale = walk.scale
        self.displacements.append(walk.accumulated_displacement)
        if self.reference is not None:
            self.steps = auto_tune_steps(
                self.config,
                walk.accumulated_displacement,
                reference=self.reference,
                steps=self.steps,
            )
        self.step_trace.append(self.steps)
        return self._count(draw)

    def stats(self) -> Dict[str, float]:
        stats = super().stats()
        stats["steps"] = float(self.steps)
        if self.config.kind == StepKind.GAUSS_WALK:
            stats["scale"] = self.scale
        if self.displacements:
            stats["mean_displacement"] = float(np.mean(self.displacements))
        return stats

    def state_dict(self) -> Dict[str, Any]:
        state = super().state_dict()
        state.update(
            {
                "steps": self.steps,
                "scale": self.scale,
                "step_trace": list(self.step_trace),
                "displacements": list(self.displacements),
            }
        )
        return state

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        super().load_state_dict(state)
        self.steps = int(state.get("steps", self.config.steps_per_sample))
        self.scale = float(state.get("scale", self.config.scale))
        self.step_trace = [int(s) for s in state.get("step_trace", [])]
        self.displacements = [float(s) for s in state.get("displacements", [])]
        self.chol = None
        self.reference = None
        self.region = None
