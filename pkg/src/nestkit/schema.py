"""nestkit schema definitions: enumerations, policies and result summaries."""

from enum import Enum
from typing import Any, Dict, List, Optional, Type, TypeVar

from pydantic import BaseModel, Field, ValidationError, model_validator

from .exceptions import InvalidArgumentException

FORMAT_VERSION = 1

M = TypeVar("M", bound=BaseModel)


class EstimatorKind(str, Enum):
    """Shrinkage estimators for the removed volume fraction."""
    ARITHMETIC = "arithmetic"
    GEOMETRIC = "geometric"
    STOCHASTIC = "stochastic"


class PlateauMode(str, Enum):
    """What to do when live points tie at the lowest likelihood."""
    REMOVE_WITHOUT_REPLACEMENT = "remove-without-replacement"
    ERROR = "error"


class TerminationReason(str, Enum):
    """Rule that decided the last termination check."""
    REMAINDER_ABOVE_EPSILON = "remainder-above-epsilon"
    BELOW_MIN_ITERATIONS = "below-min-iterations"
    REMAINDER = "remainder"
    MAX_ITERATIONS = "max-iterations"
    PLATEAU_EXHAUSTED = "plateau-exhausted"


class StepKind(str, Enum):
    """Random-walk sampler kinds."""
    GAUSS_WALK = "gauss-walk"
    SLICE_AXIS = "slice-axis"
    HARM = "harm"


class DirectionMode(str, Enum):
    """Direction proposals for slice steps."""
    AXIS = "axis"
    RANDOM_SPHERE = "random-sphere"
    COVARIANCE = "covariance"


class AutoTune(str, Enum):
    """Step count adaptation."""
    OFF = "off"
    MOVE_DISTANCE = "move-distance"


class SamplerKind(str, Enum):
    """Sampler names accepted on the command line."""
    ELLIPSOID = "ellipsoid"
    MLFRIENDS = "mlfriends"
    GAUSS = "gauss"
    SLICE = "slice"
    HARM = "harm"


class AgentKind(str, Enum):
    """Node-expanding agents."""
    CONSTANT_N = "constant-N"
    DYNAMIC_QUANTILE = "dynamic-quantile"
    POSTERIOR_WEIGHT = "posterior-weight"
    MIN_LIVE_FLOOR = "min-live-floor"


class ShrinkageEstimator(BaseModel):
    """How much prior volume one iteration removes."""
    kind: EstimatorKind = Field(
        default=EstimatorKind.ARITHMETIC, description="Estimator kind"
    )
    seed: Optional[int] = Field(
        default=None, ge=0, description="Seed for stochastic shrinkage"
    )


class TerminationPolicy(BaseModel):
    """When agents stop inserting children."""
    epsilon_remainder: float = Field(
        default=1e-3,
        gt=0.0,
        lt=1.0,
        description="Stop once Z_live/Z_dead falls below this",
    )
    min_iterations_factor: float = Field(
        default=1.0, ge=0.0, description="Run at least factor * H * N iterations"
    )
    max_iterations: Optional[int] = Field(
        default=None, gt=0, description="Hard iteration cap (safety valve only)"
    )
    plateau_mode: PlateauMode = Field(
        default=PlateauMode.REMOVE_WITHOUT_REPLACEMENT, description="Plateau handling"
    )


class StepSamplerConfig(BaseModel):
    """Random-walk sampler configuration."""
    kind: StepKind = Field(default=StepKind.HARM, description="Walk kind")
    steps_per_sample: int = Field(default=16, ge=1, description="Steps per new point")
    scale: float = Field(default=0.1, gt=0.0, description="Initial gauss-walk scale")
    auto_tune: AutoTune = Field(
        default=AutoTune.OFF, description="Step count adaptation"
    )
    region_filter: bool = Field(
        default=False, description="Reject proposals outside MLFriends region"
    )
    direction: Optional[DirectionMode] = Field(
        default=None, description="Override slice direction proposal"
    )
    max_steps: int = Field(
        default=4096, ge=1, description="Ceiling for auto-tuned steps"
    )

    @property
    def direction_mode(self) -> DirectionMode:
        if self.direction is not None:
            return self.direction
        if self.kind == StepKind.SLICE_AXIS:
            return DirectionMode.AXIS
        return DirectionMode.COVARIANCE


class AgentPolicy(BaseModel):
    """Where and when agents add children."""
    kind: AgentKind = Field(default=AgentKind.CONSTANT_N, description="Agent kind")
    n_live: int = Field(
        default=400, ge=1, description="N for constant-N, N' for dynamic batches"
    )
    cdf_mix_posterior_weight: float = Field(
        default=0.75, ge=0.0, le=1.0, description="Posterior CDF share in the mixed CDF"
    )
    q_low: float = Field(
        default=0.10, ge=0.0, le=1.0, description="Lower mixed-CDF quantile"
    )
    q_high: float = Field(
        default=0.90, ge=0.0, le=1.0, description="Upper mixed-CDF quantile"
    )
    target_sigma: Optional[float] = Field(
        default=None, gt=0.0, description="Target sigma(logZ)"
    )
    target_ess: Optional[float] = Field(
        default=400.0, gt=0.0, description="Target effective sample size"
    )
    max_rounds: int = Field(default=10, ge=0, description="Maximum dynamic rounds")
    expansions: int = Field(
        default=100, ge=0, description="Siblings per posterior-weight round"
    )
    max_live: Optional[int] = Field(
        default=None, ge=1, description="Ceiling for the live-point floor"
    )

    @model_validator(mode="after")
    def _check_quantiles(self) -> "AgentPolicy":
        if not self.q_low < self.q_high:
            raise ValueError("q_low must be below q_high")
        return self


class RunSummary(BaseModel):
    """Results summary written after a run, merge or resume."""
    format_version: int = Field(
        default=FORMAT_VERSION, description="Summary format version"
    )
    log_evidence: float = Field(description="log Z")
    log_evidence_uncertainty: float = Field(description="Standard deviation of log Z")
    information_gain: float = Field(description="H in nats")
    effective_sample_size: float = Field(description="(sum w)^2 / sum w^2")
    iterations: int = Field(description="Number of dead points")
    likelihood_evaluations: int = Field(
        default=0, description="Likelihood calls made by the sampler"
    )
    termination_reason: Optional[str] = Field(
        default=None, description="Rule that stopped insertion"
    )
    u_test_z: Optional[float] = Field(
        default=None, description="Full-run insertion-order z"
    )
    u_test_z_rolling: Optional[float] = Field(
        default=None, description="Last rolling-window z"
    )
    u_test_chunks_rejected: int = Field(
        default=0, description="Bonferroni-rejected chunks"
    )
    segments: List[int] = Field(
        default_factory=list, description="Completed segment lengths"
    )
    segments_flagged: bool = Field(
        default=False, description="Segment monitor bias flag"
    )
    plateau_warnings: int = Field(default=0, description="Plateau alarms raised")
    between_run_spread: Optional[float] = Field(
        default=None, description="Standard deviation of log Z across merged runs"
    )
    parameter_means: List[float] = Field(
        default_factory=list, description="Posterior means"
    )
    parameter_stds: List[float] = Field(
        default_factory=list, description="Posterior standard deviations"
    )
    sampler_stats: Dict[str, float] = Field(
        default_factory=dict, description="Acceptance statistics"
    )


class RunManifest(BaseModel):
    """Exact configuration of a run; merge and resume check against it."""
    format_version: int = Field(
        default=FORMAT_VERSION, description="Manifest format version"
    )
    problem: str = Field(description="Problem name or problem file path")
    problem_params: Dict[str, Any] = Field(
        default_factory=dict, description="Problem parameters"
    )
    sampler: SamplerKind = Field(description="Sampler kind")
    step: Optional[StepSamplerConfig] = Field(
        default=None, description="Step sampler config"
    )
    agent: AgentPolicy = Field(default_factory=AgentPolicy, description="Agent policy")
    termination: TerminationPolicy = Field(
        default_factory=TerminationPolicy, description="Termination policy"
    )
    estimator: ShrinkageEstimator = Field(
        default_factory=ShrinkageEstimator, description="Shrinkage estimator"
    )
    seed: int = Field(description="Master seed")
    bootstrap_rounds: int = Field(default=50, description="Region bootstrap rounds")


class RunCheckpoint(BaseModel):
    """Everything needed to continue a run from a truncated tree file."""
    format_version: int = Field(
        default=FORMAT_VERSION, description="Checkpoint format version"
    )
    node_count: int = Field(description="Non-root nodes present at the checkpoint")
    iteration: int = Field(description="Iteration about to sample")
    rng_state: Dict[str, Any] = Field(description="Philox bit generator state")
    sampler_state: Dict[str, Any] = Field(
        default_factory=dict, description="Adaptive sampler state"
    )


def validated(model: Type[M], **values: Any) -> M:
    """Build a pydantic model, reporting failures as invalid-argument errors."""
    try:
        return model(**values)
    except ValidationError as e:
        first = e.errors()[0]
        argument = ".".join(str(p) for p in first.get("loc", ()))
        raise InvalidArgumentException(
            f"{model.__name__}: {first.get('msg')}", argument=argument
        )
