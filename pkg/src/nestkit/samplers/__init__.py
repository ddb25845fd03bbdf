"""nestkit likelihood-restricted prior samplers."""

from typing import Optional

from ..config import SamplerSettings
from ..schema import SamplerKind, StepKind, StepSamplerConfig
from .base import Draw, LRPSampler
from .rejection import EllipsoidSampler, MLFriendsSampler, RegionSampler, lrps_rejection
from .stepsampler import (
    StepSampler,
    WalkState,
    auto_tune_steps,
    gauss_walk_step,
    lrps_walk,
    slice_step,
)

_STEP_KINDS = {
    SamplerKind.GAUSS: StepKind.GAUSS_WALK,
    SamplerKind.SLICE: StepKind.SLICE_AXIS,
    SamplerKind.HARM: StepKind.HARM,
}


def step_config_for(
    kind: SamplerKind, step: Optional[StepSamplerConfig] = None
) -> Optional[StepSamplerConfig]:
    """Step configuration matching a sampler kind (None for region samplers)."""
    if kind not in _STEP_KINDS:
        return None
    step = step or StepSamplerConfig()
    return step.model_copy(update={"kind": _STEP_KINDS[kind]})


def create_sampler(
    kind: SamplerKind,
    step: Optional[StepSamplerConfig] = None,
    settings: Optional[SamplerSettings] = None,
) -> LRPSampler:
    """Build the sampler named on the command line."""
    kind = SamplerKind(kind)
    if kind == SamplerKind.ELLIPSOID:
        return EllipsoidSampler(settings)
    if kind == SamplerKind.MLFRIENDS:
        return MLFriendsSampler(settings)
    return StepSampler(step_config_for(kind, step), settings)


__all__ = [
    "Draw",
    "LRPSampler",
    "RegionSampler",
    "EllipsoidSampler",
    "MLFriendsSampler",
    "StepSampler",
    "WalkState",
    "lrps_rejection",
    "lrps_walk",
    "gauss_walk_step",
    "slice_step",
    "auto_tune_steps",
    "step_config_for",
    "create_sampler",
]
