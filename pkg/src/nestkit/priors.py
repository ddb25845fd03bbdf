"""Prior transforms from the unit hypercube to physical parameters.

Every prior is expressed as a map from u in [0, 1]^d, drawn uniformly, to
parameters distributed according to the prior. Independent parameters use
their inverse CDF; correlated Gaussians use an affine map of standard
normals; fractions use the flat Dirichlet construction.
"""

from typing import Callable, List, Literal, Mapping, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.special import ndtri

from .exceptions import InvalidArgumentException
from .schema import validated

U_EPSILON = 1e-15


class UniformPrior(BaseModel):
    """Uniform on [a, b]."""
    kind: Literal["uniform"] = "uniform"
    a: float = Field(description="Lower bound")
    b: float = Field(description="Upper bound")

    @model_validator(mode="after")
    def _check(self) -> "UniformPrior":
        if not self.a < self.b:
            raise ValueError("need a < b")
        return self

    def ppf(self, u: np.ndarray) -> np.ndarray:
        return self.a + (self.b - self.a) * u


class NormalPrior(BaseModel):
    """Normal with mean mu and standard deviation sigma."""
    kind: Literal["normal"] = "normal"
    mu: float = Field(default=0.0, description="Mean")
    sigma: float = Field(default=1.0, gt=0.0, description="Standard deviation")

    def ppf(self, u: np.ndarray) -> np.ndarray:
        return self.mu + self.sigma * ndtri(np.clip(u, U_EPSILON, 1.0 - U_EPSILON))


class LogUniformPrior(BaseModel):
    """Uniform in log between a > 0 and b."""
    kind: Literal["log-uniform"] = "log-uniform"
    a: float = Field(gt=0.0, description="Lower bound")
    b: float = Field(gt=0.0, description="Upper bound")

    @model_validator(mode="after")
    def _check(self) -> "LogUniformPrior":
        if not self.a < self.b:
            raise ValueError("need a < b")
        return self

    def ppf(self, u: np.ndarray) -> np.ndarray:
        return np.exp(np.log(self.a) + (np.log(self.b) - np.log(self.a)) * u)


Distribution = Union[UniformPrior, NormalPrior, LogUniformPrior]


def uniform(a: float, b: float) -> UniformPrior:
    return validated(UniformPrior, a=a, b=b)


def normal(mu: float = 0.0, sigma: float = 1.0) -> NormalPrior:
    return validated(NormalPrior, mu=mu, sigma=sigma)


def log_uniform(a: float, b: float) -> LogUniformPrior:
    return validated(LogUniformPrior, a=a, b=b)


_DISTRIBUTIONS = {
    "uniform": UniformPrior, "normal": NormalPrior, "log-uniform": LogUniformPrior
}


def distribution_from_mapping(values: Mapping[str, str]) -> Distribution:
    """Build a distribution from ``kind=... a=... b=...`` style key/values."""
    kind = values.get("kind", values.get("dist"))
    if kind not in _DISTRIBUTIONS:
        raise InvalidArgumentException(
            f"unknown distribution {kind!r}", argument="kind"
        )
    params = {k: v for k, v in values.items() if k not in ("kind", "dist")}
    return validated(_DISTRIBUTIONS[kind], **params)  # type: ignore[return-value]


class PriorTransform:
    """Map from [0, 1]^dimension_in to physical space (vectorized over leading axes)."""

    def __init__(
        self,
        dimension_in: int,
        dimension_out: int,
        transform: Callable[[np.ndarray], np.ndarray],
        name: str = "prior",
    ):
        if dimension_in < 1 or dimension_out < 1:
            raise InvalidArgumentException(
                "prior dimensions must be positive", argument="dimension"
            )
        self.dimension_in = dimension_in
        self.dimension_out = dimension_out
        self.name = name
        self._transform = transform

    def __call__(self, u: Union[Sequence[float], np.ndarray]) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape[-1:] != (self.dimension_in,):
            raise InvalidArgumentException(
                f"{self.name} expects {self.dimension_in} unit coordinates, "
                f"got {u.shape[-1:]}",
                argument="u",
            )
        return self._transform(u)

    def __repr__(self) -> str:
        dims = f"{self.dimension_in} -> {self.dimension_out}"
        return f"PriorTransform({self.name}: {dims})"


def identity_transform(dimension: int) -> PriorTransform:
    return PriorTransform(dimension, dimension, lambda u: u.copy(), name="unit-cube")


def inverse_cdf_transform(distributions: Sequence[Distribution]) -> PriorTransform:
    """Component-wise inverse CDF, one distribution per dimension."""
    if not distributions:
        raise InvalidArgumentException(
            "need at least one distribution", argument="distributions"
        )
    distributions = list(distributions)

    def transform(u: np.ndarray) -> np.ndarray:
        return np.stack(
            [dist.ppf(u[..., i]) for i, dist in enumerate(distributions)], axis=-1
        )

    return PriorTransform(
        len(distributions), len(distributions), transform, name="inverse-cdf"
    )


def correlated_gaussian_transform(
    mean: Sequence[float], covariance: Sequence[Sequence[float]]
) -> PriorTransform:
    """theta = A z + mu with z standard normal and covariance = A A^T."""
    mu = np.asarray(mean, dtype=float).reshape(-1)
    cov = np.asarray(covariance, dtype=float)
    d = mu.size
    if cov.shape != (d, d):
        raise InvalidArgumentException(
            f"covariance must be {d}x{d}, got {cov.shape}", argument="covariance"
        )
    if not np.allclose(cov, cov.T):
        raise InvalidArgumentException(
            "covariance is not symmetric", argument="covariance"
        )
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise InvalidArgumentException(
            "covariance is not positive definite", argument="covariance"
        )

    def transform(u: np.ndarray) -> np.ndarray:
        z = ndtri(np.clip(u, U_EPSILON, 1.0 - U_EPSILON))
        return z @ chol.T + mu

    return PriorTransform(d, d, transform, name="gaussian-correlated")


def dirichlet_transform(k: int) -> PriorTransform:
    """Flat Dirichlet over k fractions: theta_i = -log u_i / sum_j -log u_j."""
    if k < 2:
        raise InvalidArgumentException(
            f"need at least 2 fractions, got {k}", argument="k"
        )

    def transform(u: np.ndarray) -> np.ndarray:
        z = -np.log(np.clip(u, U_EPSILON, 1.0 - U_EPSILON))
        return z / z.sum(axis=-1, keepdims=True)

    return PriorTransform(k, k, transform, name="dirichlet")


class ConditionalBlock:
    """Block whose transform also sees the parameters transformed before it."""

    def __init__(
        self,
        dimension_in: int,
        dimension_out: int,
        transform: Callable[[np.ndarray, np.ndarray], np.ndarray],
        name: str = "conditional",
    ):
        self.dimension_in = dimension_in
        self.dimension_out = dimension_out
        self.name = name
        self.transform = transform


Block = Union[PriorTransform, ConditionalBlock]


def compose(blocks: Sequence[Block]) -> PriorTransform:
    """Chain blocks over consecutive slices of the unit cube."""
    if not blocks:
        raise InvalidArgumentException("nothing to compose", argument="blocks")
    blocks = list(blocks)
    d_in = sum(b.dimension_in for b in blocks)
    d_out = sum(b.dimension_out for b in blocks)

    def transform(u: np.ndarray) -> np.ndarray:
        parts: List[np.ndarray] = []
        start = 0
        for block in blocks:
            chunk = u[..., start:start + block.dimension_in]
            start += block.dimension_in
            if isinstance(block, ConditionalBlock):
                previous = (
                    np.concatenate(parts, axis=-1) if parts else np.empty(
                        u.shape[:-1] + (0,)
                    )
                )
                parts.append(np.asarray(block.transform(chunk, previous), dtype=float))
            else:
                parts.append(block(chunk))
        return np.concatenate(parts, axis=-1)

    names = "+".join(b.name for b in blocks)
    return PriorTransform(d_in, d_out, transform, name=names)
