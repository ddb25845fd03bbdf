"""Inference problems: built-in test likelihoods and user problem files.

Built-in problems know their evidence (analytically or through a quadrature
oracle) and, where possible, the prior volume enclosed by each likelihood
contour, which makes them usable as sampler calibration fixtures.
"""

import configparser
import logging
import math
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import erf, gammaln

from .exceptions import (
    DataException,
    ExternalLikelihoodException,
    InvalidArgumentException,
    NotFoundException,
    ParseException,
)
from .priors import (
    Block,
    PriorTransform,
    compose,
    correlated_gaussian_transform,
    dirichlet_transform,
    distribution_from_mapping,
    identity_transform,
    inverse_cdf_transform,
    uniform,
)

logger = logging.getLogger(__name__)

LOG2 = math.log(2.0)


@dataclass(frozen=True)
class Problem:
    """Prior transform plus log-likelihood."""
    name: str
    dimension: int
    prior: PriorTransform
    log_likelihood: Callable[[np.ndarray], float]
    analytic_log_z: Optional[float] = None
    log_volume_at: Optional[Callable[[float], float]] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def evaluate(self, u: np.ndarray) -> Tuple[np.ndarray, float]:
        """Physical point and log-likelihood for a unit-cube point."""
        theta = self.prior(u)
        log_l = float(self.log_likelihood(theta))
        if math.isnan(log_l):
            raise DataException(
                f"{self.name} returned NaN at u={np.asarray(u).tolist()}"
            )
        return theta, log_l

    def volume_at(self, log_l: float) -> float:
        """Prior mass X(L) with likelihood above ``exp(log_l)``."""
        if self.log_volume_at is None:
            raise InvalidArgumentException(
                f"{self.name} has no analytic X(L)", argument="problem"
            )
        return math.exp(self.log_volume_at(log_l))

    def close(self) -> None:
        """Release an external likelihood process, if any."""
        closer = getattr(self.log_likelihood, "close", None)
        if callable(closer):
            closer()


def _box_prior(d: int) -> PriorTransform:
    return inverse_cdf_transform([uniform(-1.0, 1.0)] * d)


def _log_unit_ball_volume(d: int) -> float:
    return 0.5 * d * math.log(math.pi) - float(gammaln(0.5 * d + 1.0))


def _log_sphere_area(d: int) -> float:
    return LOG2 + 0.5 * d * math.log(math.pi) - float(gammaln(0.5 * d))


def constant(d: int = 2) -> Problem:
    """Unit likelihood everywhere; Z = 1."""
    if d < 1:
        raise InvalidArgumentException("d must be positive", argument="d")

    def log_volume_at(log_l: float) -> float:
        return 0.0 if log_l < 0.0 else -math.inf

    return Problem(
        "constant",
        d,
        identity_transform(d),
        lambda theta: 0.0,
        0.0,
        log_volume_at,
        {"d": d},
    )


def gaussian(d: int = 2, sigma: float = 0.01) -> Problem:
    """Unnormalized spherical Gaussian exp(-|x|^2 / 2 sigma^2) on the box [-1, 1]^d."""
    if d < 1:
        raise InvalidArgumentException("d must be positive", argument="d")
    if not sigma > 0:
        raise InvalidArgumentException("sigma must be positive", argument="sigma")
    inv_two_var = 0.5 / sigma**2
    mass = float(erf(1.0 / (sigma * math.sqrt(2.0))))
    per_axis = sigma * math.sqrt(2.0 * math.pi) * mass / 2.0
    log_ball = _log_unit_ball_volume(d)

    def log_likelihood(theta: np.ndarray) -> float:
        return -float(np.dot(theta, theta)) * inv_two_var

    def log_volume_at(log_l: float) -> float:
        if log_l >= 0.0:
            return -math.inf
        radius = sigma * math.sqrt(-2.0 * log_l)
        if radius >= math.sqrt(d):
            return 0.0
        if radius > 1.0:
            return math.nan  # ball pokes out of the box
        return log_ball + d * math.log(radius) - d * LOG2

    return Problem(
        "gaussian",
        d,
        _box_prior(d),
        log_likelihood,
        d * math.log(per_axis),
        log_volume_at,
        {"d": d, "sigma": sigma},
    )


def gaussian_shell(r: float = 0.5, w: float = 0.01, d: int = 2) -> Problem:
    """Normal profile of width w around a sphere of radius r, on [-1, 1]^d."""
    if not w > 0 or not r > 0:
        raise InvalidArgumentException("r and w must be positive", argument="w")
    if r + 12.0 * w > 1.0:
        raise InvalidArgumentException(
            "shell must fit inside the prior box", argument="r"
        )
    if d < 1:
        raise InvalidArgumentException("d must be positive", argument="d")
    log_norm = -0.5 * math.log(2.0 * math.pi * w * w)

    def log_likelihood(theta: np.ndarray) -> float:
        return log_norm - 0.5 * ((float(np.linalg.norm(theta)) - r) / w) ** 2

    nodes, weights = np.polynomial.legendre.leggauss(200)
    lo, hi = max(0.0, r - 12.0 * w), r + 12.0 * w
    rho = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
    radial = np.exp((d - 1) * np.log(rho) + log_norm - 0.5 * ((rho - r) / w) ** 2)
    integral = 0.5 * (hi - lo) * float(weights @ radial)
    log_z = _log_sphere_area(d) + math.log(integral) - d * LOG2

    return Problem(
        "gaussian-shell",
        d,
        _box_prior(d),
        log_likelihood,
        log_z,
        None,
        {"r": r, "w": w, "d": d},
    )


def hyper_rectangle(d: int = 2) -> Problem:
    """L = 1 / max_i |theta_i - 1/2| on the unit cube; contours are boxes."""
    if d < 1:
        raise InvalidArgumentException("d must be positive", argument="d")

    def log_likelihood(theta: np.ndarray) -> float:
        with np.errstate(divide="ignore"):
            return -float(np.log(np.max(np.abs(theta - 0.5))))

    def log_volume_at(log_l: float) -> float:
        if log_l < LOG2:
            return 0.0
        return d * (LOG2 - log_l)

    # Z = 2d / (d - 1); diverges in one dimension
    log_z = math.log(2.0 * d / (d - 1.0)) if d > 1 else None
    return Problem(
        "hyper-rectangle",
        d,
        identity_transform(d),
        log_likelihood,
        log_z,
        log_volume_at,
        {"d": d},
    )


def heavy_tail_equal_weight() -> Problem:
    """L = min(1/theta, e^100) on [0, 1]: every decade of volume weighs the same."""

    def log_likelihood(theta: np.ndarray) -> float:
        with np.errstate(divide="ignore"):
            return min(-float(np.log(theta[0])), 100.0)

    def log_volume_at(log_l: float) -> float:
        if log_l < 0.0:
            return 0.0
        if log_l >= 100.0:
            return -math.inf
        return -log_l

    return Problem(
        "heavy-tail",
        1,
        identity_transform(1),
        log_likelihood,
        math.log(101.0),
        log_volume_at,
        {},
    )


def step_plateau() -> Problem:
    """L = 1 on [0, 1/2), L = 2 on [1/2, 1]: two exact plateaus, Z = 1.5."""

    def log_likelihood(theta: np.ndarray) -> float:
        return LOG2 if theta[0] >= 0.5 else 0.0

    def log_volume_at(log_l: float) -> float:
        if log_l < 0.0:
            return 0.0
        if log_l < LOG2:
            return -LOG2
        return -math.inf

    return Problem(
        "step-plateau",
        1,
        identity_transform(1),
        log_likelihood,
        math.log(1.5),
        log_volume_at,
        {},
    )


@dataclass(frozen=True)
class DiamondRingParams:
    """A thin ring (slab) with a narrower, brighter ring (spike) sitting on it."""
    r1: float = 1e-11
    width_ratio: float = 0.4
    shrink: float = 40.0
    amplitude: float = 100.0

    @property
    def w1(self) -> float:
        return self.width_ratio * self.r1

    @property
    def r2(self) -> float:
        return self.r1 / self.shrink

    @property
    def w2(self) -> float:
        return self.w1 / self.shrink


def _ring_log_terms(
    params: DiamondRingParams, x: float, y: float
) -> Tuple[float, float]:
    d1 = math.hypot(x, y)
    d2 = math.hypot(x + params.r1, y)
    z1 = (d1 - params.r1) / params.w1
    z2 = (d2 - params.r2) / params.w2
    log_n1 = -0.5 * math.log(2.0 * math.pi * params.w1) - 0.5 * z1**2
    log_n2 = -0.5 * math.log(2.0 * math.pi * params.w2) - 0.5 * z2**2
    return log_n1, log_n2


def _ring_area_integral(r: float, w: float, order: int, n_angles: int = 64) -> float:
    """Integral of (2 pi w)^-1/2 exp(-((rho - r) / w)^2 / 2) over the plane.

    Radial Gauss-Legendre quadrature in polar coordinates.
    """
    lo, hi = max(0.0, r - 8.0 * w), r + 8.0 * w
    nodes, weights = np.polynomial.legendre.leggauss(order)
    rho = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
    profile = rho * np.exp(-0.5 * ((rho - r) / w) ** 2) / math.sqrt(2.0 * math.pi * w)
    radial = 0.5 * (hi - lo) * float(weights @ profile)
    # trapezoid over the periodic angle; the profile does not depend on it
    angles = np.linspace(0.0, 2.0 * math.pi, n_angles + 1)
    return float(trapezoid(np.full(angles.shape, radial), angles))


def diamond_ring_log_z(
    params: DiamondRingParams = DiamondRingParams(), rtol: float = 1e-7
) -> float:
    """Quadrature oracle for the diamond ring evidence over the [-1, 1]^2 prior."""
    order = 16
    previous = None
    while order <= 4096:
        inner = _ring_area_integral(params.r1, params.w1, order)
        outer = _ring_area_integral(params.r2, params.w2, order)
        log_z = math.log(inner + params.amplitude * outer) - math.log(4.0)
        if previous is not None:
            if abs(log_z - previous) <= rtol * max(1.0, abs(log_z)):
                return log_z
        previous = log_z
        order *= 2
    raise InvalidArgumentException(
        "diamond ring quadrature did not converge", argument="params"
    )


def diamond_ring(
    r1: float = 1e-11,
    width_ratio: float = 0.4,
    shrink: float = 40.0,
    amplitude: float = 100.0,
) -> Problem:
    """Two nested thin rings in 2-d; the brighter one is 40 times smaller."""
    if not r1 > 0 or not width_ratio > 0 or not shrink > 0 or not amplitude > 0:
        raise InvalidArgumentException(
            "diamond ring parameters must be positive", argument="r1"
        )
    params = DiamondRingParams(r1, width_ratio, shrink, amplitude)
    log_amplitude = math.log(amplitude)

    def log_likelihood(theta: np.ndarray) -> float:
        log_n1, log_n2 = _ring_log_terms(params, float(theta[0]), float(theta[1]))
        return float(np.logaddexp(log_n1, log_amplitude + log_n2))

    return Problem(
        "diamond-ring",
        2,
        _box_prior(2),
        log_likelihood,
        diamond_ring_log_z(params),
        None,
        {
            "r1": r1,
            "width_ratio": width_ratio,
            "shrink": shrink,
            "amplitude": amplitude,
        },
    )


PROBLEMS: Dict[str, Callable[..., Problem]] = {
    "constant": constant,
    "gaussian": gaussian,
    "gaussian-shell": gaussian_shell,
    "hyper-rectangle": hyper_rectangle,
    "heavy-tail": heavy_tail_equal_weight,
    "step-plateau": step_plateau,
    "diamond-ring": diamond_ring,
}


def list_problems() -> List[Tuple[str, str]]:
    """(name, one-line description) of every built-in problem."""
    return [
        (name, (factory.__doc__ or "").strip().splitlines()[0])
        for name, factory in PROBLEMS.items()
    ]


def get_problem(name: str, **params: Any) -> Problem:
    """Build a built-in problem, or load a problem file when ``name`` is a path."""
    if name in PROBLEMS:
        try:
            return PROBLEMS[name](**params)
        except TypeError as e:
            raise InvalidArgumentException(f"{name}: {e}", argument="params")
    if Path(name).is_file():
        return load_problem_file(name)
    raise NotFoundException("problem", name)


class ExternalLikelihood:
    """Log-likelihood computed by a child process.

    Protocol: one point per line on the child's stdin (space-separated
    floats), one log-likelihood per line on its stdout.
    """

    def __init__(
        self, command: Union[str, Sequence[str]], cwd: Optional[Union[str, Path]] = None
    ):
        self.command = shlex.split(command) if isinstance(command, str) else list(
            command
        )
        self.cwd = cwd
        self._process: Optional[subprocess.Popen] = None
        self._lock = threading.Lock()

    @property
    def label(self) -> str:
        return " ".join(self.command)

    def _ensure_started(self) -> subprocess.Popen:
        if self._process is None or self._process.poll() is not None:
            try:
                self._process = subprocess.Popen(
                    self.command,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    text=True,
                    bufsize=1,
                    cwd=self.cwd,
                )
            except OSError as e:
                raise ExternalLikelihoodException(self.label, str(e))
            logger.info(f"Started external likelihood: {self.label}")
        return self._process

    def __call__(self, theta: np.ndarray) -> float:
        with self._lock:
            process = self._ensure_started()
            assert process.stdin is not None and process.stdout is not None
            try:
                process.stdin.write(
                    " ".join(repr(float(v)) for v in np.ravel(theta)) + "\n"
                )
                process.stdin.flush()
                line = process.stdout.readline()
            except (BrokenPipeError, OSError) as e:
                raise ExternalLikelihoodException(self.label, str(e))
        if not line:
            raise ExternalLikelihoodException(self.label, "process closed its output")
        try:
            return float(line)
        except ValueError:
            raise ExternalLikelihoodException(
                self.label, f"cannot parse reply {line.strip()!r}"
            )

    def close(self) -> None:
        if self._process is not None:
            if self._process.stdin is not None:
                try:
                    self._process.stdin.close()
                except OSError:
                    pass  # child already gone
            try:
                self._process.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._process.kill()
            self._process = None


def _floats(text: str, section: str, key: str) -> List[float]:
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise ParseException(f"[{section}] {key}: expected numbers, got {text!r}")


def _block_from_section(name: str, section: configparser.SectionProxy) -> Block:
    kind = section.get("kind")
    if kind == "dirichlet":
        return dirichlet_transform(section.getint("k"))
    if kind == "gaussian-correlated":
        mean = _floats(section["mean"], name, "mean")
        rows = [
            _floats(row, name, "covariance") for row in section["covariance"].split(";")
        ]
        return correlated_gaussian_transform(mean, rows)
    raise ParseException(f"[{name}] unknown block kind {kind!r}")


def load_problem_file(path: Union[str, Path]) -> Problem:
    """Read a problem from key=value sections.

    ``[problem]`` names the likelihood command; ``[prior.<name>]`` sections
    declare one dimension each and ``[block.<name>]`` sections declare
    composite blocks, applied in file order.
    """
    path = Path(path)
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except FileNotFoundError:
        raise NotFoundException("problem file", str(path))
    except configparser.Error as e:
        raise ParseException(str(e), line=getattr(e, "lineno", 0) or 0)

    if not parser.has_section("problem") or "likelihood" not in parser["problem"]:
        raise ParseException("problem file needs [problem] with a likelihood command")
    meta = parser["problem"]

    blocks: List[Block] = []
    pending = []
    for name in parser.sections():
        if name.startswith("prior."):
            pending.append(distribution_from_mapping(dict(parser[name])))
            continue
        if name.startswith("block."):
            if pending:
                blocks.append(inverse_cdf_transform(pending))
                pending = []
            blocks.append(_block_from_section(name, parser[name]))
    if pending:
        blocks.append(inverse_cdf_transform(pending))
    if not blocks:
        raise ParseException("problem file declares no prior sections")

    prior = compose(blocks) if len(blocks) > 1 else blocks[0]
    assert isinstance(prior, PriorTransform)
    likelihood = ExternalLikelihood(meta["likelihood"], cwd=path.parent)
    log_z = meta.getfloat("log_z") if "log_z" in meta else None
    return Problem(
        meta.get("name", path.stem),
        prior.dimension_in,
        prior,
        likelihood,
        log_z,
        None,
        {"file": str(path)},
    )
