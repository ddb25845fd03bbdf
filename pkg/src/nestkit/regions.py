"""Bounding regions around the live points, in unit-cube coordinates.

``Ellipsoid`` is a single bootstrapped bounding ellipsoid. ``MLFriendsRegion``
is the union of identical ellipsoids centred on every live point, with the
shared metric taken from the cluster-mean-subtracted points and the radius
estimated by leaving points out.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.linalg import solve_triangular
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import distance
from scipy.special import gammaln

from .exceptions import (
    BudgetExhaustedException,
    DegenerateGeometryException,
    InvalidArgumentException,
    handle_linalg_exception,
)

logger = logging.getLogger(__name__)

JITTER = 1e-10
CONTAINS_CHUNK = 2048


def sample_unit_ball(d: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform point in the d-dimensional unit ball."""
    z = rng.standard_normal(d)
    return z / np.linalg.norm(z) * rng.random() ** (1.0 / d)


def log_unit_ball_volume(d: int) -> float:
    return 0.5 * d * math.log(math.pi) - float(gammaln(0.5 * d + 1.0))


def _as_points(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise InvalidArgumentException(
            f"expected an (N, d) array, got shape {points.shape}", argument="points"
        )
    return points


def _jittered_cov(points: np.ndarray) -> np.ndarray:
    n, d = points.shape
    cov = np.atleast_2d(np.cov(points, rowvar=False))
    trace = float(np.trace(cov))
    if not trace > 0:
        raise DegenerateGeometryException("live points have zero spread", n_points=n)
    return cov + np.eye(d) * JITTER * trace / d


def _cholesky(matrix: np.ndarray, context: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as e:
        raise handle_linalg_exception(e, context)


def _whiten(chol: np.ndarray, points: np.ndarray) -> np.ndarray:
    return solve_triangular(chol, points.T, lower=True).T


def covariance_factor(points: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of the (jittered) sample covariance."""
    return _cholesky(_jittered_cov(_as_points(points)), "live-point covariance")


def mahalanobis_norm(chol: np.ndarray, delta: np.ndarray) -> float:
    return float(np.linalg.norm(solve_triangular(chol, delta, lower=True)))


def mean_pairwise_mahalanobis(points: np.ndarray) -> float:
    """Mean distance over all pairs, in the metric of the points' own covariance."""
    points = _as_points(points)
    if len(points) < 2:
        raise InvalidArgumentException("need at least 2 points", argument="points")
    whitened = _whiten(covariance_factor(points), points)
    return float(np.mean(distance.pdist(whitened)))


@dataclass(frozen=True)
class Ellipsoid:
    """{p : (p - center)^T shape^-1 (p - center) <= enlargement}."""
    center: np.ndarray
    shape: np.ndarray
    enlargement: float = 1.0
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.enlargement < 1.0:
            raise InvalidArgumentException(
                "enlargement must be at least 1", argument="enlargement"
            )
        object.__setattr__(self, "chol", _cholesky(self.shape, "ellipsoid shape"))

    @property
    def dimension(self) -> int:
        return int(self.center.size)

    @property
    def log_volume(self) -> float:
        d = self.dimension
        return (
            log_unit_ball_volume(d)
            + 0.5 * d * math.log(self.enlargement)
            + float(np.sum(np.log(np.diag(self.chol))))
        )

    def mahalanobis_sq(self, points: np.ndarray) -> np.ndarray:
        delta = np.atleast_2d(points) - self.center
        return np.sum(_whiten(self.chol, delta) ** 2, axis=1)

    def contains_many(self, points: np.ndarray) -> np.ndarray:
        return self.mahalanobis_sq(points) <= self.enlargement

    def contains(self, point: np.ndarray) -> bool:
        return bool(self.contains_many(point)[0])

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        x = sample_unit_ball(self.dimension, rng)
        return self.center + math.sqrt(self.enlargement) * (self.chol @ x)


def fit_ellipsoid(
    points: np.ndarray, bootstrap_rounds: int, rng: np.random.Generator
) -> Ellipsoid:
    """Bounding ellipsoid of ``points``, enlarged to recover left-out points.

    The shape is the sample covariance scaled to touch the farthest point.
    Each bootstrap round takes the covariance of a resample and measures the
    left-out points in that metric; the largest such radius over all rounds
    sets the enlargement.
    """
    points = _as_points(points)
    n, d = points.shape
    if n < d + 1:
        raise DegenerateGeometryException(
            f"{n} points cannot span {d} dimensions", n_points=n
        )
    if bootstrap_rounds < 0:
        raise InvalidArgumentException(
            "bootstrap rounds must be non-negative", argument="bootstrap_rounds"
        )

    center = points.mean(axis=0)
    cov = _jittered_cov(points)
    base = Ellipsoid(center, cov)
    extent = float(np.max(base.mahalanobis_sq(points)))
    if not extent > 0:
        raise DegenerateGeometryException("all points sit on the centre", n_points=n)

    enlargement = 1.0
    for _ in range(bootstrap_rounds):
        selected = rng.integers(n, size=n)
        kept = np.zeros(n, dtype=bool)
        kept[selected] = True
        if kept.all() or kept.sum() < d + 1:
            continue
        try:
            trial = Ellipsoid(
                points[selected].mean(axis=0), _jittered_cov(points[selected])
            )
        except DegenerateGeometryException:
            continue
        outer = float(np.max(trial.mahalanobis_sq(points[~kept])))
        enlargement = max(enlargement, outer / extent)

    logger.debug(f"Ellipsoid fit on {n} points in {d}-d: enlargement {enlargement:.3f}")
    return Ellipsoid(center, cov * extent, enlargement)


def sample_ellipsoid(ellipsoid: Ellipsoid, rng: np.random.Generator) -> np.ndarray:
    return ellipsoid.sample(rng)


@dataclass(frozen=True)
class UnitCubeRegion:
    """The whole unit cube; the fallback when live points are degenerate."""
    dimension: int

    @property
    def log_volume(self) -> float:
        return 0.0

    def contains_many(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= 0.0) & (points <= 1.0), axis=1)

    def contains(self, point: np.ndarray) -> bool:
        return bool(self.contains_many(point)[0])

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.random(self.dimension)


@dataclass(frozen=True)
class MLFriendsRegion:
    """Union of metric balls of squared radius ``radius_sq`` around every anchor."""
    anchor_points: np.ndarray
    metric: np.ndarray
    radius_sq: float
    cluster_labels: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)
    whitened_anchors: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        chol = _cholesky(self.metric, "MLFriends metric")
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "whitened_anchors", _whiten(chol, self.anchor_points))

    @property
    def dimension(self) -> int:
        return int(self.anchor_points.shape[1])

    @property
    def n_clusters(self) -> int:
        return int(np.unique(self.cluster_labels).size)

    def whiten(self, points: np.ndarray) -> np.ndarray:
        return _whiten(self.chol, np.atleast_2d(points))

    def nearest_distance_sq(self, points: np.ndarray) -> np.ndarray:
        """Squared metric distance from each point to its nearest anchor."""
        w = self.whiten(points)
        out = np.empty(len(w))
        for start in range(0, len(w), CONTAINS_CHUNK):
            chunk = w[start:start + CONTAINS_CHUNK]
            out[start:start + CONTAINS_CHUNK] = distance.cdist(
                chunk, self.whitened_anchors, "sqeuclidean"
            ).min(axis=1)
        return out

    def contains_many(self, points: np.ndarray) -> np.ndarray:
        return self.nearest_distance_sq(points) <= self.radius_sq

    def contains(self, point: np.ndarray) -> bool:
        return bool(self.contains_many(point)[0])

    def multiplicity(self, point: np.ndarray) -> int:
        """Number of anchor balls containing ``point``."""
        d2 = distance.cdist(self.whiten(point), self.whitened_anchors, "sqeuclidean")[0]
        return int(np.sum(d2 <= self.radius_sq))

    def sample(self, rng: np.random.Generator, max_tries: int = 1000000) -> np.ndarray:
        """Uniform point in the union, restricted to the unit cube."""
        n = len(self.anchor_points)
        radius = math.sqrt(self.radius_sq)
        for attempt in range(1, max_tries + 1):
            anchor = self.anchor_points[rng.integers(n)]
            x = anchor + radius * (self.chol @ sample_unit_ball(self.dimension, rng))
            if np.any(x < 0.0) or np.any(x > 1.0):
                continue
            # one anchor ball in m covers x; keep it with probability 1/m
            if rng.random() * self.multiplicity(x) < 1.0:
                return x
        raise BudgetExhaustedException(draws=max_tries, evaluations=0, budget=max_tries)


Region = Union[Ellipsoid, MLFriendsRegion, UnitCubeRegion]


def _loo_radius_sq(whitened: np.ndarray) -> float:
    d2 = distance.squareform(distance.pdist(whitened, "sqeuclidean"))
    np.fill_diagonal(d2, np.inf)
    return float(np.max(np.min(d2, axis=1)))


def _bootstrap_radius_sq(
    whitened: np.ndarray, rounds: int, rng: np.random.Generator
) -> float:
    n = len(whitened)
    radius_sq = 0.0
    for _ in range(rounds):
        kept = np.zeros(n, dtype=bool)
        kept[rng.integers(n, size=n)] = True
        if kept.all():
            continue
        d2 = distance.cdist(whitened[~kept], whitened[kept], "sqeuclidean").min(axis=1)
        radius_sq = max(radius_sq, float(d2.max()))
    if radius_sq == 0.0:
        radius_sq = _loo_radius_sq(whitened)
    return radius_sq


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters in order of first appearance."""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse]


def _clusters(whitened: np.ndarray, radius_sq: float) -> np.ndarray:
    d2 = distance.squareform(distance.pdist(whitened, "sqeuclidean"))
    _, labels = connected_components(csr_matrix(d2 <= radius_sq), directed=False)
    return _canonical(labels)


def _cluster_metric(points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    centered = points.copy()
    for label in np.unique(labels):
        members = labels == label
        centered[members] -= points[members].mean(axis=0)
    return _jittered_cov(centered)


def mlfriends_fit(
    points: np.ndarray,
    bootstrap_rounds: int,
    rng: np.random.Generator,
    max_iterations: int = 10,
) -> MLFriendsRegion:
    """Fit the MLFriends region, alternating clustering and metric estimation."""
    points = _as_points(points)
    n, d = points.shape
    if n < 2:
        raise InvalidArgumentException(
            f"MLFriends needs at least 2 points, got {n}", argument="points"
        )
    if bootstrap_rounds < 0:
        raise InvalidArgumentException(
            "bootstrap rounds must be non-negative", argument="bootstrap_rounds"
        )

    metric = _jittered_cov(points)
    labels = np.zeros(n, dtype=int)
    radius_sq = 0.0
    for iteration in range(max(1, max_iterations)):
        whitened = _whiten(_cholesky(metric, "MLFriends metric"), points)
        radius_sq = _bootstrap_radius_sq(whitened, bootstrap_rounds, rng)
        new_labels = _clusters(whitened, radius_sq)
        converged = np.array_equal(new_labels, labels)
        labels = new_labels
        if converged or iteration == max_iterations - 1:
            break
        try:
            metric = _cluster_metric(points, labels)
        except DegenerateGeometryException:
            # singleton clusters carry no spread; keep the last consistent metric
            break

    if not radius_sq > 0:
        raise DegenerateGeometryException("live points coincide", n_points=n)
    region = MLFriendsRegion(points.copy(), metric, radius_sq, labels)
    logger.debug(
        f"MLFriends fit on {n} points: {region.n_clusters} clusters, "
        f"radius^2 {radius_sq:.4g}"
    )
    return region


def region_contains(region: Region, point: np.ndarray) -> bool:
    point = np.asarray(point, dtype=float)
    if point.shape != (region.dimension,):
        raise InvalidArgumentException(
            f"point has shape {point.shape}, region is {region.dimension}-d",
            argument="point",
        )
    return region.contains(point)
