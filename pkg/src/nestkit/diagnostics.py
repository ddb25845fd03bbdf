"""Correctness diagnostics for likelihood-restricted samplers.

Inside-out: new points must slot into the sorted live points at a uniformly
distributed insertion order. The U test turns the running rank sum into a
standard normal z score that stays valid when the number of live points
changes. Outside-in: on problems with a known volume-at-likelihood, the
per-iteration shrinkage must follow Beta(N, 1).
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import (
    TYPE_CHECKING,
    Deque,
    Dict,
    Iterable,
    List,
    NamedTuple,
    Optional,
    Sequence,
)

import numpy as np
from scipy import stats

from .exceptions import InvalidArgumentException, InvalidStateException

if TYPE_CHECKING:
    from .problems import Problem
    from .samplers.base import LRPSampler

logger = logging.getLogger(__name__)

SEGMENT_MIN_LENGTH = 10**5.5


class InsertionRecord(NamedTuple):
    """Insertion order O of a new point among N live points."""
    order: int
    live_count: int


@dataclass
class UTestAccumulator:
    """Running sum of (2 O + 1) / N over recorded insertions."""
    window: Optional[int] = None
    sum_term: float = 0.0
    count_n1: int = 0
    _terms: Deque[float] = field(default_factory=deque, repr=False)

    def __post_init__(self) -> None:
        if self.window is not None and self.window < 1:
            raise InvalidArgumentException("window must be positive", argument="window")

    def record_insertion(self, order: int, live_count: int) -> "UTestAccumulator":
        if live_count < 1 or not 0 <= order < live_count:
            raise InvalidArgumentException(
                f"insertion order {order} outside 0..{live_count - 1}", argument="O"
            )
        term = (2 * order + 1) / live_count
        self.sum_term += term
        self.count_n1 += 1
        if self.window is not None:
            self._terms.append(term)
            if len(self._terms) > self.window:
                self.sum_term -= self._terms.popleft()
                self.count_n1 -= 1
        return self

    def z_score(self) -> float:
        if self.count_n1 < 1:
            raise InvalidStateException("z score needs at least one insertion")
        return (self.sum_term - self.count_n1) / math.sqrt(self.count_n1 / 3.0)

    def reset(self) -> None:
        self.sum_term = 0.0
        self.count_n1 = 0
        self._terms.clear()


def record_insertion(
    acc: UTestAccumulator, order: int, live_count: int
) -> UTestAccumulator:
    return acc.record_insertion(order, live_count)


def z_score(acc: UTestAccumulator) -> float:
    return acc.z_score()


def ks_test(records: Sequence[InsertionRecord]) -> float:
    """Two-sided KS p-value of O/N against the uniform distribution.

    Only valid at constant N. The orders are integers, so O/N is not exactly
    continuous-uniform; the test is slightly conservative because of it.
    """
    if len(records) < 5:
        raise InvalidArgumentException(
            "KS test needs at least 5 records", argument="orders"
        )
    counts = {r.live_count for r in records}
    if len(counts) != 1:
        raise InvalidArgumentException(
            "KS test requires a constant live point count", argument="orders"
        )
    n = counts.pop()
    values = np.array([r.order for r in records], dtype=float) / n
    return float(stats.kstest(values, "uniform").pvalue)


def run_segment_monitor(
    threshold_z: float, records: Iterable[InsertionRecord]
) -> List[int]:
    """Lengths of the segments ended by |z| exceeding ``threshold_z``."""
    if threshold_z <= 0:
        raise InvalidArgumentException(
            "threshold must be positive", argument="threshold_z"
        )
    acc = UTestAccumulator()
    segments = []
    for order, live_count in records:
        acc.record_insertion(order, live_count)
        if abs(acc.z_score()) > threshold_z:
            segments.append(acc.count_n1)
            acc.reset()
    return segments


def segment_bias_flag(
    n_segments: int, iterations: int, min_length: float = SEGMENT_MIN_LENGTH
) -> bool:
    """Unbiased samplers at threshold 4 produce segments no shorter than 10^5.5."""
    return n_segments > iterations / min_length


@dataclass
class ChunkTest:
    """U test per block of N insertions, Bonferroni-corrected over blocks."""
    alpha: float = 0.0027
    chunk_z: List[float] = field(default_factory=list)
    _acc: UTestAccumulator = field(default_factory=UTestAccumulator, repr=False)
    _size: int = 0

    def record(self, order: int, live_count: int) -> None:
        if self._acc.count_n1 == 0:
            self._size = live_count
        self._acc.record_insertion(order, live_count)
        if self._acc.count_n1 >= self._size:
            self.chunk_z.append(self._acc.z_score())
            self._acc.reset()

    def rejected(self) -> int:
        if not self.chunk_z:
            return 0
        p = 2.0 * stats.norm.sf(np.abs(self.chunk_z))
        return int(np.sum(p < self.alpha / len(self.chunk_z)))


class InsertionOrderMonitor:
    """On-line insertion-order tests for one run.

    Keeps a full-run U test, a rolling-window U test, the Bonferroni chunk
    test, the segment monitor and the plateau warning counter.
    """

    def __init__(
        self,
        window: int = 1000,
        segment_threshold: float = 4.0,
        detection_threshold: float = 3.0,
    ):
        self.full = UTestAccumulator()
        self.rolling = UTestAccumulator(window=window)
        self.chunks = ChunkTest()
        self.segment_threshold = segment_threshold
        self.detection_threshold = detection_threshold
        self.segments: List[int] = []
        self.z_trace: List[float] = []
        self.records: List[InsertionRecord] = []
        self.plateau_warnings = 0
        self._segment = UTestAccumulator()
        self._rolling_alarm = False

    def record(self, order: int, live_count: int) -> None:
        self.records.append(InsertionRecord(order, live_count))
        self.full.record_insertion(order, live_count)
        self.rolling.record_insertion(order, live_count)
        self.chunks.record(order, live_count)
        z = self.rolling.z_score()
        self.z_trace.append(z)
        alarm = abs(z) > self.detection_threshold
        if alarm and not self._rolling_alarm:
            logger.warning(
                f"Rolling insertion-order z={z:.2f} "
                f"over the last {self.rolling.count_n1} records"
            )
        self._rolling_alarm = alarm

        self._segment.record_insertion(order, live_count)
        if abs(self._segment.z_score()) > self.segment_threshold:
            self.segments.append(self._segment.count_n1)
            logger.warning(
                f"Insertion-order segment of {self._segment.count_n1} records ended "
                f"with |z| > {self.segment_threshold}"
            )
            self._segment.reset()

    def warn_plateau(self, node_ids: Iterable[int], log_likelihood: float) -> None:
        ids = sorted(node_ids)
        self.plateau_warnings += 1
        logger.warning(
            f"{len(ids)} live points share logL={log_likelihood!r}: {ids[:10]}"
        )

    @property
    def biased(self) -> bool:
        if self.full.count_n1 == 0:
            return False
        return abs(self.full.z_score()) > self.detection_threshold

    def summary(self) -> Dict[str, object]:
        count = self.full.count_n1
        return {
            "u_test_z": self.full.z_score() if count else None,
            "u_test_z_rolling": self.z_trace[-1] if self.z_trace else None,
            "u_test_chunks_rejected": self.chunks.rejected(),
            "segments": list(self.segments),
            "segments_flagged": (
                segment_bias_flag(len(self.segments), count) if count else False
            ),
            "plateau_warnings": self.plateau_warnings,
        }


def replay_monitor(
    records: Iterable[InsertionRecord], window: int = 1000
) -> InsertionOrderMonitor:
    """Rebuild the on-line monitor from a dead-point log's insertion columns."""
    monitor = InsertionOrderMonitor(window=window)
    for order, live_count in records:
        if order >= 0:
            monitor.record(order, live_count)
    return monitor


@dataclass
class ShrinkageTestReport:
    """Observed mean shrinkage against the Beta(N, 1) expectation."""
    n_live: int
    iterations: int
    n_ratios: int
    mean_shrinkage: float
    expected_shrinkage: float
    z: float
    likelihood_evaluations: int

    @property
    def biased(self) -> bool:
        return abs(self.z) > 3.0


def shrinkage_test(
    lrps: "LRPSampler",
    problem: "Problem",
    n_live: int,
    iterations: int,
    rng: np.random.Generator,
) -> ShrinkageTestReport:
    """Run plain nested sampling with ``lrps`` and test X(L_{i+1}) / X(L_i)."""
    if problem.log_volume_at is None:
        raise InvalidArgumentException(
            f"problem {problem.name} has no analytic volume-at-likelihood",
            argument="problem",
        )
    if n_live < 1 or iterations < 2:
        raise InvalidArgumentException(
            "need N >= 1 and at least 2 iterations", argument="N"
        )

    live_u = rng.random((n_live, problem.dimension))
    live_log_l = np.array([problem.evaluate(u)[1] for u in live_u])
    evaluations = n_live
    log_volumes = []
    for it in range(iterations):
        worst = int(np.argmin(live_log_l))
        threshold = float(live_log_l[worst])
        log_volumes.append(problem.log_volume_at(threshold))
        others = np.delete(live_u, worst, axis=0)
        draw = lrps.sample(problem, threshold, others, rng, iteration=it)
        evaluations += draw.evaluations
        live_u[worst] = draw.u
        live_log_l[worst] = draw.log_likelihood

    log_x = np.asarray(log_volumes)
    ratios = np.exp(np.diff(log_x))
    ratios = ratios[np.isfinite(ratios)]
    expected = n_live / (n_live + 1.0)
    sd = math.sqrt(n_live / ((n_live + 1.0) ** 2 * (n_live + 2.0)))
    mean = float(np.mean(ratios))
    z = (mean - expected) / (sd / math.sqrt(len(ratios)))
    report = ShrinkageTestReport(
        n_live, iterations, len(ratios), mean, expected, z, evaluations
    )
    level = logging.WARNING if report.biased else logging.INFO
    logger.log(
        level,
        f"Shrinkage test {lrps.name} on {problem.name}: "
        f"mean {mean:.5f} vs {expected:.5f}, z={z:.2f}",
    )
    return report
