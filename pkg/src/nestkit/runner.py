"""Run orchestration: output directories, checkpoints, resume and merge.

A run directory holds the manifest, the append-written tree, a checkpoint
refreshed whenever the sampler is about to refit, and the result tables
written once the run completes.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO, Union

import numpy as np

from .agents import ConstantNAgent, RoundRecord, run_dynamic
from .config import NestkitConfig, get_config, make_rng
from .diagnostics import InsertionOrderMonitor, ks_test, replay_monitor
from .exceptions import (
    InvalidArgumentException,
    InvalidStateException,
    NotFoundException,
    ParseException,
)
from .integrator import (
    RunResult,
    estimate_uncertainty,
    fold_results,
    integrate,
    read_dead_point_log,
    resample_equal_weight,
    write_dead_point_log,
)
from .problems import Problem, get_problem
from .samplers import create_sampler
from .samplers.base import LRPSampler
from .schema import FORMAT_VERSION, RunCheckpoint, RunManifest, RunSummary
from .tree import (
    ExplorationTree,
    TreeFileWriter,
    create_tree,
    merge_trees,
    read_tree,
    write_tree,
)

logger = logging.getLogger(__name__)

RESULTS_MAGIC = "# nestkit-results"
POSTERIOR_MAGIC = "# nestkit-posterior"
EQUAL_WEIGHT_MAGIC = "# nestkit-posterior-equal"
EQUAL_WEIGHT_STREAM = 1
MERGE_SPREAD_SIGMAS = 5.0


@dataclass(frozen=True)
class RunPaths:
    """File layout of one run directory."""
    root: Path

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def tree(self) -> Path:
        return self.root / "tree.nstree"

    @property
    def checkpoint(self) -> Path:
        return self.root / "checkpoint.json"

    @property
    def dead_points(self) -> Path:
        return self.root / "deadpoints.tsv"

    @property
    def posterior(self) -> Path:
        return self.root / "posterior.tsv"

    @property
    def posterior_equal(self) -> Path:
        return self.root / "posterior_equal.tsv"

    @property
    def results(self) -> Path:
        return self.root / "results.txt"

    def fold_posterior(self, k: int) -> Path:
        return self.root / f"posterior_fold{k}.tsv"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_manifest(path: Path, manifest: RunManifest) -> None:
    _atomic_write(path, manifest.model_dump_json(indent=2) + "\n")


def read_manifest(path: Union[str, Path]) -> RunManifest:
    path = Path(path)
    if not path.exists():
        raise NotFoundException("manifest", str(path))
    raw = json.loads(path.read_text(encoding="utf-8"))
    if raw.get("format_version") != FORMAT_VERSION:
        raise ParseException(
            f"unsupported manifest version {raw.get('format_version')!r}", line=1
        )
    return RunManifest.model_validate(raw)


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def _rng_state(value: Any) -> Any:
    if isinstance(value, list):
        return np.asarray(value, dtype=np.uint64)
    if isinstance(value, dict):
        return {k: _rng_state(v) for k, v in value.items()}
    return value


def write_checkpoint(path: Path, checkpoint: RunCheckpoint) -> None:
    _atomic_write(path, checkpoint.model_dump_json() + "\n")


def read_checkpoint(path: Union[str, Path]) -> RunCheckpoint:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if raw.get("format_version") != FORMAT_VERSION:
        raise ParseException(
            f"unsupported checkpoint version {raw.get('format_version')!r}", line=1
        )
    return RunCheckpoint.model_validate(raw)


def _columns(prefix: str, d: int) -> List[str]:
    return [f"{prefix}{i}" for i in range(d)]


def write_posterior(stream: TextIO, result: RunResult) -> None:
    """Weighted posterior: one row per dead point."""
    d_unit = result.samples_unit.shape[1]
    d_phys = result.samples_physical.shape[1]
    stream.write(f"{POSTERIOR_MAGIC} version={FORMAT_VERSION}\n")
    columns = ["node_id", "weight", "log_likelihood"]
    columns += _columns("u", d_unit) + _columns("p", d_phys)
    stream.write("\t".join(columns) + "\n")
    for i in range(len(result.weights)):
        values = [
            str(int(result.node_ids[i])),
            repr(float(result.weights[i])),
            repr(float(result.log_likelihoods[i])),
        ]
        values += [repr(float(v)) for v in result.samples_unit[i]]
        values += [repr(float(v)) for v in result.samples_physical[i]]
        stream.write("\t".join(values) + "\n")


def write_equal_weight(stream: TextIO, samples: np.ndarray) -> None:
    stream.write(f"{EQUAL_WEIGHT_MAGIC} version={FORMAT_VERSION}\n")
    stream.write("\t".join(_columns("p", samples.shape[1])) + "\n")
    for row in samples:
        stream.write("\t".join(repr(float(v)) for v in row) + "\n")


def format_results(summary: RunSummary) -> str:
    """key=value lines; lists are comma-separated, dicts are flattened with dots."""
    lines = [f"{RESULTS_MAGIC} version={summary.format_version}"]
    for key, value in summary.model_dump(exclude={"format_version"}).items():
        if isinstance(value, dict):
            lines.extend(f"{key}.{k}={v!r}" for k, v in sorted(value.items()))
        elif isinstance(value, list):
            lines.append(f"{key}={','.join(repr(v) for v in value)}")
        else:
            lines.append(
                f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}"
            )
    return "\n".join(lines) + "\n"


def read_results(path: Union[str, Path]) -> Dict[str, str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"{RESULTS_MAGIC} version={FORMAT_VERSION}":
        raise ParseException("missing or unsupported nestkit-results header", line=1)
    values = {}
    for line_no, line in enumerate(lines[1:], start=2):
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseException("expected key=value", line=line_no)
        values[key] = value
    return values


@dataclass
class RunOutcome:
    """What a finished run, resume or merge produced."""
    summary: RunSummary
    result: RunResult
    rounds: List[RoundRecord] = field(default_factory=list)
    monitor: Optional[InsertionOrderMonitor] = None


def write_outputs(
    paths: RunPaths,
    result: RunResult,
    summary: RunSummary,
    seed: int,
) -> None:
    with open(paths.dead_points, "w", encoding="utf-8") as stream:
        write_dead_point_log(result.state, stream)
    with open(paths.posterior, "w", encoding="utf-8") as stream:
        write_posterior(stream, result)
    count = max(1, int(math.ceil(result.effective_sample_size)))
    equal = resample_equal_weight(result, count, make_rng(seed, EQUAL_WEIGHT_STREAM))
    with open(paths.posterior_equal, "w", encoding="utf-8") as stream:
        write_equal_weight(stream, equal)
    _atomic_write(paths.results, format_results(summary))
    logger.info(f"Wrote results to {paths.root}")


def _uncertainty(
    tree: ExplorationTree, result: RunResult, config: NestkitConfig, seed: int
) -> float:
    n_root = len(tree.root_children())
    folds = min(config.uncertainty_folds, n_root)
    if folds < 2:
        return result.log_evidence_uncertainty
    return estimate_uncertainty(
        tree,
        folds=folds,
        resamples=config.uncertainty_resamples,
        seed=seed,
        jobs=config.jobs,
    )


class NestedRun:
    """A nested sampling run bound to an output directory."""

    def __init__(
        self,
        manifest: RunManifest,
        output_dir: Union[str, Path],
        config: Optional[NestkitConfig] = None,
        problem: Optional[Problem] = None,
    ):
        self.manifest = manifest
        self.paths = RunPaths(Path(output_dir))
        self.config = config or get_config()
        self.problem = problem or get_problem(
            manifest.problem, **manifest.problem_params
        )
        settings = replace(
            self.config.sampler, bootstrap_rounds=manifest.bootstrap_rounds
        )
        self.sampler: LRPSampler = create_sampler(
            manifest.sampler, manifest.step, settings
        )
        self.rng = make_rng(manifest.seed)
        self.tree: Optional[ExplorationTree] = None
        self._writer: Optional[TreeFileWriter] = None

    @classmethod
    def resume(
        cls, output_dir: Union[str, Path], config: Optional[NestkitConfig] = None
    ) -> "NestedRun":
        """Reload a run directory at its last checkpoint."""
        paths = RunPaths(Path(output_dir))
        run = cls(read_manifest(paths.manifest), paths.root, config)
        if not paths.tree.exists():
            raise NotFoundException("tree file", str(paths.tree))
        if not paths.checkpoint.exists():
            logger.warning(f"No checkpoint in {paths.root}; starting the run over")
            return run

        checkpoint = read_checkpoint(paths.checkpoint)
        tree = read_tree(paths.tree, allow_truncated=True)
        if tree.non_root_count < checkpoint.node_count:
            raise InvalidStateException(
                f"tree file holds {tree.non_root_count} nodes, "
                f"checkpoint expects {checkpoint.node_count}"
            )
        run.tree = tree.truncated(checkpoint.node_count)
        run.rng.bit_generator.state = _rng_state(checkpoint.rng_state)
        run.sampler.load_state_dict(checkpoint.sampler_state)
        logger.info(
            f"Resuming {paths.root} at iteration {checkpoint.iteration} "
            f"({checkpoint.node_count} nodes)"
        )
        return run

    def _write_checkpoint(self, iteration: int) -> None:
        assert self.tree is not None
        if self._writer is not None:
            self._writer.flush()
        checkpoint = RunCheckpoint(
            node_count=self.tree.non_root_count,
            iteration=iteration,
            rng_state=_jsonable(self.rng.bit_generator.state),
            sampler_state=self.sampler.state_dict(),
        )
        write_checkpoint(self.paths.checkpoint, checkpoint)

    def _monitor(self) -> InsertionOrderMonitor:
        settings = self.config.diagnostics
        return InsertionOrderMonitor(
            window=settings.rolling_window,
            segment_threshold=settings.segment_threshold,
            detection_threshold=settings.detection_threshold,
        )

    def execute(self) -> RunOutcome:
        """Run (or continue) the base run, then any dynamic rounds; write outputs."""
        self.paths.root.mkdir(parents=True, exist_ok=True)
        write_manifest(self.paths.manifest, self.manifest)
        if self.tree is None:
            self.tree = create_tree(self.problem.dimension)
        self._writer = TreeFileWriter(self.paths.tree, self.tree)
        logger.info(
            f"Starting {self.manifest.sampler.value} run on {self.problem.name} "
            f"(d={self.problem.dimension}, N={self.manifest.agent.n_live}, "
            f"seed={self.manifest.seed})"
        )
        try:
            monitor = self._monitor()
            agent = ConstantNAgent(
                self.problem,
                self.sampler,
                self.rng,
                self.manifest.agent.n_live,
                self.manifest.termination,
                monitor=monitor,
                checkpoint=self._write_checkpoint,
            )
            result = integrate(
                self.tree, self.manifest.estimator, agent=agent, monitor=monitor
            )
            prior_draws = len(self.tree.root_children())

            dynamic = run_dynamic(
                self.tree,
                result,
                self.manifest.agent,
                self.problem,
                self.sampler,
                self.rng,
                estimator=self.manifest.estimator,
                termination=self.manifest.termination,
            )
            if dynamic.rounds:
                if dynamic.floor:
                    prior_draws = len(self.tree.root_children())
                monitor = self._monitor()
                result = integrate(self.tree, self.manifest.estimator, monitor=monitor)
        finally:
            self._writer.close()
            self._writer = None

        sigma = _uncertainty(self.tree, result, self.config, self.manifest.seed)
        result.log_evidence_uncertainty = sigma
        reason = agent.termination_reason
        summary = result.summary(
            likelihood_evaluations=prior_draws + self.sampler.evaluations,
            termination_reason=reason.value if reason else None,
            sampler_stats=self.sampler.stats(),
            **monitor.summary(),
        )
        write_outputs(self.paths, result, summary, self.manifest.seed)
        logger.info(
            f"logZ = {summary.log_evidence:.4f} "
            f"+- {summary.log_evidence_uncertainty:.4f}, "
            f"H = {summary.information_gain:.3f}, "
            f"ESS = {summary.effective_sample_size:.1f}"
        )
        return RunOutcome(summary, result, dynamic.rounds, monitor)

    def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
            self._writer = None
        self.problem.close()

    def __enter__(self) -> "NestedRun":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def _same_problem(a: RunManifest, b: RunManifest) -> bool:
    return a.problem == b.problem and a.problem_params == b.problem_params


def merge_runs(
    run_dirs: Sequence[Union[str, Path]],
    output_dir: Union[str, Path],
    config: Optional[NestkitConfig] = None,
) -> RunOutcome:
    """Merge completed runs of the same problem by merging their roots."""
    if not run_dirs:
        raise InvalidArgumentException(
            "need at least one run to merge", argument="runs"
        )
    config = config or get_config()
    manifests = [read_manifest(RunPaths(Path(d)).manifest) for d in run_dirs]
    for directory, manifest in zip(run_dirs[1:], manifests[1:]):
        if not _same_problem(manifests[0], manifest):
            raise InvalidArgumentException(
                f"{directory} ran {manifest.problem} {manifest.problem_params}, "
                f"expected {manifests[0].problem} {manifests[0].problem_params}",
                argument="runs",
            )

    trees = [read_tree(RunPaths(Path(d)).tree) for d in run_dirs]
    singles = [integrate(tree, manifests[0].estimator) for tree in trees]
    for i in range(len(singles)):
        for j in range(i + 1, len(singles)):
            a, b = singles[i], singles[j]
            spread = math.hypot(a.log_evidence_uncertainty, b.log_evidence_uncertainty)
            if abs(a.log_evidence - b.log_evidence) > MERGE_SPREAD_SIGMAS * spread:
                logger.warning(
                    f"Runs {run_dirs[i]} and {run_dirs[j]} disagree: "
                    f"logZ {a.log_evidence:.4f} vs {b.log_evidence:.4f} "
                    f"(more than {MERGE_SPREAD_SIGMAS:g} sigma apart)"
                )
    values = np.array([r.log_evidence for r in singles])
    between = float(np.std(values, ddof=1)) if len(values) > 1 else None
    if between is not None:
        logger.info(f"Between-run spread of logZ: {between:.4f}")

    merged = merge_trees(trees)
    paths = RunPaths(Path(output_dir))
    paths.root.mkdir(parents=True, exist_ok=True)
    write_manifest(paths.manifest, manifests[0])
    write_tree(paths.tree, merged)

    monitor = InsertionOrderMonitor(window=config.diagnostics.rolling_window)
    result = integrate(merged, manifests[0].estimator, monitor=monitor)
    result.log_evidence_uncertainty = _uncertainty(
        merged, result, config, manifests[0].seed
    )
    summary = result.summary(between_run_spread=between, **monitor.summary())
    write_outputs(paths, result, summary, manifests[0].seed)
    return RunOutcome(summary, result, monitor=monitor)


@dataclass
class DiagnosisReport:
    """Offline insertion-order tests of a finished run."""
    iterations: int
    insertions: int
    u_test_z: Optional[float]
    segments: List[int]
    segments_flagged: bool
    chunks_rejected: int
    ks_pvalue: Optional[float]
    fold_log_evidences: List[float] = field(default_factory=list)
    z_trace: List[float] = field(default_factory=list, repr=False)

    def lines(self) -> List[str]:
        out = [
            f"iterations={self.iterations}",
            f"insertions={self.insertions}",
            f"u_test_z={self.u_test_z!r}",
            f"segments={','.join(str(s) for s in self.segments)}",
            f"segments_flagged={self.segments_flagged}",
            f"u_test_chunks_rejected={self.chunks_rejected}",
            f"ks_pvalue={self.ks_pvalue!r}",
        ]
        if self.fold_log_evidences:
            folds = ",".join(repr(v) for v in self.fold_log_evidences)
            out.append(f"fold_log_evidences={folds}")
        return out


def diagnose_run(
    run_dir: Union[str, Path],
    fold_posteriors: Optional[int] = None,
    config: Optional[NestkitConfig] = None,
) -> DiagnosisReport:
    """Replay the insertion-order tests from a dead-point log."""
    config = config or get_config()
    paths = RunPaths(Path(run_dir))
    if not paths.dead_points.exists():
        raise NotFoundException("dead-point log", str(paths.dead_points))
    dead = read_dead_point_log(paths.dead_points)
    records = [
        (p.insertion_order, p.insertion_n) for p in dead if p.insertion_order >= 0
    ]
    window = config.diagnostics.rolling_window
    monitor = replay_monitor(records, window=window)  # type: ignore[arg-type]
    summary = monitor.summary()

    ks_pvalue = None
    if len(monitor.records) >= 5 and len({r.live_count for r in monitor.records}) == 1:
        ks_pvalue = ks_test(monitor.records)

    report = DiagnosisReport(
        iterations=len(dead),
        insertions=len(monitor.records),
        u_test_z=summary["u_test_z"],  # type: ignore[arg-type]
        segments=list(monitor.segments),
        segments_flagged=bool(summary["segments_flagged"]),
        chunks_rejected=int(
            summary["u_test_chunks_rejected"]  # type: ignore[arg-type]
        ),
        ks_pvalue=ks_pvalue,
        z_trace=list(monitor.z_trace),
    )

    if fold_posteriors is not None:
        manifest = read_manifest(paths.manifest)
        tree = read_tree(paths.tree)
        for k, result in enumerate(
            fold_results(tree, fold_posteriors, seed=manifest.seed)
        ):
            with open(paths.fold_posterior(k), "w", encoding="utf-8") as stream:
                write_posterior(stream, result)
            report.fold_log_evidences.append(result.log_evidence)
    return report
