#!/usr/bin/env python3
"""
Tests for run directories: outputs, checkpoint resume, merge and offline diagnosis.
"""

import logging
import math

import pytest

from nestkit.exceptions import (
    InvalidArgumentException,
    NotFoundException,
    ParseException,
)
from nestkit.runner import (
    NestedRun,
    RunPaths,
    diagnose_run,
    merge_runs,
    read_checkpoint,
    read_manifest,
    read_results,
)
from nestkit.schema import AgentPolicy, RunManifest, SamplerKind


def gaussian_manifest(seed=3, n_live=50, sigma=0.2):
    return RunManifest(
        problem="gaussian",
        problem_params={"d": 2, "sigma": sigma},
        sampler=SamplerKind.MLFRIENDS,
        agent=AgentPolicy(n_live=n_live),
        seed=seed,
        bootstrap_rounds=10,
    )


def run_to(directory, config, **kwargs):
    with NestedRun(gaussian_manifest(**kwargs), directory, config) as run:
        return run.execute()


def test_run_writes_outputs(tmp_path, quick_config):
    outcome = run_to(tmp_path / "run", quick_config)
    paths = RunPaths(tmp_path / "run")
    for path in (
        paths.manifest,
        paths.tree,
        paths.checkpoint,
        paths.dead_points,
        paths.posterior,
        paths.posterior_equal,
    ):
        assert path.exists(), path

    results = read_results(paths.results)
    assert float(results["log_evidence"]) == outcome.summary.log_evidence
    assert int(results["iterations"]) == outcome.summary.iterations
    assert results["termination_reason"] == outcome.summary.termination_reason
    assert outcome.summary.log_evidence_uncertainty > 0.0

    assert read_manifest(paths.manifest) == gaussian_manifest()
    equal_lines = paths.posterior_equal.read_text().splitlines()
    assert equal_lines[1] == "p0\tp1"
    assert len(equal_lines) - 2 >= int(outcome.summary.effective_sample_size)


def test_read_results_rejects_foreign_files(tmp_path):
    path = tmp_path / "results.txt"
    path.write_text("log_evidence=1.0\n")
    with pytest.raises(ParseException):
        read_results(path)


def test_resume_reproduces_uninterrupted_run(tmp_path, quick_config):
    """A run cut off mid-record and resumed writes the dead points of a whole run."""
    whole = run_to(tmp_path / "whole", quick_config)
    run_to(tmp_path / "cut", quick_config)

    paths = RunPaths(tmp_path / "cut")
    checkpoint = read_checkpoint(paths.checkpoint)
    lines = paths.tree.read_text().splitlines(keepends=True)
    # header and root record come first
    cut = 2 + checkpoint.node_count
    partial = lines[cut][:10] if cut < len(lines) else ""
    kept = lines[:cut]
    paths.tree.write_text("".join(kept) + partial)
    paths.dead_points.unlink()
    paths.results.unlink()

    with NestedRun.resume(paths.root, quick_config) as run:
        assert run.tree.non_root_count == checkpoint.node_count
        resumed = run.execute()

    assert resumed.summary.log_evidence == whole.summary.log_evidence
    assert resumed.summary.iterations == whole.summary.iterations
    assert (
        resumed.summary.log_evidence_uncertainty
        == whole.summary.log_evidence_uncertainty
    )
    whole_paths = RunPaths(tmp_path / "whole")
    assert paths.dead_points.read_bytes() == whole_paths.dead_points.read_bytes()
    assert paths.posterior.read_bytes() == whole_paths.posterior.read_bytes()


def test_resume_without_checkpoint_starts_over(tmp_path, quick_config, caplog):
    run_to(tmp_path / "run", quick_config, n_live=20)
    paths = RunPaths(tmp_path / "run")
    paths.checkpoint.unlink()
    with caplog.at_level(logging.WARNING, logger="nestkit.runner"):
        run = NestedRun.resume(paths.root, quick_config)
    run.close()
    assert run.tree is None
    assert "No checkpoint" in caplog.text


def test_resume_needs_a_run_directory(tmp_path, quick_config):
    with pytest.raises(NotFoundException):
        NestedRun.resume(tmp_path / "nothing", quick_config)


def test_merge_of_one_run_keeps_the_estimate(tmp_path, quick_config):
    single = run_to(tmp_path / "a", quick_config)
    merged = merge_runs([tmp_path / "a"], tmp_path / "merged", quick_config)
    assert merged.summary.log_evidence == pytest.approx(
        single.summary.log_evidence, abs=1e-12
    )
    assert RunPaths(tmp_path / "merged").tree.exists()
    assert merged.summary.between_run_spread is None


def test_merge_of_two_runs(tmp_path, quick_config):
    a = run_to(tmp_path / "a", quick_config, seed=1)
    b = run_to(tmp_path / "b", quick_config, seed=2)
    merged = merge_runs([tmp_path / "a", tmp_path / "b"], tmp_path / "ab", quick_config)
    assert merged.summary.iterations == a.summary.iterations + b.summary.iterations
    low = min(a.summary.log_evidence, b.summary.log_evidence) - 0.5
    high = max(a.summary.log_evidence, b.summary.log_evidence) + 0.5
    assert low < merged.summary.log_evidence < high
    assert merged.summary.effective_sample_size > max(
        a.summary.effective_sample_size, b.summary.effective_sample_size
    )
    spread = abs(a.summary.log_evidence - b.summary.log_evidence) / math.sqrt(2.0)
    assert merged.summary.between_run_spread == pytest.approx(spread, rel=1e-9)
    stored = read_results(RunPaths(tmp_path / "ab").results)["between_run_spread"]
    assert stored == repr(merged.summary.between_run_spread)


def test_merge_refuses_different_problems(tmp_path, quick_config):
    run_to(tmp_path / "a", quick_config, n_live=20)
    run_to(tmp_path / "b", quick_config, n_live=20, sigma=0.3)
    with pytest.raises(InvalidArgumentException):
        merge_runs([tmp_path / "a", tmp_path / "b"], tmp_path / "ab", quick_config)
    with pytest.raises(InvalidArgumentException):
        merge_runs([], tmp_path / "none", quick_config)


def test_diagnose_run(tmp_path, quick_config):
    outcome = run_to(tmp_path / "run", quick_config)
    report = diagnose_run(tmp_path / "run", fold_posteriors=3, config=quick_config)
    assert report.iterations == outcome.summary.iterations
    assert report.insertions > 0
    assert report.u_test_z == pytest.approx(outcome.summary.u_test_z)
    assert report.ks_pvalue is not None and 0.0 <= report.ks_pvalue <= 1.0
    assert len(report.fold_log_evidences) == 3
    assert RunPaths(tmp_path / "run").fold_posterior(2).exists()
    assert report.lines()[0] == f"iterations={outcome.summary.iterations}"
