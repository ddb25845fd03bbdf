#!/usr/bin/env python3
"""
Tests for prior transforms: push-forward distributions and composition.
"""

import numpy as np
import pytest
from scipy import stats

from nestkit.exceptions import InvalidArgumentException
from nestkit.priors import (
    ConditionalBlock,
    compose,
    correlated_gaussian_transform,
    dirichlet_transform,
    distribution_from_mapping,
    identity_transform,
    inverse_cdf_transform,
    log_uniform,
    normal,
    uniform,
)

N_DRAWS = 20000


@pytest.fixture
def unit_draws():
    return np.random.default_rng(2024).random((N_DRAWS, 3))


def test_inverse_cdf_push_forward(unit_draws):
    """Uniform u pushed through each inverse CDF follows the declared law."""
    transform = inverse_cdf_transform(
        [uniform(-2.0, 3.0), normal(1.0, 0.5), log_uniform(1e-3, 10.0)]
    )
    theta = transform(unit_draws)
    assert theta.shape == (N_DRAWS, 3)
    uniform_law = stats.uniform(loc=-2.0, scale=5.0)
    assert stats.kstest(theta[:, 0], uniform_law.cdf).pvalue > 0.001
    assert stats.kstest(theta[:, 1], stats.norm(loc=1.0, scale=0.5).cdf).pvalue > 0.001
    assert stats.kstest(theta[:, 2], stats.loguniform(1e-3, 10.0).cdf).pvalue > 0.001


def test_single_point_transform():
    transform = inverse_cdf_transform([uniform(0.0, 10.0), normal()])
    assert transform([0.5, 0.5]) == pytest.approx([5.0, 0.0])
    assert np.all(np.isfinite(transform([0.0, 1.0])))
    with pytest.raises(InvalidArgumentException):
        transform([0.5])


def test_invalid_distributions():
    with pytest.raises(InvalidArgumentException):
        uniform(1.0, 1.0)
    with pytest.raises(InvalidArgumentException):
        log_uniform(0.0, 1.0)
    with pytest.raises(InvalidArgumentException):
        normal(sigma=-1.0)
    with pytest.raises(InvalidArgumentException):
        distribution_from_mapping({"kind": "cauchy"})


def test_distribution_from_mapping():
    dist = distribution_from_mapping({"kind": "log-uniform", "a": "0.1", "b": "100"})
    assert dist.ppf(np.array([0.5])) == pytest.approx([np.sqrt(10.0)])


def test_correlated_gaussian_covariance():
    cov = [[1.0, 0.8], [0.8, 2.0]]
    transform = correlated_gaussian_transform([1.0, -1.0], cov)
    theta = transform(np.random.default_rng(1).random((N_DRAWS, 2)))
    assert np.allclose(theta.mean(axis=0), [1.0, -1.0], atol=0.05)
    assert np.allclose(np.cov(theta, rowvar=False), cov, atol=0.08)
    assert transform([0.5, 0.5]) == pytest.approx([1.0, -1.0])


def test_correlated_gaussian_rejects_bad_covariance():
    with pytest.raises(InvalidArgumentException):
        correlated_gaussian_transform([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(InvalidArgumentException):
        correlated_gaussian_transform([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(InvalidArgumentException):
        correlated_gaussian_transform([0.0], [[1.0, 0.0], [0.0, 1.0]])


def test_dirichlet_fractions(unit_draws):
    transform = dirichlet_transform(3)
    theta = transform(unit_draws)
    assert np.allclose(theta.sum(axis=1), 1.0)
    assert np.all(theta >= 0.0)
    # flat Dirichlet(1, 1, 1): each marginal is Beta(1, 2)
    assert stats.kstest(theta[:, 0], stats.beta(1, 2).cdf).pvalue > 0.001
    assert transform([0.3, 0.3, 0.3]) == pytest.approx([1 / 3, 1 / 3, 1 / 3])
    with pytest.raises(InvalidArgumentException):
        dirichlet_transform(1)


def test_compose_with_conditional_block():
    """A conditional block sees the parameters produced before it."""
    scale = inverse_cdf_transform([uniform(1.0, 2.0)])
    shifted = ConditionalBlock(
        1, 1, lambda u, previous: previous[..., :1] * u, name="scaled"
    )
    transform = compose([scale, shifted, identity_transform(1)])
    assert transform.dimension_in == 3
    theta = transform(np.array([[0.5, 0.5, 0.25], [1.0, 1.0, 0.0]]))
    assert theta == pytest.approx(np.array([[1.5, 0.75, 0.25], [2.0, 2.0, 0.0]]))
    assert "scaled" in repr(transform)
    with pytest.raises(InvalidArgumentException):
        compose([])
