#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gumbel采样测试
"""

import numpy as np
import pytest
from scipy.special import softmax

from app.errors import ConfigError, InvalidInputError
from app.grid import CategoricalField, GridSpec
from app.sampling import (
    GumbelRaoConfig,
    conditional_gumbel_draw,
    gumbel_max_sample,
    gumbel_rao_gradient,
    posterior_logits,
    softmax_jacobian_vector,
    st_gs_gradient,
    stochastic_reconstruction,
)

LOGITS = np.log(np.array([0.2, 0.5, 0.3]))


def test_config_validation():
    with pytest.raises(ConfigError):
        GumbelRaoConfig(tau=0.0)
    with pytest.raises(ConfigError):
        GumbelRaoConfig(samples=0)
    assert GumbelRaoConfig().tau == 1.0


def test_softmax_jacobian_vector_matches_dense_jacobian():
    rng = np.random.default_rng(0)
    tau = 0.7
    y = softmax(rng.normal(size=4) / tau)
    f = rng.normal(size=4)
    jacobian = (np.diag(y) - np.outer(y, y)) / tau
    assert np.allclose(softmax_jacobian_vector(y, f, tau), jacobian @ f)


def test_gumbel_max_frequencies_follow_softmax():
    logits = np.broadcast_to(LOGITS, (20000, 3))
    samples = gumbel_max_sample(logits, seed=1)
    assert np.all(samples.sum(axis=-1) == 1)
    assert np.allclose(samples.mean(axis=0), [0.2, 0.5, 0.3], atol=0.015)


def test_logits_validation():
    with pytest.raises(InvalidInputError):
        gumbel_max_sample(np.array([1.0]))
    with pytest.raises(InvalidInputError):
        gumbel_max_sample(np.array([0.0, np.inf]))
    with pytest.raises(InvalidInputError):
        st_gs_gradient(np.ones(3), LOGITS, tau=0.0)


def test_conditional_draw_respects_realized_class():
    logits = np.broadcast_to(LOGITS, (5000, 3))
    realized = gumbel_max_sample(logits, seed=2)
    draws = conditional_gumbel_draw(logits, realized, seed=3)
    assert np.array_equal(np.argmax(draws, axis=-1), np.argmax(realized, axis=-1))
    with pytest.raises(InvalidInputError):
        conditional_gumbel_draw(LOGITS, np.array([0.5, 0.5, 0.0]))
    with pytest.raises(InvalidInputError):
        conditional_gumbel_draw(LOGITS, np.array([1.0, 0.0]))


def test_conditional_draw_top_value_distribution():
    """条件最大值 G_k 服从 Gumbel(logsumexp(logits))，与k无关"""
    logits = np.broadcast_to(LOGITS, (40000, 3))
    realized = gumbel_max_sample(logits, seed=4)
    draws = conditional_gumbel_draw(logits, realized, seed=5)
    top = draws.max(axis=-1)
    assert top.mean() == pytest.approx(np.euler_gamma, abs=0.03)
    for k in range(3):
        assert top[realized[:, k] == 1].mean() == pytest.approx(np.euler_gamma, abs=0.05)


def test_st_gs_uses_supplied_noise():
    gumbels = np.array([0.3, -0.1, 0.8])
    f = np.array([1.0, -2.0, 0.5])
    first = st_gs_gradient(f, LOGITS, 0.5, gumbels=gumbels)
    second = st_gs_gradient(f, LOGITS, 0.5, gumbels=gumbels)
    assert np.array_equal(first, second)
    y = softmax((gumbels + LOGITS) / 0.5)
    assert np.allclose(first, softmax_jacobian_vector(y, f, 0.5))


def test_gumbel_rao_matches_straight_through_in_expectation():
    """Gumbel-Rao是直通估计的条件期望：均值一致，方差不更大"""
    logits = np.broadcast_to(LOGITS, (80000, 3))
    f = np.array([1.0, -1.0, 0.5])
    rao = gumbel_rao_gradient(f, logits, GumbelRaoConfig(tau=1.0, samples=10, seed=6))
    straight = st_gs_gradient(f, logits, 1.0, seed=7)
    assert np.allclose(rao.mean(axis=0), straight.mean(axis=0), atol=0.01)
    assert np.all(rao.var(axis=0) <= straight.var(axis=0) + 1e-6)


def test_gumbel_rao_approaches_exact_gradient_at_low_temperature():
    """线性目标 f(z) = c·z 的精确梯度为 π ⊙ (c − π·c)"""
    logits = np.array([0.5, -0.3, 0.1])
    c = np.array([1.0, -2.0, 0.5])
    pi = softmax(logits)
    exact = pi * (c - pi @ c)
    batch = np.broadcast_to(logits, (100000, 3))
    rao = gumbel_rao_gradient(c, batch, GumbelRaoConfig(tau=0.25, samples=10, seed=3))
    assert np.linalg.norm(rao.mean(axis=0) - exact) <= 0.05 * np.linalg.norm(exact)
    straight = st_gs_gradient(c, batch[:10000], 0.25, seed=4)
    small = gumbel_rao_gradient(c, batch[:10000], GumbelRaoConfig(tau=0.25, samples=10, seed=5))
    assert np.all(small.var(axis=0) <= straight.var(axis=0))


def test_gumbel_rao_is_deterministic_for_seed():
    cfg = GumbelRaoConfig(samples=3, seed=11)

    def f(z):
        return z * 2.0 - 1.0

    assert np.array_equal(gumbel_rao_gradient(f, LOGITS, cfg), gumbel_rao_gradient(f, LOGITS, cfg))


def test_posterior_logits_and_stochastic_reconstruction():
    grid = GridSpec((6, 6))
    probs = np.zeros((3, 6, 6))
    probs[0] = 0.98
    probs[1:] = 0.01
    posterior = CategoricalField(grid, probs)
    logits = posterior_logits(posterior)
    assert logits.shape == (6, 6, 3)
    levels = np.array([1.0, 5.0, 9.0])
    first = stochastic_reconstruction(posterior, levels, samples=4, seed=0)
    second = stochastic_reconstruction(posterior, levels, samples=4, seed=0)
    assert np.array_equal(first.values, second.values)
    assert np.all((first.values >= 1.0) & (first.values <= 9.0))
    with pytest.raises(InvalidInputError):
        stochastic_reconstruction(posterior, levels[:2], samples=4)
    with pytest.raises(InvalidInputError):
        stochastic_reconstruction(posterior, levels, samples=0)
    hard = np.zeros((2, 6, 6))
    hard[0] = 1.0
    with pytest.raises(InvalidInputError):
        posterior_logits(CategoricalField(grid, hard))
