#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Demons力测试
"""

import numpy as np
import pytest
from scipy import ndimage

from app.errors import ConfigError, GridMismatchError, InvalidInputError
from app.grid import CategoricalField, GridSpec, VectorField
from app.registration import (
    DemonsConfig,
    demons_energy,
    demons_force,
    demons_step,
    estimate_velocity_variance,
    fluid_smooth,
)
from app.registration.demons import matching_energy


def _sigmoid_pair(shape=(32, 8), shift: float = 1.0, width: float = 2.0):
    """二类sigmoid边缘：moving(x) = fixed(x − shift)"""
    grid = GridSpec(shape)
    x = np.indices(shape)[0].astype(np.float64)
    centre = (shape[0] - 1) / 2.0

    def field(offset):
        p = 1.0 / (1.0 + np.exp(-(x - centre - offset) / width))
        p = 0.98 * p + 0.01
        return CategoricalField(grid, np.stack([p, 1.0 - p]))

    return field(0.0), field(shift)


def test_demons_config_validation():
    with pytest.raises(ConfigError):
        DemonsConfig(alpha=2.0, alpha0=1.0)
    with pytest.raises(ConfigError):
        DemonsConfig(alpha=0.0, alpha0=1.0)
    with pytest.raises(ConfigError):
        DemonsConfig(alpha=0.5, alpha0=1.0, ridge=0.0)
    cfg = DemonsConfig.for_level(3, 3)
    assert cfg.alpha0 == pytest.approx(10.0)
    assert cfg.alpha == pytest.approx(1.0)
    coarse = DemonsConfig.for_level(1, 3)
    assert coarse.alpha0 == pytest.approx(2.5)
    # 最粗层的0.25体素对应细层的1体素
    assert coarse.alpha == pytest.approx(0.25)
    assert cfg.with_alpha(1.0).alpha == 1.0


def test_identical_inputs_give_zero_force():
    fixed, _ = _sigmoid_pair()
    out = demons_force(fixed, fixed, DemonsConfig(0.5, 1.0))
    assert not np.any(out.mu.vectors)
    assert out.max_norm == 0.0


def test_force_is_bounded_by_alpha():
    fixed, moving = _sigmoid_pair(shift=2.0)
    out = demons_force(fixed, moving, DemonsConfig(0.3, 1.0))
    assert out.mu.max_norm() == pytest.approx(0.3)
    assert out.sigma_phi_sq >= 0


def test_force_sign_follows_shift():
    """moving(x) = fixed(x − 1) 时力沿 +x"""
    fixed, moving = _sigmoid_pair(shift=1.0)
    mu = demons_force(fixed, moving, DemonsConfig(0.5, 1.0)).mu.vectors
    band = slice(12, 20)
    assert np.mean(mu[0, band]) > 0
    assert np.allclose(mu[1], 0.0, atol=1e-12)


def test_force_antisymmetric_under_swap():
    fixed, moving = _sigmoid_pair(shift=1.5)
    cfg = DemonsConfig(0.5, 1.0)
    forward = demons_force(fixed, moving, cfg).mu.vectors
    backward = demons_force(moving, fixed, cfg).mu.vectors
    assert np.array_equal(forward, -backward)


def test_force_reduces_linearized_energy():
    fixed, moving = _sigmoid_pair(shift=1.0)
    out = demons_force(fixed, moving, DemonsConfig(0.1, 1.0))
    before = demons_energy(fixed, moving, VectorField.zeros(fixed.grid), out.sigma_phi_sq)
    after = demons_energy(fixed, moving, out.mu, out.sigma_phi_sq)
    assert before == pytest.approx(matching_energy(fixed, moving))
    assert after < before


def test_demons_step_decreases_matching_energy():
    fixed, moving = _sigmoid_pair(shift=2.0)
    cfg = DemonsConfig(alpha=0.5, alpha0=1.0)
    velocity = VectorField.zeros(fixed.grid)
    energies = [matching_energy(fixed, moving)]
    for _ in range(3):
        step = demons_step(fixed, moving, velocity, cfg)
        velocity = step.velocity
        energies.append(matching_energy(fixed, step.warped))
    assert energies[-1] < energies[0]


def test_force_rejects_mismatched_inputs():
    fixed, _ = _sigmoid_pair()
    other = CategoricalField.uniform(GridSpec((16, 8)), 2)
    with pytest.raises(GridMismatchError):
        demons_force(fixed, other, DemonsConfig(0.5, 1.0))
    three = CategoricalField.uniform(fixed.grid, 3)
    with pytest.raises(InvalidInputError):
        demons_force(fixed, three, DemonsConfig(0.5, 1.0))


def test_fluid_smooth_impulse_matches_truncated_gaussian():
    grid = GridSpec((21, 21))
    impulse = np.zeros((2, 21, 21))
    impulse[0, 10, 10] = 1.0
    out = fluid_smooth(VectorField(grid, impulse), 1.0).vectors
    taps = np.exp(-0.5 * np.arange(-3, 4) ** 2)
    taps /= taps.sum()
    expected = np.zeros((21, 21))
    expected[7:14, 7:14] = np.outer(taps, taps)
    assert np.allclose(out[0], expected, atol=1e-12)
    assert not np.any(out[1])
    # sigma为0时原样拷贝
    copy = fluid_smooth(VectorField(grid, impulse), 0.0)
    assert np.array_equal(copy.vectors, impulse)
    with pytest.raises(InvalidInputError):
        fluid_smooth(VectorField(grid, impulse), -1.0)


def test_fluid_smooth_matches_scipy_filter():
    grid = GridSpec((16, 16))
    rng = np.random.default_rng(0)
    v = VectorField(grid, rng.normal(size=(2, 16, 16)))
    out = fluid_smooth(v, 2.0).vectors
    expected = ndimage.gaussian_filter(v.vectors[1], 2.0, mode='nearest', truncate=3.0)
    assert np.allclose(out[1], expected)


def test_velocity_variance_is_positive_and_bounded():
    fixed, moving = _sigmoid_pair()
    variance = estimate_velocity_variance(fixed, moving, 0.025).values
    assert np.all(variance > 0)
    assert np.all(variance <= 0.025)
    flat = CategoricalField.uniform(fixed.grid, 2)
    assert np.allclose(estimate_velocity_variance(flat, flat, 0.025).values, 0.025)
