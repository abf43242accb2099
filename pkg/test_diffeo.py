#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
速度场代数测试
复合、缩放平方、逆变换、零均值约束与多层金字塔
"""

import numpy as np
import pytest
from scipy import ndimage

from app.errors import GridMismatchError, InvalidInputError
from app.grid import GridSpec, VectorField
from app.registration import (
    VelocitySet,
    aggregate_levels,
    build_pyramid,
    center_velocities,
    compose,
    exponentiate,
    invert,
    transforms_from_velocities,
)
from app.registration.diffeo import auto_steps, check_pyramid


def _smooth_velocity(grid: GridSpec, peak: float, seed: int = 0) -> VectorField:
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(grid.ndim,) + grid.dims)
    smooth = np.stack([ndimage.gaussian_filter(c, 8.0, mode='wrap') for c in raw])
    v = VectorField(grid, smooth)
    return v.scaled(peak / v.max_norm())


def test_compose_with_zero_is_identity():
    grid = GridSpec((16, 16))
    v = _smooth_velocity(grid, 2.0)
    zero = VectorField.zeros(grid)
    assert np.array_equal(compose(v, zero).vectors, v.vectors)
    assert np.allclose(compose(zero, v).vectors, v.vectors)


def test_compose_uniform_shifts_add():
    grid = GridSpec((16, 16))
    a = VectorField.uniform(grid, (1.0, 0.0))
    b = VectorField.uniform(grid, (0.0, 2.0))
    assert np.allclose(compose(a, b).vectors[0], 1.0)
    assert np.allclose(compose(a, b).vectors[1], 2.0)
    with pytest.raises(GridMismatchError):
        compose(a, VectorField.zeros(GridSpec((16, 8))))


def test_auto_steps():
    grid = GridSpec((16, 16))
    assert auto_steps(VectorField.zeros(grid)) == 2
    assert auto_steps(VectorField.uniform(grid, (0.1, 0.0))) == 2
    assert auto_steps(VectorField.uniform(grid, (0.3, 0.0))) == 3
    # ceil(log2(5 / 0.0625)) = 7
    assert auto_steps(VectorField.uniform(grid, (5.0, 0.0))) == 7
    assert auto_steps(VectorField.uniform(grid, (8.0, 0.0))) == 7


def test_exponentiate_zero_and_uniform():
    grid = GridSpec((16, 16))
    zero = exponentiate(VectorField.zeros(grid))
    assert not np.any(zero.vectors)
    shift = exponentiate(VectorField.uniform(grid, (1.5, -0.5)))
    assert np.allclose(shift.vectors[0], 1.5)
    assert np.allclose(shift.vectors[1], -0.5)
    with pytest.raises(InvalidInputError):
        exponentiate(VectorField.zeros(grid), steps=0)


@pytest.mark.parametrize('seed', range(5))
@pytest.mark.parametrize('peak', [3.0, 5.0])
def test_inverse_consistency_on_smooth_velocity(peak, seed):
    """exp(v)∘exp(−v) 在内部区域接近恒等"""
    grid = GridSpec((64, 64))
    v = _smooth_velocity(grid, peak, seed=seed)
    forward, inverse = exponentiate(v), invert(v)
    margin = 12
    for residual in (compose(forward, inverse), compose(inverse, forward)):
        interior = residual.norm()[margin:-margin, margin:-margin]
        assert interior.max() <= 0.1


def test_center_velocities_zero_mean():
    grid = GridSpec((12, 12))
    fields = [_smooth_velocity(grid, 1.0 + j, seed=j) for j in range(4)]
    centred = center_velocities(fields)
    total = np.sum([v.vectors for v in centred], axis=0)
    assert np.max(np.abs(total)) < 1e-12
    # 再次约束不改变结果
    again = center_velocities(centred)
    assert np.allclose(np.stack([v.vectors for v in again]), np.stack([v.vectors for v in centred]))


def test_center_velocities_validation():
    grid = GridSpec((12, 12))
    with pytest.raises(InvalidInputError):
        center_velocities([])
    with pytest.raises(InvalidInputError):
        center_velocities([VectorField.zeros(grid)])
    with pytest.raises(GridMismatchError):
        center_velocities([VectorField.zeros(grid), VectorField.zeros(GridSpec((12, 6)))])


def test_build_pyramid():
    grids = build_pyramid(GridSpec((96, 96)), 3)
    assert [g.dims for g in grids] == [(24, 24), (48, 48), (96, 96)]
    assert grids[0].spacing == (4.0, 4.0)
    check_pyramid(grids)
    with pytest.raises(InvalidInputError):
        build_pyramid(GridSpec((50, 50)), 3)
    with pytest.raises(InvalidInputError):
        build_pyramid(GridSpec((8, 8)), 0)
    with pytest.raises(InvalidInputError):
        check_pyramid([grids[2], grids[0]])


def test_aggregate_levels_upsamples_coarse_velocity():
    grids = build_pyramid(GridSpec((32, 32)), 3)
    vset = VelocitySet.zeros(grids, 2)
    coarse = [VectorField.uniform(grids[0], (1.0, 0.0)), VectorField.uniform(grids[0], (-1.0, 0.0))]
    totals = aggregate_levels(vset.with_level(0, coarse))
    # 最粗层体素是最细层的4倍
    assert np.allclose(totals[0].vectors[0], 4.0)
    assert np.allclose(totals[1].vectors[0], -4.0)
    assert np.allclose(totals[0].vectors[1], 0.0)


def test_velocity_set_validation():
    grids = build_pyramid(GridSpec((16, 16)), 2)
    with pytest.raises(InvalidInputError):
        VelocitySet.zeros(grids, 1)
    with pytest.raises(InvalidInputError):
        VelocitySet([], [])
    with pytest.raises(GridMismatchError):
        VelocitySet(grids, [[VectorField.zeros(grids[1])] * 2, [VectorField.zeros(grids[1])] * 2])
    vset = VelocitySet.zeros(grids, 3)
    assert vset.num_levels == 2 and vset.num_images == 3
    assert vset.finest == grids[-1]


def test_transforms_from_velocities_are_mutual_inverses():
    grid = GridSpec((48, 48))
    v = _smooth_velocity(grid, 2.0, seed=5)
    vset = VelocitySet([grid], [center_velocities([v, -v])])
    transforms = transforms_from_velocities(vset)
    assert len(transforms.forward) == len(transforms.inverse) == 2
    for forward, inverse in zip(transforms.forward, transforms.inverse):
        residual = compose(forward, inverse).norm()[10:-10, 10:-10]
        assert residual.max() <= 0.1
