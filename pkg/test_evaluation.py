#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
评估测试
Dice、ASSD、gWI、负雅可比比例、B样条FFD体模与验收基准中的公式检查
"""

import numpy as np
import pytest
from scipy import ndimage

from app.errors import ConfigError, InvalidInputError, ModalityError
from app.evaluation import (
    FfdSpec,
    PHANTOM_LABELS,
    assd_summary,
    boundary,
    bspline_weights,
    dice,
    groupwise_assd,
    groupwise_dice,
    groupwise_metrics,
    groupwise_warping_index,
    make_anatomy,
    make_phantom_group,
    merge_groups,
    negative_jacobian_fraction,
    random_ffd,
    render,
    surface_distance,
)
from app.evaluation.benchmark import run_acceptance
from app.grid import GridSpec, LabelField, VectorField, jacobian_determinant, warp
from app.registration import exponentiate, invert

GRID = GridSpec((16, 16))


def _label(mask: np.ndarray) -> LabelField:
    return LabelField(GridSpec(mask.shape), mask.astype(int), 2)


def test_dice_basic_cases():
    a = np.zeros((16, 16), dtype=bool)
    a[2:6, 2:6] = True
    assert dice(a, a) == 1.0
    assert dice(a, np.roll(a, 8, axis=0)) == 0.0
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0


def test_groupwise_dice_averages_pairs():
    a = np.zeros((16, 16), dtype=bool)
    a[0, 0:4] = True
    b = np.zeros((16, 16), dtype=bool)
    b[0, 2:6] = True
    # (A,A)=1, (A,B)=0.5, (A,B)=0.5
    assert groupwise_dice([_label(a), _label(a), _label(b)], 1) == pytest.approx(2.0 / 3.0)
    with pytest.raises(InvalidInputError):
        groupwise_dice([_label(a)])
    with pytest.raises(InvalidInputError):
        groupwise_dice([_label(np.zeros((16, 16))), _label(np.zeros((16, 16)))])


def test_assd_of_parallel_lines():
    a = np.zeros((16, 16), dtype=bool)
    b = np.zeros((16, 16), dtype=bool)
    a[5, 2:13] = True
    b[7, 2:13] = True
    assert surface_distance(a, b) == pytest.approx(2.0)
    assert groupwise_assd([_label(a), _label(b)], 1) == pytest.approx(2.0)
    # 物理间距缩放
    assert surface_distance(a, b, spacing=(0.5, 1.0)) == pytest.approx(1.0)


def test_assd_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(3):
        a = rng.random((12, 12)) > 0.5
        b = rng.random((12, 12)) > 0.5
        pa, pb = np.argwhere(boundary(a)), np.argwhere(boundary(b))
        dist = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1))
        expected = (dist.min(axis=1).sum() + dist.min(axis=0).sum()) / (len(pa) + len(pb))
        assert surface_distance(a, b) == pytest.approx(expected, abs=1e-9)


def test_assd_skips_pairs_with_empty_masks():
    a = np.zeros((16, 16), dtype=bool)
    a[4:8, 4:8] = True
    summary = assd_summary([_label(a), _label(a), _label(np.zeros((16, 16)))], 1)
    assert summary.pairs == 1
    assert summary.excluded == ((0, 2), (1, 2))
    assert summary.value == 0.0
    with pytest.raises(InvalidInputError):
        surface_distance(a, np.zeros_like(a))


def test_gwi_zero_for_common_shift():
    shift = VectorField.uniform(GRID, (1.0, 0.0))
    zero = VectorField.zeros(GRID)
    foreground = np.zeros(GRID.dims, dtype=bool)
    foreground[4:12, 4:12] = True
    assert groupwise_warping_index([shift, shift], [zero, zero], foreground) < 1e-12


def test_gwi_near_zero_for_exact_recovery():
    grid = GridSpec((32, 32))
    rng = np.random.default_rng(1)
    raw = rng.normal(size=(2, 32, 32))
    v = VectorField(grid, np.stack([ndimage.gaussian_filter(c, 6.0, mode='wrap') for c in raw]))
    v = v.scaled(1.5 / v.max_norm())
    truth = [exponentiate(v), exponentiate(-v)]
    predicted = [invert(v), invert(-v)]
    foreground = np.zeros(grid.dims, dtype=bool)
    foreground[8:24, 8:24] = True
    assert groupwise_warping_index(truth, predicted, foreground) < 0.1
    assert groupwise_warping_index(truth, [VectorField.zeros(grid)] * 2, foreground) > 0.1


def test_gwi_validation():
    zero = VectorField.zeros(GRID)
    with pytest.raises(InvalidInputError):
        groupwise_warping_index([zero], [zero], np.ones(GRID.dims))
    with pytest.raises(InvalidInputError):
        groupwise_warping_index([zero, zero], [zero, zero], np.zeros(GRID.dims))
    with pytest.raises(InvalidInputError):
        groupwise_warping_index([zero, zero], [zero, zero], np.ones((4, 4)))


def test_negative_jacobian_fraction():
    zero = VectorField.zeros(GRID)
    assert negative_jacobian_fraction([zero]) == 0.0
    folded = np.zeros((2, 16, 16))
    folded[0, :, :8] = -2.0 * np.indices((16, 8))[0]
    transform = VectorField(GRID, folded)
    expected = 100.0 * np.count_nonzero(jacobian_determinant(transform).values <= 0) / GRID.size
    assert negative_jacobian_fraction([transform]) == pytest.approx(expected)
    assert negative_jacobian_fraction([transform, zero]) == pytest.approx(expected / 2)
    with pytest.raises(InvalidInputError):
        negative_jacobian_fraction([])


def test_bspline_weights_partition_of_unity():
    weights = bspline_weights(40, 8.0)
    assert np.allclose(weights.sum(axis=1), 1.0)
    assert np.all(weights >= 0)


def test_random_ffd_bounds_and_reproducibility():
    spec = FfdSpec(10.0, 3.0, seed=4)
    u = random_ffd(spec, GridSpec((40, 40)))
    assert np.max(np.abs(u.vectors)) <= 3.0
    assert np.array_equal(u.vectors, random_ffd(spec, GridSpec((40, 40))).vectors)
    assert not np.array_equal(u.vectors, random_ffd(spec, GridSpec((40, 40)), seed=5).vectors)
    assert not np.any(random_ffd(FfdSpec(10.0, 0.0), GRID).vectors)
    with pytest.raises(ConfigError):
        FfdSpec(10.0, 5.0)
    with pytest.raises(ConfigError):
        FfdSpec(1.0, 0.0)


def test_random_ffd_does_not_fold():
    grid = GridSpec((64, 64))
    for seed in range(20):
        u = random_ffd(FfdSpec(10.0, 2.5), grid, seed=seed)
        assert jacobian_determinant(u).values.min() > 0


def test_anatomy_and_render():
    anatomy = make_anatomy(GridSpec((48, 48)))
    assert anatomy.num_labels == PHANTOM_LABELS
    assert set(np.unique(anatomy.labels)) == set(range(PHANTOM_LABELS))
    image = render(anatomy, 0.1 * np.arange(PHANTOM_LABELS))
    assert np.allclose(image.values, 0.1 * anatomy.labels)
    inclusions = anatomy.labels >= 4
    assert inclusions.any()
    assert np.all(ndimage.binary_erosion(anatomy.labels > 0)[inclusions])
    with pytest.raises(InvalidInputError):
        render(anatomy, [0.0, 1.0])


def test_phantom_group_without_deformation_or_noise():
    group = make_phantom_group(shape=(32, 32), modalities=('a', 'b'), noise=0.0,
                               ffd=FfdSpec(8.0, 0.0), blur=1.0)
    for image, m in zip(group.images, group.modalities):
        expected = render(group.anatomy, group.codebooks[m], 1.0)
        assert np.array_equal(image.values, expected.values)
    for label in group.labels:
        assert np.array_equal(label.labels, group.anatomy.labels)
    assert np.array_equal(group.foreground, group.anatomy.labels > 0)


def test_unblurred_phantom_stays_piecewise_constant():
    group = make_phantom_group(shape=(32, 32), noise=0.0, ffd=FfdSpec(8.0, 2.0), seed=4, blur=0.0)
    for image, label, m in zip(group.images, group.labels, group.modalities):
        levels = np.asarray(group.codebooks[m])
        assert np.array_equal(image.values, levels[label.labels])


def test_phantom_group_labels_follow_transforms():
    group = make_phantom_group(shape=(32, 32), ffd=FfdSpec(8.0, 2.0), seed=3, repeats=2)
    assert group.size == 6
    assert group.modalities == ['m0', 'm1', 'm2'] * 2
    for label, transform in zip(group.labels, group.transforms):
        assert np.array_equal(label.labels, warp(group.anatomy, transform, 'nearest').labels)
    again = make_phantom_group(shape=(32, 32), ffd=FfdSpec(8.0, 2.0), seed=3, repeats=2)
    for a, b in zip(group.images, again.images):
        assert np.array_equal(a.values, b.values)


def test_phantom_group_validation():
    with pytest.raises(ModalityError):
        make_phantom_group(shape=(32, 32), modalities=('a',))
    with pytest.raises(ModalityError):
        make_phantom_group(shape=(32, 32), modalities=('a', 'a'))
    with pytest.raises(InvalidInputError):
        make_phantom_group(shape=(32, 32), noise=-1.0)


def test_merge_groups():
    first = make_phantom_group(shape=(32, 32), ffd=FfdSpec(8.0, 2.0), seed=0)
    second = make_phantom_group(shape=(32, 32), ffd=FfdSpec(8.0, 2.0), seed=1)
    merged = merge_groups([first, second])
    assert merged.size == 6
    assert merged.transforms[3] is second.transforms[0]
    with pytest.raises(InvalidInputError):
        merge_groups([first, make_phantom_group(shape=(48, 48), seed=0)])
    with pytest.raises(InvalidInputError):
        merge_groups([])


def test_groupwise_metrics_record():
    group = make_phantom_group(shape=(32, 32), ffd=FfdSpec(8.0, 2.0), seed=2)
    identity = [VectorField.zeros(group.anatomy.grid) for _ in group.images]
    record = groupwise_metrics(identity, group.labels, group.transforms, group.foreground)
    assert set(record) == {'group_size', 'dice', 'assd', 'neg_jacobian_pct', 'gwi'}
    assert record['group_size'] == 3.0
    assert 0.0 < record['dice'] < 1.0
    assert record['neg_jacobian_pct'] == 0.0
    truth = groupwise_metrics(group.transforms, [group.anatomy] * 3, None, group.foreground)
    assert 'gwi' not in truth
    with pytest.raises(InvalidInputError):
        groupwise_metrics(identity, group.labels, group.transforms)
    with pytest.raises(InvalidInputError):
        groupwise_metrics(identity[:2], group.labels)


def test_groupwise_metrics_single_label_and_spacing():
    a = np.zeros((16, 16), dtype=bool)
    b = np.zeros((16, 16), dtype=bool)
    a[5, 2:13] = True
    b[7, 2:13] = True
    identity = [VectorField.zeros(GRID)] * 2
    record = groupwise_metrics(identity, [_label(a), _label(b)], label=1, spacing=(2.0, 1.0))
    assert record['assd'] == pytest.approx(4.0)


def test_acceptance_formula_checks_pass():
    rows = run_acceptance('quick', seed=0, only=[2, 3, 5, 7, 10, 11])
    assert [row.criterion for row in rows] == [2, 3, 5, 7, 10, 11]
    for row in rows:
        assert row.passed, f"{row.name}: {row.value} ({row.detail})"
    with pytest.raises(ValueError):
        run_acceptance('huge')


def test_acceptance_inverse_and_sampling_checks_pass():
    rows = run_acceptance('quick', seed=0, only=[1, 6])
    assert [row.criterion for row in rows] == [1, 6]
    for row in rows:
        assert row.passed, f"{row.name}: {row.value} ({row.detail})"
