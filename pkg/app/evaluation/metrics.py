#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
组配准评估指标
组内两两平均的Dice与ASSD、组扭曲指数gWI、负雅可比体素比例
"""

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from app.errors import GridMismatchError, InvalidInputError
from app.grid import LabelField, VectorField, identity_grid, jacobian_determinant, warp
from app.grid.ops import _sample
from app.registration import compose

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairwiseSummary:
    """两两指标汇总：excluded为因掩膜为空而跳过的图像对"""
    value: float
    pairs: int
    excluded: Tuple[Tuple[int, int], ...] = ()


def _check_labels(labels: Sequence[LabelField]):
    if len(labels) < 2:
        raise InvalidInputError("至少需要2个标签图")
    grid = labels[0].grid
    for label in labels[1:]:
        if label.grid != grid:
            raise GridMismatchError("标签图网格不一致")


def _classes(labels: Sequence[LabelField], label: Optional[int]) -> List[int]:
    if label is not None:
        return [label]
    present = sorted(set().union(*(np.unique(l.labels).tolist() for l in labels)) - {0})
    if not present:
        raise InvalidInputError("标签图中没有前景类别")
    return present


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A∩B|/(|A|+|B|)，两者都为空时为1"""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def groupwise_dice(labels: Sequence[LabelField], label: Optional[int] = None) -> float:
    """所有无序对的Dice平均；label为None时对所有前景类别取平均"""
    _check_labels(labels)
    scores = []
    for c in _classes(labels, label):
        masks = [l.mask(c) for l in labels]
        scores.append(np.mean([dice(a, b) for a, b in combinations(masks, 2)]))
    return float(np.mean(scores))


def boundary(mask: np.ndarray) -> np.ndarray:
    """面连通边界：掩膜减去其腐蚀，网格外视为背景"""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def surface_distance(a: np.ndarray, b: np.ndarray, spacing=None) -> float:
    """对称平均表面距离"""
    edge_a, edge_b = boundary(a), boundary(b)
    if not edge_a.any() or not edge_b.any():
        raise InvalidInputError("掩膜为空，无法计算表面距离")
    to_b = ndimage.distance_transform_edt(~edge_b, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~edge_a, sampling=spacing)
    total = to_b[edge_a].sum() + to_a[edge_b].sum()
    return float(total / (edge_a.sum() + edge_b.sum()))


def assd_summary(labels: Sequence[LabelField], label: int, spacing=None) -> PairwiseSummary:
    _check_labels(labels)
    masks = [l.mask(label) for l in labels]
    values, excluded = [], []
    for (i, a), (j, b) in combinations(enumerate(masks), 2):
        if not a.any() or not b.any():
            excluded.append((i, j))
            continue
        values.append(surface_distance(a, b, spacing))
    if excluded:
        logger.warning("类别%d的ASSD跳过%d个含空掩膜的图像对", label, len(excluded))
    value = float(np.mean(values)) if values else float('nan')
    return PairwiseSummary(value, len(values), tuple(excluded))


def groupwise_assd(labels: Sequence[LabelField], label: Optional[int] = None, spacing=None) -> float:
    """两两平均ASSD（体素单位，除非给出spacing）；label为None时对前景类别取平均"""
    _check_labels(labels)
    values = [assd_summary(labels, c, spacing).value for c in _classes(labels, label)]
    values = [v for v in values if np.isfinite(v)]
    return float(np.mean(values)) if values else float('nan')


def composition_residuals(ground_truth: Sequence[VectorField],
                          predicted: Sequence[VectorField]) -> List[np.ndarray]:
    """r_j = φ_j†∘φ̂_j(ω) − ω"""
    if len(ground_truth) != len(predicted):
        raise InvalidInputError("真值变换与预测变换数量不一致")
    return [compose(gt, pred).vectors for gt, pred in zip(ground_truth, predicted)]


def groupwise_warping_index(ground_truth: Sequence[VectorField], predicted: Sequence[VectorField],
                            foreground: np.ndarray) -> float:
    """组扭曲指数：去除组平均残差后逐图像RMS，再对图像平均

    有效区域为所有j上 φ_j†∘φ̂_j(ω) ∈ F 的交集。
    """
    if len(ground_truth) < 2:
        raise InvalidInputError("gWI至少需要2个变换")
    grid = ground_truth[0].grid
    for v in list(ground_truth) + list(predicted):
        if v.grid != grid:
            raise GridMismatchError("gWI: 变换网格不一致")
    foreground = np.asarray(foreground, dtype=bool)
    if foreground.shape != grid.dims:
        raise InvalidInputError(f"前景形状{foreground.shape}与网格{grid.dims}不一致")
    residuals = composition_residuals(ground_truth, predicted)
    base = identity_grid(grid)
    valid = np.ones(grid.dims, dtype=bool)
    for r in residuals:
        inside = _sample(foreground[None].astype(np.float64), base + r, 0)[0] > 0.5
        valid &= inside
    if not valid.any():
        raise InvalidInputError("gWI的有效前景为空")
    stack = np.stack(residuals, axis=0)
    centred = stack - stack.mean(axis=0, keepdims=True)
    rms = [np.sqrt(np.mean(np.sum(c ** 2, axis=0)[valid])) for c in centred]
    return float(np.mean(rms))


def negative_jacobian_fraction(transforms: Sequence[VectorField],
                               foreground: Optional[np.ndarray] = None) -> float:
    """前景内 det(I+∇u) ≤ 0 的体素百分比，对图像平均"""
    if not transforms:
        raise InvalidInputError("没有变换")
    fractions = []
    for transform in transforms:
        det = jacobian_determinant(transform).values
        region = np.ones(det.shape, dtype=bool) if foreground is None else np.asarray(foreground, dtype=bool)
        if not region.any():
            raise InvalidInputError("前景为空")
        fractions.append(100.0 * np.count_nonzero(det[region] <= 0) / np.count_nonzero(region))
    return float(np.mean(fractions))


def groupwise_metrics(predicted: Sequence[VectorField], labels: Sequence[LabelField],
                      ground_truth: Optional[Sequence[VectorField]] = None,
                      foreground: Optional[np.ndarray] = None, label: Optional[int] = None,
                      spacing=None) -> Dict[str, float]:
    """汇总评估记录：标签先按预测变换（最近邻）映射到公共空间"""
    if len(predicted) != len(labels):
        raise InvalidInputError("变换数量与标签数量不一致")
    warped = [warp(field, transform, 'nearest') for field, transform in zip(labels, predicted)]
    record = {
        'group_size': float(len(labels)),
        'dice': groupwise_dice(warped, label),
        'assd': groupwise_assd(warped, label, spacing),
        'neg_jacobian_pct': negative_jacobian_fraction(predicted, foreground),
    }
    if ground_truth is not None:
        if foreground is None:
            raise InvalidInputError("计算gWI需要前景掩膜")
        record['gwi'] = groupwise_warping_index(ground_truth, predicted, foreground)
    return record
