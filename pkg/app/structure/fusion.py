#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
多视图融合模块
几何平均（公共解剖）、算术平均（先验）与内在KL距离
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, rel_entr

from app.errors import GridMismatchError, InvalidInputError
from app.grid import CategoricalField

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionResult:
    geometric: CategoricalField
    arithmetic: CategoricalField


@dataclass(frozen=True)
class StructuralDistance:
    """内在距离：各视图KL(q*‖q_j)的平均及逐视图项"""
    total: float
    per_view: Tuple[float, ...]


@dataclass(frozen=True)
class ArgminReport:
    baseline: float
    trials: int
    violations: int
    worst_margin: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _check_views(views: Sequence[CategoricalField], minimum: int = 2):
    if len(views) < minimum:
        raise InvalidInputError(f"至少需要{minimum}个视图，实际为{len(views)}")
    grid, k = views[0].grid, views[0].num_classes
    for view in views[1:]:
        if view.grid != grid:
            raise GridMismatchError("视图网格不一致")
        if view.num_classes != k:
            raise InvalidInputError(f"视图类别数不一致: {view.num_classes} vs {k}")


def geometric_mean(posteriors: Sequence[CategoricalField]) -> CategoricalField:
    """π* ∝ (Π_j π_j)^(1/N)，在对数域计算"""
    _check_views(posteriors)
    with np.errstate(divide='ignore'):
        mean_log = np.mean([np.log(p.probs) for p in posteriors], axis=0)
    log_probs = mean_log - logsumexp(mean_log, axis=0, keepdims=True)
    return CategoricalField(posteriors[0].grid, np.exp(log_probs))


def arithmetic_mean(views: Sequence[CategoricalField]) -> CategoricalField:
    _check_views(views)
    return CategoricalField(views[0].grid, np.mean([v.probs for v in views], axis=0))


def fuse(views: Sequence[CategoricalField]) -> FusionResult:
    return FusionResult(geometric_mean(views), arithmetic_mean(views))


def geometric_mean_gaussian(means: Sequence[np.ndarray],
                            variances: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """对角高斯视图的几何平均：Σ* = N(Σ_j Σ_j⁻¹)⁻¹，μ* 为精度加权均值"""
    if len(means) != len(variances) or len(means) < 2:
        raise InvalidInputError("高斯视图数量不一致或少于2")
    mu = np.stack([np.asarray(m, dtype=np.float64) for m in means])
    var = np.stack([np.asarray(v, dtype=np.float64) for v in variances])
    if mu.shape != var.shape:
        raise InvalidInputError(f"均值与方差形状不一致: {mu.shape} vs {var.shape}")
    if np.any(var <= 0):
        raise InvalidInputError("方差必须为正")
    precision = 1.0 / var
    total_precision = precision.sum(axis=0)
    fused_var = len(means) / total_precision
    fused_mean = (precision * mu).sum(axis=0) / total_precision
    return fused_mean, fused_var


def intrinsic_distance(fused: CategoricalField, views: Sequence[CategoricalField]) -> StructuralDistance:
    """D̃ = (1/N) Σ_j Σ_ω KL(q*(ω) ‖ q_j(ω))

    q*应为视图的几何平均（不强制检查）。视图概率须经ε下限处理以保证有限。
    """
    _check_views([fused] + list(views))
    per_view = tuple(float(np.sum(rel_entr(fused.probs, v.probs))) for v in views)
    if not all(np.isfinite(per_view)):
        raise InvalidInputError("视图中存在零概率，内在距离无界")
    return StructuralDistance(float(np.mean(per_view)), per_view)


def intrinsic_distance_gaussian(fused_mean: np.ndarray, fused_var: np.ndarray,
                                means: Sequence[np.ndarray],
                                variances: Sequence[np.ndarray]) -> StructuralDistance:
    """对角高斯情形的内在距离（闭式KL）"""
    fused_mean = np.asarray(fused_mean, dtype=np.float64)
    fused_var = np.asarray(fused_var, dtype=np.float64)
    if np.any(fused_var <= 0):
        raise InvalidInputError("融合方差必须为正")
    per_view = []
    for m, v in zip(means, variances):
        m = np.asarray(m, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if np.any(v <= 0):
            raise InvalidInputError("方差必须为正")
        kl = 0.5 * (np.log(v / fused_var) + fused_var / v + (fused_mean - m) ** 2 / v - 1.0)
        per_view.append(float(np.sum(kl)))
    return StructuralDistance(float(np.mean(per_view)), tuple(per_view))


def structural_kl(fused: CategoricalField, mixture: CategoricalField) -> float:
    """精确KL(q*‖p⁺)，内在距离是其上界"""
    _check_views([fused, mixture])
    return float(np.sum(rel_entr(fused.probs, mixture.probs)))


def _objective(candidate: np.ndarray, views: Sequence[CategoricalField]) -> float:
    return float(np.mean([np.sum(rel_entr(candidate, v.probs)) for v in views]))


def variational_argmin_check(views: Sequence[CategoricalField], trials: int = 100,
                             magnitude: float = 0.05, seed: int = 0,
                             tol: float = 1e-10) -> ArgminReport:
    """抽样验证几何平均是内在距离泛函的极小点

    扰动 q' = (1−m)q* + m·r，r为逐体素Dirichlet(1)样本；另检验算术平均。
    """
    _check_views(views)
    fused = geometric_mean(views).probs
    baseline = _objective(fused, views)
    rng = np.random.default_rng(seed)
    k = fused.shape[0]
    candidates: List[np.ndarray] = [fused, arithmetic_mean(views).probs]
    for _ in range(trials):
        noise = rng.dirichlet(np.ones(k), size=fused.shape[1:])
        candidates.append((1.0 - magnitude) * fused + magnitude * np.moveaxis(noise, -1, 0))
    margins = [_objective(c, views) - baseline for c in candidates]
    violations = sum(1 for m in margins if m < -tol)
    if violations:
        logger.warning("几何平均极小性检验出现%d次违例", violations)
    return ArgminReport(baseline, len(candidates), violations, float(min(margins)))
