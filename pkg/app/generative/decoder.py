#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
解码器模块
逐模态强度码本：f_j(z)(ω) = Σ_k z_k(ω) c_{j,k}
解码只依赖单个体素，因而与空间变换可交换
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.errors import GridMismatchError, InvalidInputError, ModalityError
from app.grid import CategoricalField, ImageField, VectorField, warp

logger = logging.getLogger(__name__)

FIT_MODES = ('L1', 'L2')


@dataclass(frozen=True)
class IntensityCodebook:
    """每个模态K个强度值；empty_classes记录拟合时权重为零而沿用旧值的类别"""
    levels: Dict[str, np.ndarray]
    empty_classes: Dict[str, Tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.levels:
            raise InvalidInputError("码本为空")
        levels = {}
        sizes = set()
        for name, values in self.levels.items():
            values = np.array(values, dtype=np.float64).ravel()
            if not np.all(np.isfinite(values)):
                raise InvalidInputError(f"模态{name}的码本包含非有限值")
            sizes.add(values.size)
            levels[name] = values
        if len(sizes) != 1:
            raise InvalidInputError("各模态码本长度不一致")
        object.__setattr__(self, 'levels', levels)

    @property
    def num_classes(self) -> int:
        return next(iter(self.levels.values())).size

    @property
    def modalities(self):
        return list(self.levels)

    def for_modality(self, modality: str) -> np.ndarray:
        if modality not in self.levels:
            raise ModalityError(f"码本中没有模态{modality}")
        return self.levels[modality]


@dataclass(frozen=True)
class CounterfactualResult:
    factual: ImageField
    counterfactual: ImageField
    difference: ImageField


def decode(z: CategoricalField, codebook: IntensityCodebook, modality: str) -> ImageField:
    """逐体素期望强度 Σ_k z_k c_{j,k}"""
    levels = codebook.for_modality(modality)
    if levels.size != z.num_classes:
        raise InvalidInputError(f"码本类别数{levels.size}与后验类别数{z.num_classes}不一致")
    # 逐类累加，保证每个体素的求和顺序固定
    out = np.zeros(z.grid.dims)
    for k in range(z.num_classes):
        out += levels[k] * z.probs[k]
    return ImageField(z.grid, out)


def weighted_median(values: np.ndarray, weights: np.ndarray) -> Optional[float]:
    """加权中位数，平局取较低值；总权重为零时返回None"""
    order = np.argsort(values, kind='stable')
    cumulative = np.cumsum(weights[order])
    total = cumulative[-1] if cumulative.size else 0.0
    if total <= 0:
        return None
    index = int(np.searchsorted(cumulative, 0.5 * total, side='left'))
    return float(values[order][index])


def fit_codebook(z: CategoricalField, warped_images: Mapping[str, Sequence[ImageField]],
                 mode: str = 'L1', previous: Optional[IntensityCodebook] = None) -> IntensityCodebook:
    """在公共空间中按后验权重拟合码本

    L1为加权中位数（对应拉普拉斯似然），L2为加权均值。
    """
    if mode not in FIT_MODES:
        raise InvalidInputError(f"未知码本拟合方式: {mode}")
    k = z.num_classes
    levels, empty = {}, {}
    for name, images in warped_images.items():
        if not images:
            continue
        for image in images:
            if image.grid != z.grid:
                raise GridMismatchError(f"模态{name}的图像网格与后验不一致")
        values = np.concatenate([img.values.ravel() for img in images])
        weights = np.tile(z.probs.reshape(k, -1), (1, len(images)))
        old = previous.levels.get(name) if previous is not None else None
        fitted = np.zeros(k)
        missing = []
        for c in range(k):
            w = weights[c]
            if mode == 'L2':
                total = w.sum()
                value = float(w @ values / total) if total > 0 else None
            else:
                value = weighted_median(values, w)
            if value is None:
                missing.append(c)
                value = float(old[c]) if old is not None else 0.0
            fitted[c] = value
        levels[name] = fitted
        if missing:
            empty[name] = tuple(missing)
            logger.warning("模态%s的类别%s权重为零，沿用原码本值", name, missing)
    return IntensityCodebook(levels, empty)


def reconstruct_image(fused: CategoricalField, codebook: IntensityCodebook, modality: str,
                      inverse_transform: VectorField) -> ImageField:
    """f(z;θ_j)∘φ_j⁻¹：公共空间解码后映射回原图像空间"""
    return warp(decode(fused, codebook, modality), inverse_transform, 'linear')


def counterfactual_reconstruct(z: CategoricalField, codebook: IntensityCodebook, modality: str,
                               remove_class: Optional[int] = None,
                               transform: Optional[VectorField] = None) -> CounterfactualResult:
    """反事实重建

    remove_class: do(z_k = 0)，剩余质量逐体素重新归一化后解码；
    transform: 比较 f(z∘φ) 与 f(z)∘φ（最近邻形变）。
    """
    if (remove_class is None) == (transform is None):
        raise InvalidInputError("必须且只能指定一种干预")
    if transform is not None:
        factual = warp(decode(z, codebook, modality), transform, 'nearest')
        counterfactual = decode(warp(z, transform, 'nearest'), codebook, modality)
    else:
        k = z.num_classes
        if not 0 <= remove_class < k:
            raise InvalidInputError(f"类别编号{remove_class}超出范围[0, {k})")
        weights = z.probs.copy()
        weights[remove_class] = 0.0
        total = weights.sum(axis=0, keepdims=True)
        others = np.ones(k)
        others[remove_class] = 0.0
        uniform = (others / (k - 1)).reshape((k,) + (1,) * z.grid.ndim)
        probs = np.where(total > 0, weights / np.where(total > 0, total, 1.0), uniform)
        factual = decode(z, codebook, modality)
        counterfactual = decode(CategoricalField(z.grid, probs), codebook, modality)
    difference = ImageField(z.grid, counterfactual.values - factual.values)
    return CounterfactualResult(factual, counterfactual, difference)
