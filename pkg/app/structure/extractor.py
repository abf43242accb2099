#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
单视图结构提取模块
逐模态在体素强度上拟合一维高斯混合（EM），以混合后验作为单视图类别后验
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from app.config import (
    EM_ITERS,
    EM_MAX_SAMPLES,
    EM_TOL,
    EM_VARIANCE_FLOOR,
    FORMAT_VERSION,
    PROB_FLOOR,
)
from app.errors import (
    ContainerFormatError,
    DegenerateImageError,
    InvalidInputError,
    ModalityError,
)
from app.grid import CategoricalField, GridSpec, ImageField, pool, resample

logger = logging.getLogger(__name__)

# 初始均值所在的强度区间（两端分位数）
INIT_RANGE_QUANTILES = (0.005, 0.995)

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class ModalityMixture:
    """单个模态的一维高斯混合参数"""
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    log_likelihoods: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        means = np.array(self.means, dtype=np.float64).ravel()
        variances = np.array(self.variances, dtype=np.float64).ravel()
        weights = np.array(self.weights, dtype=np.float64).ravel()
        if not (means.size == variances.size == weights.size) or means.size < 2:
            raise InvalidInputError("混合参数长度不一致或类别数小于2")
        if not np.all(np.isfinite(means)):
            raise InvalidInputError("混合均值包含非有限值")
        if np.any(variances <= 0) or not np.all(np.isfinite(variances)):
            raise InvalidInputError("混合方差必须为正")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise InvalidInputError("混合权重不在单纯形上")
        object.__setattr__(self, 'means', means)
        object.__setattr__(self, 'variances', variances)
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'log_likelihoods', tuple(float(x) for x in self.log_likelihoods))

    @property
    def num_classes(self) -> int:
        return self.means.size

    def log_joint(self, values: np.ndarray) -> np.ndarray:
        """log π_k + log N(x | m_k, s_k)，形状 (K, *values.shape)"""
        x = np.asarray(values, dtype=np.float64)[None]
        shape = (-1,) + (1,) * (x.ndim - 1)
        means = self.means.reshape(shape)
        variances = self.variances.reshape(shape)
        with np.errstate(divide='ignore'):
            log_weights = np.log(self.weights).reshape(shape)
        return log_weights - 0.5 * (_LOG_2PI + np.log(variances) + (x - means) ** 2 / variances)

    def responsibilities(self, values: np.ndarray) -> np.ndarray:
        log_p = self.log_joint(values)
        return np.exp(log_p - logsumexp(log_p, axis=0, keepdims=True))

    def permuted(self, order: Sequence[int]) -> 'ModalityMixture':
        order = np.asarray(order)
        return ModalityMixture(self.means[order], self.variances[order], self.weights[order],
                               self.log_likelihoods)


@dataclass(frozen=True)
class ViewExtractorParams:
    """所有模态的提取器参数；各模态共享类别数K且类别编号已对齐"""
    num_classes: int
    mixtures: Dict[str, ModalityMixture]
    floor: float = PROB_FLOOR

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidInputError(f"类别数K至少为2: {self.num_classes}")
        if not 0 < self.floor < 1.0 / self.num_classes:
            raise InvalidInputError(f"概率下限ε超出范围: {self.floor}")
        for name, mixture in self.mixtures.items():
            _check_modality_name(name)
            if mixture.num_classes != self.num_classes:
                raise InvalidInputError(f"模态{name}的类别数与K不一致")

    @property
    def modalities(self) -> List[str]:
        return list(self.mixtures)

    def mixture(self, modality: str) -> ModalityMixture:
        if modality not in self.mixtures:
            raise ModalityError(f"未知模态: {modality}（已拟合: {', '.join(self.mixtures)}）")
        return self.mixtures[modality]

    def to_text(self) -> str:
        """纯文本键值文档，浮点数以repr保存以保证逐位往返"""
        lines = [
            f"format_version = {FORMAT_VERSION}",
            f"num_classes = {self.num_classes}",
            f"floor = {self.floor!r}",
            f"modalities = {','.join(self.mixtures)}",
        ]
        for name, mixture in self.mixtures.items():
            for key in ('means', 'variances', 'weights'):
                values = ' '.join(repr(float(x)) for x in getattr(mixture, key))
                lines.append(f"{name}.{key} = {values}")
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text: str) -> 'ViewExtractorParams':
        entries = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ContainerFormatError(f"第{number}行缺少'='", section='extractor')
            key, value = (part.strip() for part in line.split('=', 1))
            entries[key] = value

        def take(key: str) -> str:
            if key not in entries:
                raise ContainerFormatError(f"缺少字段{key}", section='extractor')
            return entries[key]

        try:
            version = int(take('format_version'))
            if version != FORMAT_VERSION:
                raise ContainerFormatError(f"不支持的版本{version}", section='extractor')
            num_classes = int(take('num_classes'))
            floor = float(take('floor'))
            names = [n for n in take('modalities').split(',') if n]
            mixtures = {}
            for name in names:
                arrays = [np.array([float(x) for x in take(f"{name}.{key}").split()])
                          for key in ('means', 'variances', 'weights')]
                mixtures[name] = ModalityMixture(*arrays)
        except ValueError as e:
            raise ContainerFormatError(f"提取器参数解析失败: {e}", section='extractor') from e
        return cls(num_classes, mixtures, floor)


def _check_modality_name(name: str):
    if not name or any(ch in name for ch in '.,=\n '):
        raise ModalityError(f"模态名称不合法: {name!r}")


def _initial_mixture(values: np.ndarray, num_classes: int, variance_floor: float):
    """均值在两端分位数之间等距排布，方差取半个间距的平方"""
    lo, hi = np.quantile(values, INIT_RANGE_QUANTILES)
    if hi <= lo:
        lo, hi = float(values.min()), float(values.max())
    means = lo + (hi - lo) * (np.arange(num_classes) + 0.5) / num_classes
    spread = max(((hi - lo) / (2 * num_classes)) ** 2, variance_floor)
    variances = np.full(num_classes, spread)
    weights = np.full(num_classes, 1.0 / num_classes)
    return means, variances, weights


def fit_modality_mixture(values: np.ndarray, num_classes: int, iters: int = EM_ITERS,
                         tol: float = EM_TOL, seed: int = 0,
                         max_samples: int = EM_MAX_SAMPLES) -> ModalityMixture:
    """在一组强度值上用EM拟合一维高斯混合

    方差下限为全局方差乘以EM_VARIANCE_FLOOR；对数似然序列单调不减。
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise InvalidInputError("没有可用于拟合的体素")
    if np.ptp(values) == 0:
        raise DegenerateImageError("常数图像无法拟合强度混合模型")
    distinct = np.unique(values).size
    if distinct < num_classes:
        logger.warning("不同强度值个数(%d)少于类别数K=%d，部分类别将退化", distinct, num_classes)
    if values.size > max_samples:
        rng = np.random.default_rng(seed)
        values = rng.choice(values, size=max_samples, replace=False)

    variance_floor = EM_VARIANCE_FLOOR * float(np.var(values))
    means, variances, weights = _initial_mixture(values, num_classes, variance_floor)
    n = values.size
    lls = []
    for _ in range(iters):
        # E步
        with np.errstate(divide='ignore'):
            log_weights = np.log(weights)[:, None]
        log_p = log_weights - 0.5 * (_LOG_2PI + np.log(variances)[:, None]
                                     + (values[None] - means[:, None]) ** 2 / variances[:, None])
        log_norm = logsumexp(log_p, axis=0)
        lls.append(float(log_norm.sum()))
        resp = np.exp(log_p - log_norm[None])

        # M步
        nk = resp.sum(axis=1)
        alive = nk > 0
        weights = nk / n
        safe_nk = np.where(alive, nk, 1.0)
        means = np.where(alive, resp @ values / safe_nk, means)
        spread = np.einsum('kn,kn->k', resp, (values[None] - means[:, None]) ** 2) / safe_nk
        variances = np.maximum(np.where(alive, spread, variances), variance_floor)

        if len(lls) > 1 and abs(lls[-1] - lls[-2]) <= tol * abs(lls[-2]):
            break
    weights = weights / weights.sum()
    logger.debug("EM完成: %d次迭代, 对数似然 %.6e", len(lls), lls[-1])
    return ModalityMixture(means, variances, weights, tuple(lls))


def _posterior_values(mixture: ModalityMixture, values: np.ndarray, floor: float) -> np.ndarray:
    """混合后验按下限ε做凸组合，保证每个概率 ≥ ε 且和为1"""
    k = mixture.num_classes
    return mixture.responsibilities(values) * (1.0 - k * floor) + floor


def align_classes(mixtures: Dict[str, ModalityMixture],
                  images: Mapping[str, Sequence[ImageField]]) -> Dict[str, ModalityMixture]:
    """以第一个模态为参考，按体素后验共现矩阵匹配其余模态的类别编号

    参考模态的类别按均值升序排列。
    """
    names = list(mixtures)
    reference = names[0]
    ref_mixture = mixtures[reference].permuted(np.argsort(mixtures[reference].means, kind='stable'))
    aligned = {reference: ref_mixture}
    ref_images = list(images[reference])
    for name in names[1:]:
        mixture = mixtures[name]
        cooccurrence = np.zeros((ref_mixture.num_classes, mixture.num_classes))
        for ref_image, image in zip(ref_images, images[name]):
            if image.grid != ref_image.grid:
                image = resample(image, ref_image.grid)
            ref_resp = ref_mixture.responsibilities(ref_image.values).reshape(ref_mixture.num_classes, -1)
            resp = mixture.responsibilities(image.values).reshape(mixture.num_classes, -1)
            cooccurrence += ref_resp @ resp.T
        rows, cols = linear_sum_assignment(cooccurrence, maximize=True)
        order = cols[np.argsort(rows)]
        aligned[name] = mixture.permuted(order)
        logger.debug("模态%s类别对齐: %s", name, order.tolist())
    return aligned


def fit_view_extractor(images: Mapping[str, Sequence[ImageField]], num_classes: int,
                       iters: int = EM_ITERS, seed: int = 0,
                       masks: Optional[Mapping[str, Sequence[np.ndarray]]] = None,
                       floor: float = PROB_FLOOR, threads: int = 1) -> ViewExtractorParams:
    """逐模态拟合强度混合并对齐类别编号"""
    if num_classes < 2:
        raise InvalidInputError(f"类别数K至少为2: {num_classes}")
    if not images:
        raise InvalidInputError("没有提供任何模态的图像")
    for name, group in images.items():
        _check_modality_name(name)
        if not group:
            raise InvalidInputError(f"模态{name}没有图像")

    def pooled_values(name: str) -> np.ndarray:
        group = images[name]
        if masks is None or name not in masks:
            return np.concatenate([img.values.ravel() for img in group])
        return np.concatenate([img.values[np.asarray(m, dtype=bool)]
                               for img, m in zip(group, masks[name])])

    def fit(item):
        index, name = item
        return fit_modality_mixture(pooled_values(name), num_classes, iters, seed=seed + index)

    names = list(images)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_:
            fitted = list(pool_.map(fit, enumerate(names)))
    else:
        fitted = [fit(item) for item in enumerate(names)]
    mixtures = align_classes(dict(zip(names, fitted)), images)
    logger.info("结构提取器拟合完成: 模态=%s, K=%d", names, num_classes)
    return ViewExtractorParams(num_classes, mixtures, floor)


def extract_posterior(image: ImageField, params: ViewExtractorParams, modality: str) -> CategoricalField:
    """单视图类别后验（下限ε后重新归一化）"""
    mixture = params.mixture(modality)
    return CategoricalField(image.grid, _posterior_values(mixture, image.values, params.floor))


def posterior_pyramid(posterior: CategoricalField, grids: Sequence[GridSpec]) -> List[CategoricalField]:
    """平均池化得到由粗到细的多层后验"""
    levels = []
    fine = posterior.grid.dims
    for grid in grids:
        factors = {f // c for f, c in zip(fine, grid.dims)}
        if len(factors) != 1 or any(c * next(iter(factors)) != f for f, c in zip(fine, grid.dims)):
            raise InvalidInputError(f"无法由{fine}池化到{grid.dims}")
        levels.append(pool(posterior, factors.pop()))
    return levels
