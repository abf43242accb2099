#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
网格场数据模块
规则网格上的标量图像、向量场、类别概率场和标签场容器
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from app.config import DEFAULT_SPACING, SIMPLEX_TOL
from app.errors import GridMismatchError, InvalidInputError


@dataclass(frozen=True)
class GridSpec:
    """规则网格描述：各轴体素数与物理间距"""
    dims: Tuple[int, ...]
    spacing: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) not in (2, 3):
            raise InvalidInputError(f"网格维数必须为2或3，实际为{len(dims)}")
        if any(n < 2 for n in dims):
            raise InvalidInputError(f"每个轴至少需要2个体素: {dims}")
        if self.spacing is None:
            spacing = (DEFAULT_SPACING,) * len(dims)
        else:
            spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != len(dims):
            raise InvalidInputError(f"间距长度{len(spacing)}与维数{len(dims)}不一致")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise InvalidInputError(f"间距必须为正: {spacing}")
        object.__setattr__(self, 'dims', dims)
        object.__setattr__(self, 'spacing', spacing)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def coarsen(self, factor: int) -> 'GridSpec':
        """按整数因子降采样后的网格"""
        return GridSpec(
            tuple(n // factor for n in self.dims),
            tuple(s * factor for s in self.spacing),
        )


def _check_finite(array: np.ndarray, what: str):
    if not np.all(np.isfinite(array)):
        raise InvalidInputError(f"{what}包含非有限值")


@dataclass(frozen=True, eq=False)
class ImageField:
    """标量强度图像"""
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != self.grid.dims:
            raise InvalidInputError(f"图像形状{values.shape}与网格{self.grid.dims}不一致")
        _check_finite(values, "图像")
        object.__setattr__(self, 'values', values)

    @classmethod
    def constant(cls, grid: GridSpec, value: float = 0.0) -> 'ImageField':
        return cls(grid, np.full(grid.dims, float(value)))


@dataclass(frozen=True, eq=False)
class VectorField:
    """逐体素d维向量场（体素单位），用于速度场与位移场

    数组布局为 (d, *dims)，第i个分量对应数组第i个轴。
    """
    grid: GridSpec
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        expected = (self.grid.ndim,) + self.grid.dims
        if vectors.shape != expected:
            raise InvalidInputError(f"向量场形状{vectors.shape}应为{expected}")
        _check_finite(vectors, "向量场")
        object.__setattr__(self, 'vectors', vectors)

    @classmethod
    def zeros(cls, grid: GridSpec) -> 'VectorField':
        return cls(grid, np.zeros((grid.ndim,) + grid.dims))

    @classmethod
    def uniform(cls, grid: GridSpec, vector: Sequence[float]) -> 'VectorField':
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (grid.ndim,):
            raise InvalidInputError(f"均匀向量长度应为{grid.ndim}")
        shape = (grid.ndim,) + (1,) * grid.ndim
        return cls(grid, np.broadcast_to(vector.reshape(shape), (grid.ndim,) + grid.dims))

    def norm(self) -> np.ndarray:
        """逐体素欧氏范数"""
        return np.sqrt(np.sum(self.vectors ** 2, axis=0))

    def max_norm(self) -> float:
        return float(np.max(self.norm()))

    def __add__(self, other: 'VectorField') -> 'VectorField':
        if other.grid != self.grid:
            raise GridMismatchError("向量场相加时网格不一致")
        return VectorField(self.grid, self.vectors + other.vectors)

    def __neg__(self) -> 'VectorField':
        return VectorField(self.grid, -self.vectors)

    def scaled(self, factor: float) -> 'VectorField':
        return VectorField(self.grid, self.vectors * factor)


@dataclass(frozen=True, eq=False)
class CategoricalField:
    """逐体素K类概率单纯形，数组布局为 (K, *dims)"""
    grid: GridSpec
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != self.grid.ndim + 1 or probs.shape[1:] != self.grid.dims:
            raise InvalidInputError(f"概率场形状{probs.shape}与网格{self.grid.dims}不一致")
        if probs.shape[0] < 2:
            raise InvalidInputError("类别数K至少为2")
        _check_finite(probs, "概率场")
        if np.any(probs < -SIMPLEX_TOL) or np.any(probs > 1 + SIMPLEX_TOL):
            raise InvalidInputError("概率值超出[0,1]")
        if np.max(np.abs(probs.sum(axis=0) - 1.0)) > SIMPLEX_TOL:
            raise InvalidInputError("概率在某些体素上不归一")
        object.__setattr__(self, 'probs', probs)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @classmethod
    def uniform(cls, grid: GridSpec, num_classes: int) -> 'CategoricalField':
        return cls(grid, np.full((num_classes,) + grid.dims, 1.0 / num_classes))

    @classmethod
    def from_labels(cls, labels: 'LabelField', num_classes: Optional[int] = None) -> 'CategoricalField':
        """由整数标签构造独热概率场"""
        k = num_classes or labels.num_labels
        onehot = (np.arange(k).reshape((k,) + (1,) * labels.grid.ndim) == labels.labels[None])
        return cls(labels.grid, onehot.astype(np.float64))

    @classmethod
    def normalized(cls, grid: GridSpec, weights: np.ndarray) -> 'CategoricalField':
        """对非负权重逐体素归一化后构造"""
        weights = np.clip(np.asarray(weights, dtype=np.float64), 0.0, None)
        total = weights.sum(axis=0, keepdims=True)
        k = weights.shape[0]
        safe = np.where(total > 0, weights / np.where(total > 0, total, 1.0), 1.0 / k)
        return cls(grid, safe)

    def hard_labels(self) -> 'LabelField':
        return LabelField(self.grid, np.argmax(self.probs, axis=0), self.num_classes)


@dataclass(frozen=True, eq=False)
class LabelField:
    """整数标签图，取值范围 [0, num_labels)"""
    grid: GridSpec
    labels: np.ndarray
    num_labels: int = field(default=2)

    def __post_init__(self):
        labels = np.array(self.labels)
        if labels.shape != self.grid.dims:
            raise InvalidInputError(f"标签形状{labels.shape}与网格{self.grid.dims}不一致")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise InvalidInputError("标签必须为整数")
        labels = labels.astype(np.int64)
        if np.any(labels < 0) or np.any(labels >= self.num_labels):
            raise InvalidInputError(f"标签超出范围[0, {self.num_labels})")
        object.__setattr__(self, 'labels', labels)

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def foreground(self) -> np.ndarray:
        return self.labels > 0
