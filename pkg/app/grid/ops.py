#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
网格运算模块
插值、形变、空间梯度、雅可比行列式与重采样
所有插值采用边界截断（clamp-to-edge）
"""

from functools import lru_cache
from typing import Tuple, Union

import numpy as np
from scipy import ndimage

from app.errors import GridMismatchError, InvalidInputError
from app.grid.fields import (
    CategoricalField,
    GridSpec,
    ImageField,
    LabelField,
    VectorField,
)

AnyField = Union[ImageField, VectorField, CategoricalField, LabelField]

_MODES = {'linear': 1, 'nearest': 0}


@lru_cache(maxsize=32)
def _identity(dims: Tuple[int, ...]) -> np.ndarray:
    grid = np.indices(dims, dtype=np.float64)
    grid.setflags(write=False)
    return grid


def identity_grid(grid: GridSpec) -> np.ndarray:
    """返回体素坐标网格，形状 (d, *dims)"""
    return _identity(grid.dims)


def _channels(field: AnyField) -> np.ndarray:
    """把任意场统一成 (C, *dims) 的通道数组"""
    if isinstance(field, ImageField):
        return field.values[None]
    if isinstance(field, VectorField):
        return field.vectors
    if isinstance(field, CategoricalField):
        return field.probs
    if isinstance(field, LabelField):
        return field.labels[None].astype(np.float64)
    raise InvalidInputError(f"不支持的场类型: {type(field).__name__}")


def _rebuild(template: AnyField, channels: np.ndarray, grid: GridSpec = None,
             renormalize: bool = True) -> AnyField:
    grid = grid or template.grid
    if isinstance(template, ImageField):
        return ImageField(grid, channels[0])
    if isinstance(template, VectorField):
        return VectorField(grid, channels)
    if isinstance(template, CategoricalField):
        if not renormalize:
            return CategoricalField(grid, channels)
        return CategoricalField.normalized(grid, channels)
    return LabelField(grid, np.rint(channels[0]).astype(np.int64), template.num_labels)


def _sample(channels: np.ndarray, coords: np.ndarray, order: int) -> np.ndarray:
    """在给定坐标处对每个通道插值，越界坐标截断到边界"""
    out = np.empty((channels.shape[0],) + coords.shape[1:], dtype=np.float64)
    for c in range(channels.shape[0]):
        out[c] = ndimage.map_coordinates(channels[c], coords, order=order,
                                         mode='nearest', prefilter=False)
    return out


def interpolate(field: AnyField, point) -> Union[float, np.ndarray]:
    """在体素坐标point处多线性插值

    类别场的采样结果重新归一化到单纯形。
    """
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (field.grid.ndim,):
        raise InvalidInputError(f"坐标维数应为{field.grid.ndim}")
    if not np.all(np.isfinite(point)):
        raise InvalidInputError("坐标包含非有限值")
    order = 0 if isinstance(field, LabelField) else 1
    sample = _sample(_channels(field), point.reshape(-1, 1), order)[:, 0]
    if isinstance(field, ImageField):
        return float(sample[0])
    if isinstance(field, LabelField):
        return int(round(sample[0]))
    if isinstance(field, CategoricalField):
        return sample / sample.sum()
    return sample


def _require_same_grid(a: GridSpec, b: GridSpec, what: str):
    if a != b:
        raise GridMismatchError(f"{what}: 网格不一致 {a.dims} vs {b.dims}")


def warp(field: AnyField, transform: VectorField, mode: str = 'linear') -> AnyField:
    """output(ω) = field(ω + transform(ω))

    零位移直接返回输入的逐位拷贝；标签场总是使用最近邻；
    类别场在线性插值后重新归一化。
    """
    if mode not in _MODES:
        raise InvalidInputError(f"未知插值方式: {mode}")
    _require_same_grid(field.grid, transform.grid, "warp")
    if not np.any(transform.vectors):
        return _rebuild(field, _channels(field).copy(), renormalize=False)
    order = 0 if isinstance(field, LabelField) else _MODES[mode]
    coords = identity_grid(field.grid) + transform.vectors
    # 最近邻采样只复制已有值，无需再归一化
    return _rebuild(field, _sample(_channels(field), coords, order), renormalize=order == 1)


def _axis_gradients(array: np.ndarray) -> np.ndarray:
    """中心差分（边界单侧差分），返回 (d, *shape)"""
    return np.stack(np.gradient(array, edge_order=1), axis=0)


def gradient(field: Union[ImageField, CategoricalField]) -> Union[VectorField, np.ndarray]:
    """空间梯度

    图像返回VectorField；类别场返回形状 (K, d, *dims) 的数组。
    """
    if isinstance(field, ImageField):
        return VectorField(field.grid, _axis_gradients(field.values))
    if isinstance(field, CategoricalField):
        return np.stack([_axis_gradients(p) for p in field.probs], axis=0)
    raise InvalidInputError(f"不支持对{type(field).__name__}求梯度")


def jacobian_determinant(transform: VectorField) -> ImageField:
    """det(I + ∇u)，逐体素"""
    d = transform.grid.ndim
    # jac[i, j] = ∂u_i/∂x_j
    jac = np.stack([_axis_gradients(transform.vectors[i]) for i in range(d)], axis=0)
    jac = jac + np.eye(d).reshape((d, d) + (1,) * d)
    moved = np.moveaxis(jac, (0, 1), (-2, -1))
    return ImageField(transform.grid, np.linalg.det(moved))


def resample(field: AnyField, target: GridSpec) -> AnyField:
    """多线性重采样到目标网格（体素中心对齐）

    位移/速度场的分量按各轴网格尺寸比例缩放。
    """
    source = field.grid
    if source.ndim != target.ndim:
        raise InvalidInputError(f"维数不一致: {source.ndim} vs {target.ndim}")
    if source == target:
        return _rebuild(field, _channels(field).copy(), renormalize=False)
    axes = [
        (np.arange(tn, dtype=np.float64) + 0.5) * (sn / tn) - 0.5
        for sn, tn in zip(source.dims, target.dims)
    ]
    coords = np.stack(np.meshgrid(*axes, indexing='ij'), axis=0)
    order = 0 if isinstance(field, LabelField) else 1
    channels = _sample(_channels(field), coords, order)
    if isinstance(field, VectorField):
        ratios = np.array([tn / sn for sn, tn in zip(source.dims, target.dims)])
        channels = channels * ratios.reshape((-1,) + (1,) * target.ndim)
    return _rebuild(field, channels, target)


def pool(field: AnyField, factor: int) -> AnyField:
    """按整数因子平均池化降采样

    类别场重新归一化，向量场分量除以因子（保持体素单位）。
    """
    if factor == 1:
        return _rebuild(field, _channels(field).copy(), renormalize=False)
    if isinstance(field, LabelField):
        raise InvalidInputError("标签场不支持平均池化")
    dims = field.grid.dims
    if any(n % factor for n in dims):
        raise InvalidInputError(f"网格{dims}不能被因子{factor}整除")
    target = field.grid.coarsen(factor)
    channels = _channels(field)
    shape = [channels.shape[0]]
    for n in target.dims:
        shape.extend([n, factor])
    pooled = channels.reshape(shape).mean(axis=tuple(range(2, 2 * target.ndim + 1, 2)))
    if isinstance(field, VectorField):
        pooled = pooled / factor
    return _rebuild(field, pooled, target)
