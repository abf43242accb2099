#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
稳态速度场代数模块
指数映射（缩放平方法）、复合、求逆、零均值约束与多层聚合
"""

import logging
import math
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from app.config import PYRAMID_FACTOR
from app.errors import GridMismatchError, InvalidInputError
from app.grid import GridSpec, VectorField, identity_grid, resample
from app.grid.ops import _sample

logger = logging.getLogger(__name__)

# 缩放后单步位移的上限（体素）
MAX_SCALED_STEP = 0.0625


@dataclass
class VelocitySet:
    """逐图像、逐层的速度场 v_j^l

    fields[l][j] 为第 l 层（0 为最粗层）第 j 幅图像的速度场，
    grids[l] 为该层网格。
    """
    grids: List[GridSpec]
    fields: List[List[VectorField]]

    def __post_init__(self):
        if not self.grids:
            raise InvalidInputError("层数L至少为1")
        if len(self.fields) != len(self.grids):
            raise InvalidInputError("速度场层数与网格层数不一致")
        counts = {len(level) for level in self.fields}
        if len(counts) != 1 or counts.pop() < 2:
            raise InvalidInputError("每层必须包含相同数量且至少2个速度场")
        for l, (grid, level) in enumerate(zip(self.grids, self.fields)):
            for v in level:
                if v.grid != grid:
                    raise GridMismatchError(f"第{l + 1}层速度场网格与层网格不一致")

    @property
    def num_levels(self) -> int:
        return len(self.grids)

    @property
    def num_images(self) -> int:
        return len(self.fields[0])

    @property
    def finest(self) -> GridSpec:
        return self.grids[-1]

    @classmethod
    def zeros(cls, grids: Sequence[GridSpec], num_images: int) -> 'VelocitySet':
        return cls(list(grids), [[VectorField.zeros(g) for _ in range(num_images)] for g in grids])

    def with_level(self, level: int, fields: Sequence[VectorField]) -> 'VelocitySet':
        """替换某一层速度场，返回新的集合"""
        new_fields = [list(f) for f in self.fields]
        new_fields[level] = list(fields)
        return VelocitySet(list(self.grids), new_fields)

    def permuted(self, order: Sequence[int]) -> 'VelocitySet':
        return VelocitySet(list(self.grids), [[level[j] for j in order] for level in self.fields])


@dataclass
class TransformSet:
    """最细网格上的正向 φ_j 与逆向 φ_j⁻¹ 位移场"""
    forward: List[VectorField]
    inverse: List[VectorField]

    def __post_init__(self):
        if len(self.forward) != len(self.inverse):
            raise InvalidInputError("正向与逆向变换数量不一致")


def _compose_arrays(a: np.ndarray, b: np.ndarray, grid: GridSpec) -> np.ndarray:
    """(a∘b)(ω) = a(ω + b(ω)) + b(ω)，数组版本"""
    if not np.any(b):
        return a.copy()
    coords = identity_grid(grid) + b
    return _sample(a, coords, 1) + b


def compose(a: VectorField, b: VectorField) -> VectorField:
    """复合两个位移场 (a∘b)(ω) = a(ω + b(ω)) + b(ω)"""
    if a.grid != b.grid:
        raise GridMismatchError(f"compose: 网格不一致 {a.grid.dims} vs {b.grid.dims}")
    return VectorField(a.grid, _compose_arrays(a.vectors, b.vectors, a.grid))


def auto_steps(v: VectorField) -> int:
    """自动选择平方次数，使缩放后的单步位移不超过0.5体素"""
    peak = v.max_norm()
    if peak <= 0:
        return 2
    return max(2, int(math.ceil(math.log2(peak / MAX_SCALED_STEP))))


def exponentiate(v: VectorField, steps: Union[int, str] = 'auto') -> VectorField:
    """缩放平方法计算 exp(v) 的位移场

    u₀ = v / 2^T，再做 T 次自复合。
    """
    if steps == 'auto':
        steps = auto_steps(v)
    if not isinstance(steps, (int, np.integer)) or steps < 1:
        raise InvalidInputError(f"平方次数必须为正整数: {steps}")
    u = v.vectors / (2.0 ** steps)
    if not np.any(u):
        return VectorField(v.grid, u)
    for _ in range(int(steps)):
        u = _compose_arrays(u, u, v.grid)
    return VectorField(v.grid, u)


def invert(v: VectorField, steps: Union[int, str] = 'auto') -> VectorField:
    """利用稳态速度场的群结构 exp(v)⁻¹ = exp(-v)"""
    return exponentiate(-v, steps)


def center_velocities(totals: Sequence[VectorField]) -> List[VectorField]:
    """零均值约束：v_j ← v_j − (1/N)Σ v_j"""
    if not totals:
        raise InvalidInputError("速度场列表为空")
    if len(totals) < 2:
        raise InvalidInputError("零均值约束至少需要2个速度场")
    grid = totals[0].grid
    for v in totals:
        if v.grid != grid:
            raise GridMismatchError("center_velocities: 网格不一致")
    stack = np.stack([v.vectors for v in totals], axis=0)
    mean = stack.mean(axis=0)
    return [VectorField(grid, s - mean) for s in stack]


def build_pyramid(finest: GridSpec, levels: int, factor: int = PYRAMID_FACTOR) -> List[GridSpec]:
    """由最细网格构造由粗到细的金字塔网格"""
    if levels < 1:
        raise InvalidInputError(f"层数L至少为1: {levels}")
    scale = factor ** (levels - 1)
    if any(n % scale for n in finest.dims):
        raise InvalidInputError(f"网格{finest.dims}不能构成{levels}层金字塔（需被{scale}整除）")
    grids = [finest.coarsen(factor ** (levels - 1 - l)) for l in range(levels)]
    if any(n < 2 for n in grids[0].dims):
        raise InvalidInputError(f"最粗层网格过小: {grids[0].dims}")
    return grids


def check_pyramid(grids: Sequence[GridSpec]):
    """检查层网格由粗到细单调"""
    for coarse, fine in zip(grids[:-1], grids[1:]):
        if coarse.ndim != fine.ndim or any(c > f for c, f in zip(coarse.dims, fine.dims)):
            raise InvalidInputError(f"金字塔不一致: {coarse.dims} -> {fine.dims}")


def aggregate_levels(vset: VelocitySet) -> List[VectorField]:
    """v_j⁺ = Σ_l 上采样到最细层的 v_j^l"""
    check_pyramid(vset.grids)
    finest = vset.finest
    totals = []
    for j in range(vset.num_images):
        total = np.zeros((finest.ndim,) + finest.dims)
        for level in vset.fields:
            total += resample(level[j], finest).vectors
        totals.append(VectorField(finest, total))
    return totals


def transforms_from_totals(totals: Sequence[VectorField], steps: Union[int, str] = 'auto',
                           executor: Optional[Executor] = None) -> TransformSet:
    """正向 exp(v⁺) 与逆向 exp(−v⁺)"""
    mapper = executor.map if executor is not None else map
    forward = list(mapper(lambda v: exponentiate(v, steps), totals))
    inverse = list(mapper(lambda v: invert(v, steps), totals))
    return TransformSet(forward, inverse)


def transforms_from_velocities(vset: VelocitySet, steps: Union[int, str] = 'auto',
                               executor: Optional[Executor] = None) -> TransformSet:
    return transforms_from_totals(aggregate_levels(vset), steps, executor)
