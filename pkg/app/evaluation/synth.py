#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
合成数据模块
三次B样条自由形变（FFD）与多模态椭圆结节体模
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from app.config import (
    FFD_BOUND,
    FFD_SPACING,
    PHANTOM_BLUR,
    PHANTOM_CODEBOOKS,
    PHANTOM_NOISE,
    PHANTOM_SHAPE,
)
from app.errors import ConfigError, InvalidInputError, ModalityError
from app.grid import GridSpec, ImageField, LabelField, VectorField, warp

logger = logging.getLogger(__name__)

# 体模标签：0背景，1主体，2外壁环，3腔室，4-7结节
PHANTOM_LABELS = 8
BODY_SEMI_AXIS = 0.42
WALL_BAND = (0.78, 0.9)
CAVITY_RADIUS = 0.3
INCLUSION_SPACING = 0.125
INCLUSION_RADIUS = 0.3
INCLUSION_BAND = (0.38, 0.68)


@dataclass(frozen=True)
class FfdSpec:
    """随机FFD参数：控制点间距（体素）与控制点位移上限"""
    spacing: float = FFD_SPACING
    bound: float = FFD_BOUND
    seed: int = 0

    def __post_init__(self):
        if self.spacing < 2:
            raise ConfigError("synth.ffd.spacing", f"控制点间距至少为2体素: {self.spacing}")
        if not 0 <= self.bound < self.spacing / 2:
            raise ConfigError("synth.ffd.bound", f"位移上限必须在[0, spacing/2)内: {self.bound}")


@dataclass
class PhantomGroup:
    """合成组：images[j]由解剖经transforms[j]形变得到，labels[j]与之同步"""
    images: List[ImageField]
    modalities: List[str]
    labels: List[LabelField]
    transforms: List[VectorField]
    anatomy: LabelField
    codebooks: Dict[str, Tuple[float, ...]]

    @property
    def foreground(self) -> np.ndarray:
        """未形变解剖中所有非零标签的并集"""
        return self.anatomy.foreground()

    @property
    def size(self) -> int:
        return len(self.images)


def _bspline_basis(u: np.ndarray) -> np.ndarray:
    """均匀三次B样条的4个基函数，形状 (4, len(u))"""
    return np.stack([
        (1 - u) ** 3 / 6.0,
        (3 * u ** 3 - 6 * u ** 2 + 4) / 6.0,
        (-3 * u ** 3 + 3 * u ** 2 + 3 * u + 1) / 6.0,
        u ** 3 / 6.0,
    ])


def bspline_weights(n: int, spacing: float) -> np.ndarray:
    """把控制点系数映射到n个体素的插值矩阵，控制点k位于 (k−1)·spacing"""
    t = np.arange(n, dtype=np.float64) / spacing
    base = np.floor(t).astype(int)
    u = t - base
    controls = int(base.max()) + 4
    weights = np.zeros((n, controls))
    basis = _bspline_basis(u)
    for m in range(4):
        weights[np.arange(n), base + m] += basis[m]
    return weights


def _tensor_product(matrices: Sequence[np.ndarray], coefficients: np.ndarray) -> np.ndarray:
    letters = 'abc'[:len(matrices)]
    controls = 'ijk'[:len(matrices)]
    spec = ','.join(f"{a}{i}" for a, i in zip(letters, controls)) + f",{controls}->{letters}"
    return np.einsum(spec, *matrices, coefficients)


def random_ffd(spec: FfdSpec, grid: GridSpec, seed: Optional[int] = None) -> VectorField:
    """控制点位移服从 U[−bound, bound]，三次B样条插值为稠密位移场"""
    if spec.bound == 0:
        return VectorField.zeros(grid)
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    matrices = [bspline_weights(n, spec.spacing) for n in grid.dims]
    control_shape = tuple(m.shape[1] for m in matrices)
    components = [
        _tensor_product(matrices, rng.uniform(-spec.bound, spec.bound, size=control_shape))
        for _ in range(grid.ndim)
    ]
    return VectorField(grid, np.stack(components, axis=0))


def make_anatomy(grid: GridSpec) -> LabelField:
    """椭圆解剖：主体、外壁环、中央腔室与按格点排布的四类小结节

    结节中心位于以图像中心为原点、间距INCLUSION_SPACING×最短轴的格点上，
    只保留椭圆半径在INCLUSION_BAND内的格点；类别按格点坐标的加权和模4交错。
    """
    coords = np.indices(grid.dims, dtype=np.float64)
    dims = np.array(grid.dims, dtype=np.float64)
    shape = (-1,) + (1,) * grid.ndim
    centre = ((dims - 1) / 2.0).reshape(shape)
    semi = (BODY_SEMI_AXIS * dims).reshape(shape)

    r = np.sqrt(np.sum(((coords - centre) / semi) ** 2, axis=0))
    labels = np.zeros(grid.dims, dtype=np.int64)
    labels[r < 1.0] = 1
    labels[(r >= WALL_BAND[0]) & (r < WALL_BAND[1])] = 2
    labels[r < CAVITY_RADIUS] = 3

    spacing = INCLUSION_SPACING * float(dims.min())
    lattice = np.rint((coords - centre) / spacing)
    node = centre + spacing * lattice
    node_r = np.sqrt(np.sum(((node - centre) / semi) ** 2, axis=0))
    inside = (np.sqrt(np.sum((coords - node) ** 2, axis=0)) < INCLUSION_RADIUS * spacing)
    inside &= (node_r >= INCLUSION_BAND[0]) & (node_r < INCLUSION_BAND[1])
    weights = np.arange(1, grid.ndim + 1).reshape(shape)
    kind = np.mod(np.sum(lattice * weights, axis=0).astype(np.int64), 4)
    labels[inside] = 4 + kind[inside]
    return LabelField(grid, labels, PHANTOM_LABELS)


def render(anatomy: LabelField, codebook: Sequence[float], blur: float = 0.0) -> ImageField:
    """按码本渲染标签图，可选高斯模糊"""
    levels = np.asarray(codebook, dtype=np.float64)
    if levels.size != anatomy.num_labels:
        raise InvalidInputError(f"码本长度{levels.size}与标签数{anatomy.num_labels}不一致")
    values = levels[anatomy.labels]
    if blur > 0:
        values = ndimage.gaussian_filter(values, blur, mode='nearest')
    return ImageField(anatomy.grid, values)


def make_phantom_group(shape: Sequence[int] = PHANTOM_SHAPE,
                       modalities: Sequence[str] = ('m0', 'm1', 'm2'),
                       codebooks: Sequence[Sequence[float]] = PHANTOM_CODEBOOKS,
                       noise: float = PHANTOM_NOISE, ffd: FfdSpec = FfdSpec(),
                       seed: int = 0, repeats: int = 1, blur: float = PHANTOM_BLUR) -> PhantomGroup:
    """生成多模态体模组

    每幅图像：渲染 → 模糊 → 独立随机FFD形变 → 加高斯噪声。
    标签总用最近邻；不模糊时图像也用最近邻，保持分段常数。
    """
    modalities = list(modalities)
    if len(modalities) < 2:
        raise ModalityError("体模组至少需要两种模态")
    if len(set(modalities)) != len(modalities):
        raise ModalityError("模态名称重复")
    if len(codebooks) < len(modalities):
        raise InvalidInputError(f"码本数量{len(codebooks)}少于模态数量{len(modalities)}")
    if noise < 0:
        raise InvalidInputError(f"噪声标准差不能为负: {noise}")
    if repeats < 1:
        raise InvalidInputError(f"重复次数至少为1: {repeats}")

    grid = GridSpec(tuple(shape))
    anatomy = make_anatomy(grid)
    rng = np.random.default_rng(seed)
    renders = {m: render(anatomy, codebooks[i], blur) for i, m in enumerate(modalities)}
    method = 'linear' if blur > 0 else 'nearest'

    images, tags, labels, transforms = [], [], [], []
    for _ in range(repeats):
        for m in modalities:
            transform = random_ffd(ffd, grid, seed=int(rng.integers(2 ** 32)))
            warped = warp(renders[m], transform, method)
            values = warped.values
            if noise > 0:
                values = values + rng.normal(0.0, noise, size=grid.dims)
            images.append(ImageField(grid, values))
            tags.append(m)
            labels.append(warp(anatomy, transform, 'nearest'))
            transforms.append(transform)
    logger.info("体模组已生成: %d幅图像, 模态=%s", len(images), modalities)
    return PhantomGroup(images, tags, labels, transforms, anatomy,
                        {m: tuple(codebooks[i]) for i, m in enumerate(modalities)})


def merge_groups(groups: Sequence[PhantomGroup]) -> PhantomGroup:
    """把若干组合并为一个更大的组（解剖须一致）"""
    if not groups:
        raise InvalidInputError("没有可合并的组")
    anatomy = groups[0].anatomy
    merged = PhantomGroup([], [], [], [], anatomy, dict(groups[0].codebooks))
    for group in groups:
        if group.anatomy.grid != anatomy.grid or not np.array_equal(group.anatomy.labels, anatomy.labels):
            raise InvalidInputError("合并的组解剖不一致")
        merged.images.extend(group.images)
        merged.modalities.extend(group.modalities)
        merged.labels.extend(group.labels)
        merged.transforms.extend(group.transforms)
        merged.codebooks.update(group.codebooks)
    return merged
