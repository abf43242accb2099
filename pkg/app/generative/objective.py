#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
目标函数模块
拉普拉斯似然、速度场先验KL与加权证据下界（ELBO）
所有常数项均已略去
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple, Union

import numpy as np

from app.config import LAPLACE_SCALE, LOSS_WEIGHTS, PRIOR_LAMBDA
from app.errors import ConfigError, GridMismatchError, InvalidInputError
from app.grid import GridSpec, ImageField, VectorField

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LikelihoodConfig:
    b: float = LAPLACE_SCALE

    def __post_init__(self):
        if not self.b > 0:
            raise ConfigError("likelihood.b", f"必须为正: {self.b}")


@dataclass(frozen=True)
class VelocityPriorConfig:
    """先验精度 λ(D − A)，邻域为网格上的2d连通"""
    lam: float = PRIOR_LAMBDA

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError("prior.lam", f"必须为正: {self.lam}")


@dataclass(frozen=True)
class LossWeights:
    reconstruction: float = LOSS_WEIGHTS[0]
    structure: float = LOSS_WEIGHTS[1]
    regularization: float = LOSS_WEIGHTS[2]

    def __post_init__(self):
        for name in ('reconstruction', 'structure', 'regularization'):
            if getattr(self, name) < 0:
                raise ConfigError(f"weights.{name}", "权重不能为负")


@dataclass(frozen=True)
class VelocityKL:
    """速度场KL分项：总值 = ½(trace + log_det + quadratic)"""
    trace: float
    log_det: float
    quadratic: float

    @property
    def total(self) -> float:
        return 0.5 * (self.trace + self.log_det + self.quadratic)


@dataclass(frozen=True)
class ObjectiveTerms:
    """组状态中参与ELBO的原始量

    loglik[j]为第j幅图像的重建对数似然，structural[l]为第l层内在距离，
    velocity_kl[l][j]为第l层第j幅图像的速度KL。
    """
    loglik: Tuple[float, ...]
    structural: Tuple[float, ...]
    velocity_kl: Tuple[Tuple[float, ...], ...]


@dataclass(frozen=True)
class ElboBreakdown:
    reconstruction: float
    structure: float
    regularization: float
    structure_per_level: Tuple[float, ...]
    regularization_per_level: Tuple[float, ...]
    extras: Dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.reconstruction + self.structure + self.regularization

    @property
    def loss(self) -> float:
        return -self.total


def laplace_loglik(u: ImageField, reconstruction: ImageField, cfg: LikelihoodConfig) -> float:
    """−Σ|u − rec| / b"""
    if u.grid != reconstruction.grid:
        raise GridMismatchError("似然: 网格不一致")
    return -float(np.sum(np.abs(u.values - reconstruction.values))) / cfg.b


def grid_degree(grid: GridSpec) -> np.ndarray:
    """2d连通网格图上每个节点的度"""
    degree = np.zeros(grid.dims)
    for axis, n in enumerate(grid.dims):
        shape = [1] * grid.ndim
        shape[axis] = n
        per_axis = np.full(n, 2.0)
        per_axis[0] = per_axis[-1] = 1.0
        degree = degree + per_axis.reshape(shape)
    return degree


def laplacian_quadratic(mu: VectorField) -> float:
    """Σ_r Σ_{q∈N(r)} ‖μ[r] − μ[q]‖² / 2，即 μᵀLμ（对各分量求和）"""
    total = 0.0
    for axis in range(mu.grid.ndim):
        total += float(np.sum(np.diff(mu.vectors, axis=axis + 1) ** 2))
    return total


def velocity_prior_kl(mu: VectorField, sigma_diag: Union[ImageField, np.ndarray],
                      cfg: VelocityPriorConfig) -> VelocityKL:
    """½[tr(λDΣ − log Σ) + (λ/2)Σ_r Σ_{q∈N(r)}(μ[r]−μ[q])²]

    sigma_diag为逐体素方差，可为ImageField（各分量共享）或形状 (d, *dims) 的数组。
    """
    grid = mu.grid
    if isinstance(sigma_diag, ImageField):
        if sigma_diag.grid != grid:
            raise GridMismatchError("速度KL: 方差场网格不一致")
        sigma = sigma_diag.values
    else:
        sigma = np.asarray(sigma_diag, dtype=np.float64)
    sigma = np.broadcast_to(sigma, (grid.ndim,) + grid.dims)
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        raise InvalidInputError("速度方差必须为正")
    degree = grid_degree(grid)
    trace = float(np.sum(cfg.lam * degree * sigma))
    log_det = -float(np.sum(np.log(sigma)))
    quadratic = cfg.lam * laplacian_quadratic(mu)
    return VelocityKL(trace, log_det, quadratic)


def assemble_elbo(terms: ObjectiveTerms, weights: LossWeights) -> ElboBreakdown:
    """ELBO = w_rec·Σ loglik − w_str·Σ_l D̃_l − w_reg·Σ KL_v，各层等权"""
    reconstruction = weights.reconstruction * float(np.sum(terms.loglik))
    structure_per_level = tuple(-weights.structure * s for s in terms.structural)
    regularization_per_level = tuple(-weights.regularization * float(np.sum(level))
                                     for level in terms.velocity_kl)
    return ElboBreakdown(
        reconstruction=reconstruction,
        structure=float(np.sum(structure_per_level)),
        regularization=float(np.sum(regularization_per_level)),
        structure_per_level=structure_per_level,
        regularization_per_level=regularization_per_level,
    )
