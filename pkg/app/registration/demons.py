#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Demons配准模块
在概率图上计算对称Demons力，按最大范数归一化并做流体平滑
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from app.config import (
    ALPHA0_BASE,
    ALPHA_FRACTION,
    FLUID_SIGMA,
    FORCE_TOL,
    PYRAMID_FACTOR,
    RIDGE,
    VARIANCE_BASE,
)
from app.errors import ConfigError, GridMismatchError, InvalidInputError
from app.grid import CategoricalField, ImageField, VectorField, gradient, warp
from app.registration.diffeo import exponentiate

logger = logging.getLogger(__name__)

# 高斯核截断半径（以σ计）
FLUID_TRUNCATE = 3.0


@dataclass(frozen=True)
class DemonsConfig:
    """Demons力参数

    alpha为单次更新的最大位移（本层体素单位），须满足 0 < alpha < alpha0。
    """
    alpha: float
    alpha0: float
    fluid_sigma: float = FLUID_SIGMA
    ridge: float = RIDGE

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ConfigError("demons.alpha0", f"必须为正: {self.alpha0}")
        if not 0 < self.alpha < self.alpha0:
            raise ConfigError("demons.alpha", f"必须在(0, {self.alpha0})内: {self.alpha}")
        if self.fluid_sigma < 0:
            raise ConfigError("demons.fluid_sigma", f"不能为负: {self.fluid_sigma}")
        if not self.ridge > 0:
            raise ConfigError("demons.ridge", f"必须为正: {self.ridge}")

    @classmethod
    def for_level(cls, level: int, levels: int, fluid_sigma: float = FLUID_SIGMA,
                  ridge: float = RIDGE, fraction: float = ALPHA_FRACTION,
                  alpha0_base: float = ALPHA0_BASE) -> 'DemonsConfig':
        """第level层（1为最粗层）的配置：α₀ = base × 2^(level−L)"""
        alpha0 = alpha0_base * float(PYRAMID_FACTOR) ** (level - levels)
        return cls(alpha=fraction * alpha0, alpha0=alpha0, fluid_sigma=fluid_sigma, ridge=ridge)

    def with_alpha(self, alpha: float) -> 'DemonsConfig':
        return replace(self, alpha=alpha)


@dataclass(frozen=True)
class DemonsForceOutput:
    """Demons力结果"""
    mu: VectorField
    sigma_phi_sq: float
    max_norm: float


def _check_pair(fixed: CategoricalField, moving: CategoricalField):
    if fixed.grid != moving.grid:
        raise GridMismatchError(f"Demons: 网格不一致 {fixed.grid.dims} vs {moving.grid.dims}")
    if fixed.num_classes != moving.num_classes:
        raise InvalidInputError(
            f"Demons: 类别数不一致 {fixed.num_classes} vs {moving.num_classes}")


def _difference_and_jacobian(fixed: CategoricalField, moving: CategoricalField):
    """φ(0) = fixed − moving，形状 (K, *dims)；J = −½(∇fixed + ∇moving)，形状 (K, d, *dims)"""
    phi = fixed.probs - moving.probs
    jac = -0.5 * (gradient(fixed) + gradient(moving))
    return phi, jac


def _difference_variance(phi: np.ndarray) -> float:
    """差异向量与其均值之差的范数的无偏样本方差"""
    axes = tuple(range(1, phi.ndim))
    centred = phi - phi.mean(axis=axes, keepdims=True)
    norms = np.sqrt(np.sum(centred ** 2, axis=0)).ravel()
    if norms.size < 2:
        return 0.0
    return float(np.var(norms, ddof=1))


def solve_update(jac: np.ndarray, phi: np.ndarray, damping: float) -> np.ndarray:
    """逐体素求解 μ̃ = −(JᵀJ + damping·I)⁻¹ Jᵀφ，返回 (d, *dims)"""
    d = jac.shape[1]
    j_pix = np.moveaxis(jac, (0, 1), (-2, -1))   # (*dims, K, d)
    p_pix = np.moveaxis(phi, 0, -1)              # (*dims, K)
    normal = np.einsum('...kd,...ke->...de', j_pix, j_pix) + damping * np.eye(d)
    rhs = np.einsum('...kd,...k->...d', j_pix, p_pix)
    mu = -np.linalg.solve(normal, rhs[..., None])[..., 0]
    return np.moveaxis(mu, -1, 0)


def demons_force(fixed: CategoricalField, moving_warped: CategoricalField,
                 cfg: DemonsConfig) -> DemonsForceOutput:
    """对称Demons力

    结果满足 ‖μ(ω)‖ ≤ alpha；若未归一化力处处为零则返回零场。
    """
    _check_pair(fixed, moving_warped)
    grid = fixed.grid
    phi, jac = _difference_and_jacobian(fixed, moving_warped)
    # 差异不超过FORCE_TOL时返回零场
    if np.max(np.abs(phi)) <= FORCE_TOL:
        return DemonsForceOutput(VectorField.zeros(grid), 0.0, 0.0)

    sigma_sq = _difference_variance(phi)
    mu_tilde = solve_update(jac, phi, sigma_sq + cfg.ridge)
    peak = float(np.max(np.sqrt(np.sum(mu_tilde ** 2, axis=0))))
    if peak == 0.0:
        return DemonsForceOutput(VectorField.zeros(grid), sigma_sq, 0.0)
    mu = cfg.alpha * mu_tilde / peak
    logger.debug("Demons力: σ²=%.3e, 最大范数=%.3e", sigma_sq, peak)
    return DemonsForceOutput(VectorField(grid, mu), sigma_sq, peak)


def fluid_smooth(v: VectorField, sigma: float) -> VectorField:
    """逐分量可分离高斯平滑（3σ截断，边界截断）"""
    if sigma < 0:
        raise InvalidInputError(f"平滑宽度不能为负: {sigma}")
    if sigma == 0:
        return VectorField(v.grid, v.vectors.copy())
    smoothed = np.stack([
        ndimage.gaussian_filter(component, sigma, mode='nearest', truncate=FLUID_TRUNCATE)
        for component in v.vectors
    ], axis=0)
    return VectorField(v.grid, smoothed)


def estimate_velocity_variance(fixed: CategoricalField, moving_warped: CategoricalField,
                               base: float = VARIANCE_BASE) -> ImageField:
    """Σ(ω) = base / (1 + ‖J(ω)‖_F²)，梯度越强置信度越高"""
    _check_pair(fixed, moving_warped)
    if not base > 0:
        raise InvalidInputError(f"基础方差必须为正: {base}")
    _, jac = _difference_and_jacobian(fixed, moving_warped)
    frob_sq = np.sum(jac ** 2, axis=(0, 1))
    return ImageField(fixed.grid, base / (1.0 + frob_sq))


def demons_energy(fixed: CategoricalField, moving_warped: CategoricalField,
                  u: VectorField, sigma_sq: float) -> float:
    """线性化能量 E(u) = Σ‖φ(0) + J u‖² + σ² Σ‖u‖²"""
    _check_pair(fixed, moving_warped)
    phi, jac = _difference_and_jacobian(fixed, moving_warped)
    residual = phi + np.einsum('kd...,d...->k...', jac, u.vectors)
    return float(np.sum(residual ** 2) + sigma_sq * np.sum(u.vectors ** 2))


def matching_energy(fixed: CategoricalField, moving_warped: CategoricalField) -> float:
    """Σ‖fixed − moving‖²"""
    _check_pair(fixed, moving_warped)
    return float(np.sum((fixed.probs - moving_warped.probs) ** 2))


@dataclass(frozen=True)
class DemonsStepResult:
    velocity: VectorField
    warped: CategoricalField
    force: DemonsForceOutput


def demons_step(fixed: CategoricalField, moving: CategoricalField, velocity: VectorField,
                cfg: DemonsConfig) -> DemonsStepResult:
    """一次两两Demons迭代：力 → 流体平滑 → 速度累加 → 指数映射 → 形变"""
    _check_pair(fixed, moving)
    current = warp(moving, exponentiate(velocity))
    force = demons_force(fixed, current, cfg)
    new_velocity = velocity + fluid_smooth(force.mu, cfg.fluid_sigma)
    warped = warp(moving, exponentiate(new_velocity))
    return DemonsStepResult(new_velocity, warped, force)
