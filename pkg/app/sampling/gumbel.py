#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gumbel采样模块
Gumbel-Max采样、直通Gumbel-Softmax梯度与Gumbel-Rao梯度估计

条件Gumbel采样（给定argmax = k）采用截断Gumbel的逆CDF构造，
记 log π = log_softmax(logits)，E_i 独立服从 Exp(1)：
    G_k = −log E_k
    G_i = −log(E_i / π_i + E_k),  i ≠ k
G = g + log π，argmax G 恒为 k。
所有函数沿最后一个轴处理类别，前面的轴视为批量。
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import log_softmax, softmax

from app.config import GR_SAMPLES, GR_TAU
from app.errors import ConfigError, InvalidInputError
from app.grid import CategoricalField, ImageField

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator, None]
GradientLike = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class GumbelRaoConfig:
    tau: float = GR_TAU
    samples: int = GR_SAMPLES
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("sampling.tau", f"必须为正: {self.tau}")
        if int(self.samples) != self.samples or self.samples < 1:
            raise ConfigError("sampling.samples", f"必须为正整数: {self.samples}")


def _generator(seed: SeedLike) -> np.random.Generator:
    return np.random.default_rng(seed)


def _check_logits(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 0 or logits.shape[-1] < 2:
        raise InvalidInputError("logits的最后一维至少需要2个类别")
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("logits包含非有限值")
    return logits


def _one_hot(indices: np.ndarray, k: int) -> np.ndarray:
    return (np.arange(k) == indices[..., None]).astype(np.float64)


def _resolve_gradient(f_grad: GradientLike, z: np.ndarray) -> np.ndarray:
    grad = f_grad(z) if callable(f_grad) else f_grad
    return np.broadcast_to(np.asarray(grad, dtype=np.float64), z.shape)


def softmax_jacobian_vector(y: np.ndarray, f_grad: np.ndarray, tau: float) -> np.ndarray:
    """softmax_τ的雅可比与向量之积：(1/τ)(y⊙f − y·(yᵀf))"""
    inner = np.sum(y * f_grad, axis=-1, keepdims=True)
    return (y * f_grad - y * inner) / tau


def gumbel_max_sample(logits, seed: SeedLike = None) -> np.ndarray:
    """独热样本 onehot(argmax_k(g_k + logit_k))"""
    logits = _check_logits(logits)
    rng = _generator(seed)
    g = rng.gumbel(size=logits.shape)
    return _one_hot(np.argmax(g + logits, axis=-1), logits.shape[-1])


def st_gs_gradient(f_grad: GradientLike, logits, tau: float, seed: SeedLike = None,
                   gumbels: Optional[np.ndarray] = None) -> np.ndarray:
    """直通Gumbel-Softmax梯度

    前向独热样本与反向softmax使用同一组Gumbel噪声；可通过gumbels传入噪声。
    """
    logits = _check_logits(logits)
    if not tau > 0:
        raise InvalidInputError(f"温度τ必须为正: {tau}")
    g = _generator(seed).gumbel(size=logits.shape) if gumbels is None else np.asarray(gumbels)
    perturbed = g + logits
    z = _one_hot(np.argmax(perturbed, axis=-1), logits.shape[-1])
    y = softmax(perturbed / tau, axis=-1)
    return softmax_jacobian_vector(y, _resolve_gradient(f_grad, z), tau)


def conditional_gumbel_draw(logits, realized, seed: SeedLike = None) -> np.ndarray:
    """给定argmax为realized类别时 g + log π 的条件样本"""
    logits = _check_logits(logits)
    realized = np.asarray(realized, dtype=np.float64)
    if realized.shape != logits.shape:
        raise InvalidInputError(f"realized形状{realized.shape}与logits{logits.shape}不一致")
    if not (np.all((realized == 0) | (realized == 1)) and np.all(realized.sum(axis=-1) == 1)):
        raise InvalidInputError("realized必须为独热向量")
    rng = _generator(seed)
    log_pi = log_softmax(logits, axis=-1)
    exp_draws = rng.exponential(size=logits.shape)
    top = np.sum(exp_draws * realized, axis=-1, keepdims=True)
    others = -np.log(exp_draws * np.exp(-log_pi) + top)
    return np.where(realized == 1, -np.log(top), others)


def gumbel_rao_gradient(f_grad: GradientLike, logits, cfg: GumbelRaoConfig,
                        seed: SeedLike = None) -> np.ndarray:
    """Gumbel-Rao梯度：对同一独热样本下的S个条件Gumbel样本取softmax雅可比平均

    seed缺省时使用cfg.seed。
    """
    logits = _check_logits(logits)
    rng = _generator(cfg.seed if seed is None else seed)
    z = gumbel_max_sample(logits, rng)
    grad = _resolve_gradient(f_grad, z)
    total = np.zeros(logits.shape)
    for _ in range(cfg.samples):
        y = softmax(conditional_gumbel_draw(logits, z, rng) / cfg.tau, axis=-1)
        total += softmax_jacobian_vector(y, grad, cfg.tau)
    return total / cfg.samples


def posterior_logits(posterior: CategoricalField) -> np.ndarray:
    """类别场转为逐体素logits，形状 (*dims, K)"""
    with np.errstate(divide='ignore'):
        logits = np.log(np.moveaxis(posterior.probs, 0, -1))
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("后验中存在零概率，无法取对数")
    return logits


def stochastic_reconstruction(posterior: CategoricalField, levels: np.ndarray, samples: int,
                              seed: SeedLike = None) -> ImageField:
    """S个Gumbel-Max独热样本解码后取平均"""
    levels = np.asarray(levels, dtype=np.float64)
    if levels.shape != (posterior.num_classes,):
        raise InvalidInputError(f"强度码本长度应为{posterior.num_classes}")
    if samples < 1:
        raise InvalidInputError(f"样本数必须为正: {samples}")
    rng = _generator(seed)
    logits = posterior_logits(posterior)
    total = np.zeros(posterior.grid.dims)
    for _ in range(samples):
        total += gumbel_max_sample(logits, rng) @ levels
    return ImageField(posterior.grid, total / samples)
