#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
组配准引擎
由粗到细逐层：形变单视图后验 → 几何平均融合 → Demons力 → 流体平滑
→ 累加后扩散平滑 → 零均值约束 → 码本重拟合 → 目标函数评估（步长回溯）

每层步长上限为α = fraction·α₀；回溯时减半，被接受后下一次迭代从
两倍已接受步长重新开始（不超过上限）。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from app.config import (
    ALPHA0_BASE,
    ALPHA_FRACTION,
    CONVERGENCE_TOL,
    DEFAULT_THREADS,
    DIFFUSION_SIGMA,
    EM_ITERS,
    FLUID_SIGMA,
    ITERS_PER_LEVEL,
    LEVELS,
    MAX_BACKTRACKS,
    NUM_CLASSES,
    PYRAMID_FACTOR,
    RIDGE,
    VARIANCE_BASE,
)
from app.errors import (
    ConfigError,
    DegenerateImageError,
    GridMismatchError,
    InvalidInputError,
    ModalityError,
)
from app.generative import (
    ElboBreakdown,
    IntensityCodebook,
    LikelihoodConfig,
    LossWeights,
    ObjectiveTerms,
    VelocityPriorConfig,
    assemble_elbo,
    fit_codebook,
    laplace_loglik,
    reconstruct_image,
    velocity_prior_kl,
)
from app.grid import CategoricalField, GridSpec, ImageField, VectorField, pool, warp
from app.registration import (
    DemonsConfig,
    TransformSet,
    VelocitySet,
    aggregate_levels,
    build_pyramid,
    center_velocities,
    demons_force,
    estimate_velocity_variance,
    fluid_smooth,
    transforms_from_totals,
)
from app.sampling import (
    GumbelRaoConfig,
    gumbel_rao_gradient,
    posterior_logits,
    stochastic_reconstruction,
)
from app.structure import (
    ViewExtractorParams,
    extract_posterior,
    fit_view_extractor,
    geometric_mean,
    intrinsic_distance,
)
from app.utils.reporter import ProgressReporter

logger = logging.getLogger(__name__)

CODEBOOK_MODES = ('L1', 'L2')


@dataclass(frozen=True)
class EngineConfig:
    """引擎配置；所有默认值取自 app.config"""
    levels: int = LEVELS
    num_classes: int = NUM_CLASSES
    iters_per_level: int = ITERS_PER_LEVEL
    convergence_tol: float = CONVERGENCE_TOL
    max_backtracks: int = MAX_BACKTRACKS
    alpha0_base: float = ALPHA0_BASE
    alpha_fraction: float = ALPHA_FRACTION
    fluid_sigma: float = FLUID_SIGMA
    diffusion_sigma: float = DIFFUSION_SIGMA
    ridge: float = RIDGE
    variance_base: float = VARIANCE_BASE
    prior: VelocityPriorConfig = field(default_factory=VelocityPriorConfig)
    likelihood: LikelihoodConfig = field(default_factory=LikelihoodConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    sampling: GumbelRaoConfig = field(default_factory=GumbelRaoConfig)
    codebook_mode: str = 'L1'
    em_iters: int = EM_ITERS
    multimodal: bool = True
    stochastic_elbo: bool = False
    seed: int = 0
    threads: int = DEFAULT_THREADS

    def __post_init__(self):
        checks = [
            ('levels', self.levels >= 1, "至少为1"),
            ('num_classes', self.num_classes >= 2, "至少为2"),
            ('iters_per_level', self.iters_per_level >= 1, "至少为1"),
            ('convergence_tol', self.convergence_tol > 0, "必须为正"),
            ('max_backtracks', self.max_backtracks >= 0, "不能为负"),
            ('alpha0_base', self.alpha0_base > 0, "必须为正"),
            ('alpha_fraction', 0 < self.alpha_fraction < 1, "必须在(0, 1)内"),
            ('fluid_sigma', self.fluid_sigma >= 0, "不能为负"),
            ('diffusion_sigma', self.diffusion_sigma >= 0, "不能为负"),
            ('ridge', self.ridge > 0, "必须为正"),
            ('variance_base', self.variance_base > 0, "必须为正"),
            ('codebook_mode', self.codebook_mode in CODEBOOK_MODES, f"必须为{CODEBOOK_MODES}之一"),
            ('em_iters', self.em_iters >= 1, "至少为1"),
            ('seed', self.seed >= 0, "不能为负"),
            ('threads', self.threads >= 1, "至少为1"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigError(f"engine.{name}", f"{message}: {getattr(self, name)}")

    def demons_for_level(self, level: int) -> DemonsConfig:
        """第level层（1为最粗层）的Demons配置"""
        return DemonsConfig.for_level(level, self.levels, self.fluid_sigma, self.ridge,
                                      self.alpha_fraction, self.alpha0_base)


@dataclass(frozen=True)
class TraceEntry:
    """目标函数轨迹中被接受的一步；level为0表示初始状态"""
    level: int
    iteration: int
    loss: float
    alpha: float
    backtracks: int = 0


@dataclass
class GroupState:
    """一组图像的完整配准状态"""
    images: List[ImageField]
    modalities: List[str]
    extractor: ViewExtractorParams
    posteriors: List[CategoricalField]
    velocities: VelocitySet
    totals: List[VectorField]
    transforms: TransformSet
    codebook: IntensityCodebook
    fused: CategoricalField
    breakdown: ElboBreakdown
    terms: ObjectiveTerms
    trace: List[TraceEntry] = field(default_factory=list)
    norm_history: List[Dict] = field(default_factory=list)

    @property
    def num_images(self) -> int:
        return len(self.images)

    @property
    def grids(self) -> List[GridSpec]:
        return self.velocities.grids

    @property
    def loss(self) -> float:
        return self.breakdown.loss


@dataclass
class _Evaluation:
    totals: List[VectorField]
    transforms: TransformSet
    fused: CategoricalField
    codebook: IntensityCodebook
    terms: ObjectiveTerms
    breakdown: ElboBreakdown


class _Runner:
    """单次配准运行：持有线程池与不可变输入"""

    def __init__(self, images: Sequence[ImageField], modalities: Sequence[str],
                 extractor: ViewExtractorParams, cfg: EngineConfig,
                 reporter: Optional[ProgressReporter]):
        self.images = list(images)
        self.modalities = list(modalities)
        self.extractor = extractor
        self.cfg = cfg
        self.reporter = reporter or ProgressReporter()
        self.grids = build_pyramid(self.images[0].grid, cfg.levels)
        self.factors = [PYRAMID_FACTOR ** (cfg.levels - 1 - l) for l in range(cfg.levels)]
        self.executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None

    def map(self, fn: Callable, items: Sequence) -> List:
        """按输入顺序返回结果"""
        if self.executor is None:
            return [fn(item) for item in items]
        return list(self.executor.map(fn, items))

    def close(self):
        if self.executor is not None:
            self.executor.shutdown(wait=True)

    def level_views(self, warped: Sequence[CategoricalField], level_index: int) -> List[CategoricalField]:
        factor = self.factors[level_index]
        return self.map(lambda p: pool(p, factor), warped)

    def evaluate(self, posteriors: Sequence[CategoricalField], velocities: VelocitySet,
                 previous: Optional[IntensityCodebook]) -> _Evaluation:
        cfg = self.cfg
        totals = aggregate_levels(velocities)
        transforms = transforms_from_totals(totals, executor=self.executor)
        warped = self.map(lambda jp: warp(jp[1], transforms.forward[jp[0]]), list(enumerate(posteriors)))
        fused = geometric_mean(warped)

        warped_images: Dict[str, List[ImageField]] = {}
        for j, image in enumerate(self.images):
            warped_images.setdefault(self.modalities[j], []).append(warp(image, transforms.forward[j]))
        codebook = fit_codebook(fused, warped_images, cfg.codebook_mode, previous)

        loglik = tuple(self.map(
            lambda j: laplace_loglik(
                self.images[j],
                reconstruct_image(fused, codebook, self.modalities[j], transforms.inverse[j]),
                cfg.likelihood),
            range(len(self.images))))

        structural, velocity_kl = [], []
        for l in range(velocities.num_levels):
            views = self.level_views(warped, l)
            fused_l = geometric_mean(views)
            structural.append(intrinsic_distance(fused_l, views).total)
            velocity_kl.append(tuple(
                velocity_prior_kl(
                    velocities.fields[l][j],
                    estimate_velocity_variance(fused_l, views[j], cfg.variance_base),
                    cfg.prior).total
                for j in range(len(views))))
        terms = ObjectiveTerms(loglik, tuple(structural), tuple(velocity_kl))
        return _Evaluation(totals, transforms, fused, codebook, terms, assemble_elbo(terms, cfg.weights))

    def level_forces(self, posteriors: Sequence[CategoricalField], transforms: TransformSet,
                     level_index: int, demons: DemonsConfig) -> List[VectorField]:
        """本层每幅图像经流体平滑的Demons力（步长为demons.alpha）"""
        warped = self.map(lambda jp: warp(jp[1], transforms.forward[jp[0]]), list(enumerate(posteriors)))
        views = self.level_views(warped, level_index)
        fused_l = geometric_mean(views)
        return self.map(
            lambda view: fluid_smooth(demons_force(fused_l, view, demons).mu, demons.fluid_sigma),
            views)

    def stochastic_extras(self, evaluation: _Evaluation) -> Dict[str, float]:
        """Gumbel-Max样本重建项与Gumbel-Rao梯度范数，只用于报告"""
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        logits = posterior_logits(evaluation.fused)
        reconstruction = 0.0
        gradient_norm = 0.0
        for j, image in enumerate(self.images):
            levels = evaluation.codebook.for_modality(self.modalities[j])
            sampled = stochastic_reconstruction(evaluation.fused, levels, cfg.sampling.samples, rng)
            restored = warp(sampled, evaluation.transforms.inverse[j])
            reconstruction += laplace_loglik(image, restored, cfg.likelihood)

            target = warp(image, evaluation.transforms.forward[j]).values

            def f_grad(z, target=target, levels=levels):
                residual = z @ levels - target
                return -np.sign(residual)[..., None] * levels / cfg.likelihood.b

            grad = gumbel_rao_gradient(f_grad, logits, cfg.sampling, rng)
            gradient_norm += float(np.linalg.norm(grad))
        return {
            'stochastic_reconstruction': cfg.weights.reconstruction * reconstruction,
            'gumbel_rao_gradient_norm': gradient_norm,
        }


def _validate_group(images: Sequence[ImageField], modalities: Sequence[str], cfg: EngineConfig):
    if len(images) < 2:
        raise InvalidInputError(f"组内至少需要2幅图像，实际为{len(images)}")
    if len(modalities) != len(images):
        raise InvalidInputError("模态标签数量与图像数量不一致")
    grid = images[0].grid
    for image in images[1:]:
        if image.grid != grid:
            raise GridMismatchError("组内图像网格不一致")
    if cfg.multimodal and len(set(modalities)) < 2:
        raise ModalityError("多模态模式下组内至少需要两种模态")
    if all(np.ptp(image.values) == 0 for image in images):
        raise DegenerateImageError("组内所有图像均为常数")


def _norm_record(level: int, iteration: int, velocities: VelocitySet) -> Dict:
    return {
        'level': level,
        'iteration': iteration,
        'norms': [float(np.mean([v.max_norm() for v in fields])) for fields in velocities.fields],
    }


def _run(images: Sequence[ImageField], modalities: Sequence[str], extractor: ViewExtractorParams,
         cfg: EngineConfig, reporter: Optional[ProgressReporter]) -> GroupState:
    runner = _Runner(images, modalities, extractor, cfg, reporter)
    reporter = runner.reporter
    try:
        posteriors = runner.map(
            lambda jm: extract_posterior(jm[0], extractor, jm[1]),
            list(zip(runner.images, runner.modalities)))
        velocities = VelocitySet.zeros(runner.grids, len(images))
        current = runner.evaluate(posteriors, velocities, None)
        trace = [TraceEntry(0, 0, current.breakdown.loss, 0.0)]
        history = [_norm_record(0, 0, velocities)]
        reporter.announce(f"开始配准：{len(images)}幅图像，{cfg.levels}层，初始损失{current.breakdown.loss:.6e}")

        for l in range(cfg.levels):
            level = l + 1
            reporter.announce_level(level, cfg.levels, runner.grids[l].dims)
            demons = cfg.demons_for_level(level)
            alpha = demons.alpha
            for iteration in range(1, cfg.iters_per_level + 1):
                forces = runner.level_forces(posteriors, current.transforms, l, demons.with_alpha(alpha))
                if all(not np.any(f.vectors) for f in forces):
                    logger.debug("第%d层Demons力为零，结束本层", level)
                    break
                accepted = None
                step_alpha = alpha
                for backtracks in range(cfg.max_backtracks + 1):
                    scale = step_alpha / alpha
                    stepped = [fluid_smooth(v + f.scaled(scale), cfg.diffusion_sigma)
                               for v, f in zip(velocities.fields[l], forces)]
                    candidate = velocities.with_level(l, center_velocities(stepped))
                    evaluation = runner.evaluate(posteriors, candidate, current.codebook)
                    if evaluation.breakdown.loss <= current.breakdown.loss:
                        accepted = (candidate, evaluation, backtracks)
                        break
                    step_alpha *= 0.5
                if accepted is None:
                    logger.debug("第%d层回溯%d次仍未下降，结束本层", level, cfg.max_backtracks)
                    break
                velocities, evaluation, backtracks = accepted
                previous_loss = current.breakdown.loss
                current = evaluation
                trace.append(TraceEntry(level, iteration, current.breakdown.loss, step_alpha, backtracks))
                history.append(_norm_record(level, iteration, velocities))
                reporter.announce_iteration(level, iteration, current.breakdown.loss, step_alpha, backtracks)
                alpha = min(2.0 * step_alpha, demons.alpha)
                change = abs(previous_loss - current.breakdown.loss) / max(abs(previous_loss), 1e-12)
                if change < cfg.convergence_tol:
                    break

        breakdown = current.breakdown
        if cfg.stochastic_elbo:
            breakdown = replace(breakdown, extras=runner.stochastic_extras(current))
        reporter.announce_success(f"配准完成：最终损失{breakdown.loss:.6e}，共{len(trace) - 1}次有效迭代")
        return GroupState(
            images=runner.images,
            modalities=runner.modalities,
            extractor=extractor,
            posteriors=posteriors,
            velocities=velocities,
            totals=current.totals,
            transforms=current.transforms,
            codebook=current.codebook,
            fused=current.fused,
            breakdown=breakdown,
            terms=current.terms,
            trace=trace,
            norm_history=history,
        )
    finally:
        runner.close()


def _group_by_modality(images: Sequence[ImageField], modalities: Sequence[str]) -> Dict[str, List[ImageField]]:
    grouped: Dict[str, List[ImageField]] = {}
    for image, modality in zip(images, modalities):
        grouped.setdefault(modality, []).append(image)
    return grouped


def register_group(images: Sequence[ImageField], modalities: Sequence[str],
                   cfg: Optional[EngineConfig] = None,
                   reporter: Optional[ProgressReporter] = None) -> GroupState:
    """拟合单视图提取器并对整组图像做组配准"""
    cfg = cfg or EngineConfig()
    _validate_group(images, modalities, cfg)
    build_pyramid(images[0].grid, cfg.levels)
    extractor = fit_view_extractor(_group_by_modality(images, modalities), cfg.num_classes,
                                   cfg.em_iters, cfg.seed, threads=cfg.threads)
    return _run(images, modalities, extractor, cfg, reporter)


def register_group_scaled(images: Sequence[ImageField], modalities: Sequence[str],
                          extractor: ViewExtractorParams, cfg: Optional[EngineConfig] = None,
                          reporter: Optional[ProgressReporter] = None) -> GroupState:
    """使用已拟合的提取器配准任意大小的组；各模态图像数可不同甚至为零"""
    cfg = cfg or EngineConfig()
    if extractor.num_classes != cfg.num_classes:
        cfg = replace(cfg, num_classes=extractor.num_classes)
    _validate_group(images, modalities, cfg)
    unknown = sorted(set(modalities) - set(extractor.modalities))
    if unknown:
        raise ModalityError(f"提取器中没有模态: {', '.join(unknown)}")
    return _run(images, modalities, extractor, cfg, reporter)


def reconstruct(state: GroupState, j: int) -> ImageField:
    """第j幅图像的重建 f(q*;θ_j)∘φ_j⁻¹"""
    if not 0 <= j < state.num_images:
        raise InvalidInputError(f"图像编号{j}超出范围")
    return reconstruct_image(state.fused, state.codebook, state.modalities[j], state.transforms.inverse[j])
