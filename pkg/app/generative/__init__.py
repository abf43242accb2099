# 生成模型模块：码本解码器与目标函数
from app.generative.decoder import (
    IntensityCodebook,
    CounterfactualResult,
    decode,
    weighted_median,
    fit_codebook,
    reconstruct_image,
    counterfactual_reconstruct,
)
from app.generative.objective import (
    LikelihoodConfig,
    VelocityPriorConfig,
    LossWeights,
    VelocityKL,
    ObjectiveTerms,
    ElboBreakdown,
    laplace_loglik,
    velocity_prior_kl,
    assemble_elbo,
)
