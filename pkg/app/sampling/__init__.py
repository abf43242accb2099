# 随机类别采样模块
from app.sampling.gumbel import (
    GumbelRaoConfig,
    softmax_jacobian_vector,
    gumbel_max_sample,
    st_gs_gradient,
    conditional_gumbel_draw,
    gumbel_rao_gradient,
    posterior_logits,
    stochastic_reconstruction,
)
