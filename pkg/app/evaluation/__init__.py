# 评估模块：指标、合成体模与验收基准
from app.evaluation.metrics import (
    PairwiseSummary,
    dice,
    groupwise_dice,
    boundary,
    surface_distance,
    assd_summary,
    groupwise_assd,
    composition_residuals,
    groupwise_warping_index,
    negative_jacobian_fraction,
    groupwise_metrics,
)
from app.evaluation.synth import (
    FfdSpec,
    PhantomGroup,
    PHANTOM_LABELS,
    bspline_weights,
    random_ffd,
    make_anatomy,
    render,
    make_phantom_group,
    merge_groups,
)
