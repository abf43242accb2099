# 结构表示模块：单视图提取与多视图融合
from app.structure.extractor import (
    ModalityMixture,
    ViewExtractorParams,
    align_classes,
    fit_modality_mixture,
    fit_view_extractor,
    extract_posterior,
    posterior_pyramid,
)
from app.structure.fusion import (
    FusionResult,
    StructuralDistance,
    geometric_mean,
    geometric_mean_gaussian,
    arithmetic_mean,
    fuse,
    intrinsic_distance,
    intrinsic_distance_gaussian,
    structural_kl,
    variational_argmin_check,
)
