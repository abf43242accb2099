# 网格场模块
from app.grid.fields import GridSpec, ImageField, VectorField, CategoricalField, LabelField
from app.grid.ops import (
    identity_grid,
    interpolate,
    warp,
    gradient,
    jacobian_determinant,
    resample,
    pool,
)
