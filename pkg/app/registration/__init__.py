# 配准模块：速度场代数与Demons力
from app.registration.diffeo import (
    VelocitySet,
    TransformSet,
    compose,
    exponentiate,
    invert,
    center_velocities,
    aggregate_levels,
    build_pyramid,
    transforms_from_totals,
    transforms_from_velocities,
)
from app.registration.demons import (
    DemonsConfig,
    DemonsForceOutput,
    demons_force,
    fluid_smooth,
    estimate_velocity_variance,
    demons_energy,
    demons_step,
)
