# 组配准引擎模块
from app.engine.engine import (
    EngineConfig,
    GroupState,
    TraceEntry,
    register_group,
    register_group_scaled,
    reconstruct,
)
from app.engine.state_io import export_state, import_state, state_arrays
