# 输入输出模块：数组容器、NIfTI读写、运行配置与预览图
from app.io.volume import ArrayContainer, parse_container, read_volume, write_volume
from app.io.run_config import (
    RunConfig,
    SynthConfig,
    EvaluationConfig,
    threads_from_env,
)
from app.io.preview import save_preview, save_mosaic, to_uint8
