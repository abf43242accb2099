# 命令行模块：子命令实现
from app.cli.commands import (
    cmd_register,
    cmd_evaluate,
    cmd_synth,
    cmd_plotdata,
    cmd_benchmark,
    expand_inputs,
    load_manifest,
)
