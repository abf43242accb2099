#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
应用配置文件
所有可调参数的默认值
"""

# 应用信息
APP_NAME = "组配准"
APP_VERSION = "1.0.0"
APP_DESCRIPTION = "基于解耦结构表示与稳态速度场的多模态组配准工具"

# 文件格式配置
FORMAT_VERSION = 1
CONTAINER_MAGIC = "GRC"
STATE_MAGIC = "GRS"
CONTAINER_SUFFIX = ".grc"
STATE_SUFFIX = ".grs"

# 运行记录数据库配置
DATABASE_NAME = "runs.db"
DATABASE_PATH = "data/"

# 日志配置
LOG_DIR = "logs/"
LOG_FILE = "app.log"
LOG_LEVEL = "INFO"

# 线程配置
THREADS_ENV = "GROUPREG_THREADS"
DEFAULT_THREADS = 1

# 网格配置
DEFAULT_SPACING = 1.0
SIMPLEX_TOL = 1e-9

# 结构表示配置
NUM_CLASSES = 8
PROB_FLOOR = 1e-6  # 概率下限
EM_ITERS = 50
EM_TOL = 1e-8
EM_MAX_SAMPLES = 200000  # EM拟合时最多采样的体素数
EM_VARIANCE_FLOOR = 1e-6  # 相对于全局方差

# 配准层级配置
LEVELS = 3
PYRAMID_FACTOR = 2
ITERS_PER_LEVEL = 20
CONVERGENCE_TOL = 1e-4
MAX_BACKTRACKS = 6

# Demons配置
ALPHA0_BASE = 10.0  # α₀^l = 10 × 2^(l-L)
ALPHA_FRACTION = 0.1  # 每步约1个细层体素
FLUID_SIGMA = 1.0
DIFFUSION_SIGMA = 1.0  # 每步之后对速度场整体平滑
RIDGE = 1e-8
FORCE_TOL = 1e-12  # 差异向量低于该值视为零力
VARIANCE_BASE = 0.025  # 速度方差启发式的基准方差

# 先验与似然配置
PRIOR_LAMBDA = 10.0
LAPLACE_SCALE = 1.0
LOSS_WEIGHTS = (120.0, 160.0, 10.0)  # 重建, 结构距离, 配准正则

# Gumbel-Rao配置
GR_TAU = 1.0
GR_SAMPLES = 3

# 合成数据配置
PHANTOM_SHAPE = (96, 96)
PHANTOM_MODALITIES = 3
PHANTOM_NOISE = 0.02
PHANTOM_BLUR = 0.0  # 0表示分段常数，形变用最近邻插值
FFD_SPACING = 10.0
FFD_BOUND = 3.0
PHANTOM_CODEBOOKS = (
    (0.0, 0.57, 1.0, 0.29, 0.86, 0.14, 0.71, 0.43),
    (0.0, 0.86, 0.29, 1.0, 0.14, 0.71, 0.43, 0.57),
    (0.0, 0.29, 0.71, 0.57, 0.43, 1.0, 0.14, 0.86),
)

# 评估配置
GWI_COMPOSITION_TOL = 0.1
NEG_JACOBIAN_LIMIT = 0.1  # 百分比
