#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
运行配置模块
从JSON文档解析完整运行配置，未知字段与越界取值均报告字段路径
"""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Mapping, Optional, Tuple, get_type_hints

from app.config import (
    DEFAULT_THREADS,
    FFD_BOUND,
    FFD_SPACING,
    PHANTOM_BLUR,
    PHANTOM_CODEBOOKS,
    PHANTOM_NOISE,
    PHANTOM_SHAPE,
    THREADS_ENV,
)
from app.engine import EngineConfig
from app.errors import ConfigError
from app.evaluation import PHANTOM_LABELS, FfdSpec

logger = logging.getLogger(__name__)

# 顶层统一提供的字段，不允许在engine段中重复出现
_ENGINE_RESERVED = ('seed', 'threads')


@dataclass(frozen=True)
class SynthConfig:
    """合成体模组配置"""
    shape: Tuple[int, ...] = PHANTOM_SHAPE
    modalities: Tuple[str, ...] = ('m0', 'm1', 'm2')
    codebooks: Tuple[Tuple[float, ...], ...] = PHANTOM_CODEBOOKS
    noise: float = PHANTOM_NOISE
    blur: float = PHANTOM_BLUR
    ffd_spacing: float = FFD_SPACING
    ffd_bound: float = FFD_BOUND
    repeats: int = 1

    def __post_init__(self):
        if len(self.shape) not in (2, 3) or any(int(n) < 8 for n in self.shape):
            raise ConfigError("synth.shape", f"需要2或3个不小于8的整数: {self.shape}")
        if len(self.modalities) < 2:
            raise ConfigError("synth.modalities", f"至少需要2种模态: {self.modalities}")
        if len(self.codebooks) < len(self.modalities):
            raise ConfigError("synth.codebooks", f"码本数量少于模态数量{len(self.modalities)}")
        if any(len(c) != PHANTOM_LABELS for c in self.codebooks):
            raise ConfigError("synth.codebooks", f"每个码本需要{PHANTOM_LABELS}个强度值")
        if self.noise < 0:
            raise ConfigError("synth.noise", f"不能为负: {self.noise}")
        if self.blur < 0:
            raise ConfigError("synth.blur", f"不能为负: {self.blur}")
        if self.repeats < 1:
            raise ConfigError("synth.repeats", f"至少为1: {self.repeats}")
        self.ffd(0)

    def ffd(self, seed: int) -> FfdSpec:
        try:
            return FfdSpec(self.ffd_spacing, self.ffd_bound, seed)
        except ConfigError as e:
            message = str(e).split(': ', 1)[-1]
            raise ConfigError(e.field_path.replace('synth.ffd.', 'synth.ffd_'), message) from e


@dataclass(frozen=True)
class EvaluationConfig:
    """评估配置：label为None时对所有前景类别取平均"""
    label: Optional[int] = None
    physical_units: bool = False

    def __post_init__(self):
        if self.label is not None and self.label < 1:
            raise ConfigError("evaluation.label", f"必须为正的前景标签: {self.label}")


@dataclass(frozen=True)
class RunConfig:
    """一次运行的全部配置；所有随机性来自seed"""
    seed: int = 0
    threads: int = DEFAULT_THREADS
    engine: EngineConfig = field(default_factory=EngineConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", f"必须为非负整数: {self.seed}")
        if not isinstance(self.threads, int) or self.threads < 1:
            raise ConfigError("threads", f"至少为1: {self.threads}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'RunConfig':
        engine = data.get('engine', {})
        if isinstance(engine, Mapping):
            for key in _ENGINE_RESERVED:
                if key in engine:
                    raise ConfigError(f"engine.{key}", "请在顶层设置该字段")
        return _build(cls, data, '')

    @classmethod
    def from_file(cls, path: str) -> 'RunConfig':
        if not os.path.exists(path):
            raise FileNotFoundError(f"配置文件不存在: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError("<root>", f"{path} 不是合法JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("<root>", "配置文档必须是JSON对象")
        config = cls.from_dict(data)
        logger.info("已加载配置 %s（哈希 %s）", path, config.config_hash()[:12])
        return config

    def to_dict(self) -> Dict[str, Any]:
        data = _plain(dataclasses.asdict(self))
        for key in _ENGINE_RESERVED:
            data['engine'].pop(key, None)
        return data

    def config_hash(self) -> str:
        """规范化JSON的sha256"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def engine_config(self) -> EngineConfig:
        return replace(self.engine, seed=self.seed, threads=self.threads)

    def with_overrides(self, seed: Optional[int] = None, threads: Optional[int] = None) -> 'RunConfig':
        """命令行参数覆盖；threads优先级：参数 > 环境变量 > 配置文件"""
        if threads is None:
            threads = threads_from_env(self.threads)
        return replace(self, seed=self.seed if seed is None else seed, threads=threads)


def threads_from_env(default: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == '':
        return default
    try:
        value = int(raw)
    except ValueError as e:
        raise ConfigError(THREADS_ENV, f"必须为正整数: {raw}") from e
    if value < 1:
        raise ConfigError(THREADS_ENV, f"必须为正整数: {raw}")
    return value


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _build(cls, data: Any, path: str):
    """按dataclass字段递归构造；嵌套段的ConfigError补全为带前缀的路径"""
    if not isinstance(data, Mapping):
        raise ConfigError(path or '<root>', "应为JSON对象")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}{key}", "未知字段")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{path}{name}.")
        else:
            kwargs[name] = _tupled(value)
    try:
        return cls(**kwargs)
    except ConfigError as e:
        prefix = path.rstrip('.')
        if not prefix or e.field_path.startswith(prefix):
            raise
        message = str(e).split(': ', 1)[-1]
        parent, _, last = prefix.rpartition('.')
        # 子配置自带段名（如 prior.lam）时只补上父路径
        if e.field_path.split('.', 1)[0] == last:
            full = f"{parent}.{e.field_path}" if parent else e.field_path
        else:
            full = f"{prefix}.{e.field_path}"
        raise ConfigError(full, message) from e
    except TypeError as e:
        raise ConfigError(path.rstrip('.') or '<root>', f"字段类型错误: {e}") from e
