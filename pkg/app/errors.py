#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
异常定义模块
库函数抛出异常，命令行层负责转换为退出码
"""

from typing import Optional


class GroupRegError(Exception):
    """组配准异常基类"""


class InvalidInputError(GroupRegError, ValueError):
    """输入不合法"""


class GridMismatchError(InvalidInputError):
    """网格不一致"""


class DegenerateImageError(GroupRegError):
    """退化图像（常数图像等）"""


class ModalityError(GroupRegError):
    """模态标签未知或不匹配"""


class ConfigError(GroupRegError):
    """配置错误，带字段路径"""

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


class ContainerFormatError(GroupRegError):
    """容器文件格式错误"""

    def __init__(self, message: str, offset: Optional[int] = None,
                 section: Optional[str] = None):
        self.offset = offset
        self.section = section
        details = []
        if section is not None:
            details.append(f"段={section}")
        if offset is not None:
            details.append(f"字节偏移={offset}")
        suffix = f" ({', '.join(details)})" if details else ""
        super().__init__(f"{message}{suffix}")


class StateFormatError(ContainerFormatError):
    """状态文件格式错误"""

    def __init__(self, section: str, message: str, offset: Optional[int] = None):
        super().__init__(message, offset=offset, section=section)


class VersionMismatchError(ContainerFormatError):
    """版本不兼容"""

    def __init__(self, found, expected):
        self.found = found
        self.expected = expected
        super().__init__(f"版本不兼容: 文件版本 {found}，当前支持 {expected}")


# 命令行退出码
EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2

USAGE_ERRORS = (
    InvalidInputError,
    ConfigError,
    ContainerFormatError,
    ModalityError,
    DegenerateImageError,
    FileNotFoundError,
)


def exit_code_for(error: BaseException) -> int:
    """根据异常类型确定退出码"""
    if isinstance(error, USAGE_ERRORS):
        return EXIT_USAGE
    return EXIT_INTERNAL
