#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
进度播报模块
把配准过程中的关键事件写入日志，并保留一份事件列表供运行清单使用
"""

import logging
import os
import threading
import time
from typing import Dict, List, Optional, Sequence

from app.config import LOG_FILE, LOG_LEVEL

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def setup_logging(level: str = LOG_LEVEL, log_dir: Optional[str] = None) -> logging.Logger:
    """配置根日志器：控制台输出，可选写入 log_dir/app.log"""
    numeric = logging.getLevelName(str(level).upper())
    if not isinstance(numeric, int):
        raise ValueError(f"未知日志级别: {level}")
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    formatter = logging.Formatter(LOG_FORMAT)
    console = logging.StreamHandler()
    console.setFormatter(formatter)
    root.addHandler(console)
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(log_dir, LOG_FILE), encoding='utf-8')
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)
    root.setLevel(numeric)
    return root


class ProgressReporter:
    """进度播报器"""

    def __init__(self, name: str = "groupreg"):
        self.logger = logging.getLogger(f"{__name__}.{name}")
        self.events: List[Dict] = []
        self._lock = threading.Lock()
        self._started = time.monotonic()

    def _record(self, kind: str, message: str, level: int = logging.INFO):
        with self._lock:
            self.events.append({
                'kind': kind,
                'message': message,
                'elapsed': round(time.monotonic() - self._started, 3),
            })
        self.logger.log(level, message)

    def announce(self, message: str):
        """播报一般信息"""
        if message:
            self._record('info', message)

    def announce_level(self, level: int, levels: int, dims: Sequence[int]):
        """播报层级切换"""
        shape = '×'.join(str(n) for n in dims)
        self._record('level', f"进入第{level}/{levels}层，网格{shape}")

    def announce_iteration(self, level: int, iteration: int, loss: float, alpha: float,
                           backtracks: int = 0):
        """播报一次被接受的迭代"""
        message = f"第{level}层第{iteration}次迭代：损失{loss:.6e}，步长α={alpha:.4g}"
        if backtracks:
            message += f"（回溯{backtracks}次）"
        self._record('iteration', message, logging.DEBUG)

    def announce_list_item(self, item_text: str, index: int, total: int):
        """播报列表项信息"""
        self._record('item', f"第{index}项，共{total}项：{item_text}")

    def announce_error(self, error_message: str):
        """播报错误信息"""
        self._record('error', f"错误：{error_message}", logging.ERROR)

    def announce_success(self, success_message: str):
        """播报成功信息"""
        self._record('success', success_message)

    def summary(self) -> Dict[str, int]:
        """按事件类型计数"""
        counts: Dict[str, int] = {}
        with self._lock:
            for event in self.events:
                counts[event['kind']] = counts.get(event['kind'], 0) + 1
        return counts
