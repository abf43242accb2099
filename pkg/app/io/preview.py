#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
预览图模块
把图像、标签与后验渲染为PNG，便于快速检查配准结果
"""

import logging
import os
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageEnhance

from app.errors import InvalidInputError
from app.grid import CategoricalField, ImageField, LabelField

logger = logging.getLogger(__name__)

PREVIEW_CONFIG = {
    'resize_factor': 2.0,
    'contrast_enhance': 1.2,
    'tile_gap': 2,
}

# 标签/类别着色（循环使用）
PALETTE = np.array([
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
], dtype=np.uint8)

Previewable = Union[ImageField, LabelField, CategoricalField]


def _middle_slice(array: np.ndarray) -> np.ndarray:
    """三维数据取最后一轴的中间切片"""
    if array.ndim == 3:
        return array[..., array.shape[-1] // 2]
    return array


def to_uint8(values: np.ndarray) -> np.ndarray:
    """线性拉伸到 [0, 255]；常数图像输出全零"""
    values = np.asarray(values, dtype=np.float64)
    low, high = float(values.min()), float(values.max())
    if high <= low:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round(255.0 * (values - low) / (high - low)).astype(np.uint8)


def to_pil(field: Previewable) -> Image.Image:
    if isinstance(field, ImageField):
        image = Image.fromarray(to_uint8(_middle_slice(field.values)))
        if PREVIEW_CONFIG['contrast_enhance'] != 1.0:
            image = ImageEnhance.Contrast(image).enhance(PREVIEW_CONFIG['contrast_enhance'])
        return image
    if isinstance(field, CategoricalField):
        labels = np.argmax(field.probs, axis=0)
    elif isinstance(field, LabelField):
        labels = field.labels
    else:
        raise InvalidInputError(f"无法预览的对象类型: {type(field).__name__}")
    colours = PALETTE[_middle_slice(labels) % len(PALETTE)]
    return Image.fromarray(np.ascontiguousarray(colours))


def _resized(image: Image.Image, factor: float) -> Image.Image:
    if factor == 1.0:
        return image
    size = (int(image.width * factor), int(image.height * factor))
    resample = Image.Resampling.LANCZOS if image.mode == 'L' else Image.Resampling.NEAREST
    return image.resize(size, resample)


def save_preview(field: Previewable, path: str, factor: Optional[float] = None):
    """保存单幅预览图"""
    factor = PREVIEW_CONFIG['resize_factor'] if factor is None else factor
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    _resized(to_pil(field), factor).save(path, format='PNG')
    logger.debug("预览图已保存: %s", path)


def save_mosaic(fields: Sequence[Previewable], path: str, columns: Optional[int] = None,
                factor: Optional[float] = None):
    """把一组场并排拼接为一幅预览图"""
    if not fields:
        raise InvalidInputError("没有可拼接的图像")
    factor = PREVIEW_CONFIG['resize_factor'] if factor is None else factor
    tiles = [_resized(to_pil(f).convert('RGB'), factor) for f in fields]
    columns = columns or len(tiles)
    rows = -(-len(tiles) // columns)
    gap = PREVIEW_CONFIG['tile_gap']
    width = max(t.width for t in tiles)
    height = max(t.height for t in tiles)
    canvas = Image.new('RGB', (columns * width + (columns - 1) * gap, rows * height + (rows - 1) * gap),
                       color='white')
    for index, tile in enumerate(tiles):
        row, col = divmod(index, columns)
        canvas.paste(tile, (col * (width + gap), row * (height + gap)))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    canvas.save(path, format='PNG')
    logger.debug("拼接预览图已保存: %s（%d幅）", path, len(tiles))
