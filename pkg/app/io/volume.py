#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
体数据读写模块
原生 .grc 容器：一行JSON头 + 小端原始数组；NIfTI 通过 nibabel 读入与导出
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError
from nibabel.spatialimages import HeaderDataError

from app.config import CONTAINER_MAGIC, CONTAINER_SUFFIX, FORMAT_VERSION
from app.errors import ContainerFormatError, InvalidInputError, VersionMismatchError
from app.grid import CategoricalField, GridSpec, ImageField, LabelField, VectorField

logger = logging.getLogger(__name__)

AnyField = Union[ImageField, VectorField, CategoricalField, LabelField]

KINDS = ('image', 'vector', 'categorical', 'label')
DTYPES = ('<f4', '<f8')
NIFTI_SUFFIXES = ('.nii', '.nii.gz')

# NIfTI-1 头部中magic字段的字节偏移
NIFTI_MAGIC_OFFSET = 344

# 所有类型默认以float32保存；类别场读回后逐体素重新归一化
DEFAULT_DTYPES = {'image': '<f4', 'label': '<f4', 'vector': '<f4', 'categorical': '<f4'}

# 读回类别场时允许的概率和偏差（float32舍入）
SIMPLEX_READ_TOL = 1e-4


@dataclass(frozen=True)
class ArrayContainer:
    """自描述数组容器"""
    kind: str
    grid: GridSpec
    data: np.ndarray
    channels: Optional[int] = None
    dtype: str = '<f4'

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"未知数据类型: {self.kind}")
        if self.dtype not in DTYPES:
            raise InvalidInputError(f"不支持的数据精度: {self.dtype}")
        if self.data.shape != self.shape:
            raise InvalidInputError(f"数组形状{self.data.shape}与头部形状{self.shape}不一致")

    @property
    def shape(self) -> Tuple[int, ...]:
        if self.kind in ('vector', 'categorical'):
            return (self.channels,) + self.grid.dims
        return self.grid.dims

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape)) * np.dtype(self.dtype).itemsize

    def header(self) -> dict:
        return {
            'magic': CONTAINER_MAGIC,
            'version': FORMAT_VERSION,
            'kind': self.kind,
            'dims': list(self.grid.dims),
            'spacing': list(self.grid.spacing),
            'dtype': self.dtype,
            'channels': self.channels,
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), ensure_ascii=False).encode('utf-8') + b'\n'
        return head + np.ascontiguousarray(self.data, dtype=self.dtype).tobytes()

    @classmethod
    def from_field(cls, field: AnyField, dtype: Optional[str] = None) -> 'ArrayContainer':
        if isinstance(field, ImageField):
            kind, data, channels = 'image', field.values, None
        elif isinstance(field, VectorField):
            kind, data, channels = 'vector', field.vectors, field.grid.ndim
        elif isinstance(field, CategoricalField):
            kind, data, channels = 'categorical', field.probs, field.num_classes
        elif isinstance(field, LabelField):
            kind, data, channels = 'label', field.labels, field.num_labels
        else:
            raise InvalidInputError(f"无法保存的对象类型: {type(field).__name__}")
        dtype = dtype or DEFAULT_DTYPES[kind]
        return cls(kind, field.grid, np.asarray(data, dtype=dtype), channels, dtype)

    def to_field(self) -> AnyField:
        data = self.data.astype(np.float64)
        if self.kind == 'image':
            return ImageField(self.grid, data)
        if self.kind == 'vector':
            return VectorField(self.grid, data)
        if self.kind == 'categorical':
            return _read_categorical(self.grid, data)
        return LabelField(self.grid, data.astype(np.int64), int(self.channels))


def _read_categorical(grid: GridSpec, data: np.ndarray) -> CategoricalField:
    if data.min() < 0 or np.max(np.abs(data.sum(axis=0) - 1.0)) > SIMPLEX_READ_TOL:
        raise InvalidInputError("类别场的概率不在单纯形上")
    return CategoricalField.normalized(grid, data)


def _header_value(header: dict, key: str):
    if key not in header:
        raise ContainerFormatError(f"头部缺少字段{key}", offset=0, section='header')
    return header[key]


def parse_container(raw: bytes) -> ArrayContainer:
    """解析 .grc 字节串；任何不一致都会抛出带字节偏移的异常"""
    newline = raw.find(b'\n')
    if newline < 0:
        raise ContainerFormatError("缺少头部结束符", offset=len(raw), section='header')
    try:
        header = json.loads(raw[:newline].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerFormatError(f"头部不是合法JSON: {e}", offset=0, section='header') from e
    if not isinstance(header, dict) or header.get('magic') != CONTAINER_MAGIC:
        raise ContainerFormatError("文件标识不是数组容器", offset=0, section='header')
    if header.get('version') != FORMAT_VERSION:
        raise VersionMismatchError(header.get('version'), FORMAT_VERSION)

    kind = _header_value(header, 'kind')
    dtype = _header_value(header, 'dtype')
    channels = header.get('channels')
    try:
        grid = GridSpec(tuple(int(n) for n in _header_value(header, 'dims')),
                        tuple(float(s) for s in _header_value(header, 'spacing')))
    except (TypeError, ValueError) as e:
        raise ContainerFormatError(f"头部网格描述非法: {e}", offset=0, section='header') from e
    if kind not in KINDS or dtype not in DTYPES:
        raise ContainerFormatError(f"头部类型非法: kind={kind}, dtype={dtype}", offset=0, section='header')
    if kind in ('vector', 'categorical', 'label') and not isinstance(channels, int):
        raise ContainerFormatError(f"{kind}类型需要整数channels", offset=0, section='header')

    shape = ((channels,) + grid.dims) if kind in ('vector', 'categorical') else grid.dims
    start = newline + 1
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    payload = len(raw) - start
    if payload != expected:
        raise ContainerFormatError(f"数据长度{payload}与头部推算的{expected}字节不符",
                                   offset=start + min(payload, expected), section='payload')
    data = np.frombuffer(raw, dtype=dtype, offset=start).reshape(shape)
    return ArrayContainer(kind, grid, data.copy(), channels, dtype)


def _is_nifti(path: str) -> bool:
    return path.endswith(NIFTI_SUFFIXES)


def _read_nifti(path: str, kind: str) -> AnyField:
    try:
        image = nib.load(path)
        data = np.asarray(image.get_fdata(), dtype=np.float64)
    except (ImageFileError, HeaderDataError, EOFError) as e:
        raise ContainerFormatError(f"无法解析NIfTI文件: {e}", offset=NIFTI_MAGIC_OFFSET,
                                   section='nifti') from e
    while data.ndim > 2 and data.shape[-1] == 1:
        data = data[..., 0]
    zooms = tuple(float(z) for z in image.header.get_zooms()[:data.ndim])
    grid = GridSpec(data.shape, zooms)
    if kind == 'label':
        return LabelField(grid, np.rint(data).astype(np.int64), int(data.max()) + 1)
    if kind != 'image':
        raise InvalidInputError(f"NIfTI只支持读入image或label: {kind}")
    return ImageField(grid, data)


def _write_nifti(field: AnyField, path: str):
    container = ArrayContainer.from_field(field, '<f4')
    data = container.data
    if container.kind in ('vector', 'categorical'):
        data = np.moveaxis(data, 0, -1)
    affine = np.diag(list(field.grid.spacing)[:3] + [1.0] * (4 - min(3, field.grid.ndim)))
    nib.save(nib.Nifti1Image(data.astype(np.float32), affine), path)


def read_volume(path: str, kind: str = 'image') -> AnyField:
    """读取体数据：.grc 自带类型；.nii/.nii.gz 按kind解释"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"文件不存在: {path}")
    if _is_nifti(path):
        field = _read_nifti(path, kind)
    else:
        with open(path, 'rb') as f:
            field = parse_container(f.read()).to_field()
    logger.debug("已读取 %s: %s", path, field.grid.dims)
    return field


def write_volume(field: AnyField, path: str, dtype: Optional[str] = None):
    """写出体数据；扩展名为 .nii/.nii.gz 时导出NIfTI，否则写 .grc 容器"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    if _is_nifti(path):
        _write_nifti(field, path)
    else:
        if not path.endswith(CONTAINER_SUFFIX):
            logger.warning("输出文件 %s 没有%s扩展名", path, CONTAINER_SUFFIX)
        with open(path, 'wb') as f:
            f.write(ArrayContainer.from_field(field, dtype).to_bytes())
    logger.debug("已写出 %s", path)
