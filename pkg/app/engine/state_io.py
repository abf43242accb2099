#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
组状态持久化模块
.grs 文件：一行JSON头（段表与元数据）+ 小端float64数据段，往返逐位一致
"""

import json
import logging
import os
from collections import OrderedDict
from dataclasses import asdict
from typing import Dict, List

import numpy as np

from app.config import FORMAT_VERSION, STATE_MAGIC
from app.engine.engine import GroupState, TraceEntry
from app.errors import StateFormatError, VersionMismatchError
from app.generative import ElboBreakdown, IntensityCodebook, ObjectiveTerms
from app.grid import CategoricalField, GridSpec, ImageField, VectorField
from app.registration import TransformSet, VelocitySet
from app.structure import ViewExtractorParams

logger = logging.getLogger(__name__)

_DTYPE = '<f8'


def state_arrays(state: GroupState) -> Dict[str, np.ndarray]:
    """按固定顺序列出状态中的全部数组段"""
    arrays: Dict[str, np.ndarray] = OrderedDict()
    for j, image in enumerate(state.images):
        arrays[f'image/{j}'] = image.values
    for j, posterior in enumerate(state.posteriors):
        arrays[f'posterior/{j}'] = posterior.probs
    for l, fields in enumerate(state.velocities.fields):
        for j, v in enumerate(fields):
            arrays[f'velocity/{l}/{j}'] = v.vectors
    for j, v in enumerate(state.totals):
        arrays[f'total/{j}'] = v.vectors
    for j, v in enumerate(state.transforms.forward):
        arrays[f'forward/{j}'] = v.vectors
    for j, v in enumerate(state.transforms.inverse):
        arrays[f'inverse/{j}'] = v.vectors
    arrays['fused'] = state.fused.probs
    for name, levels in state.codebook.levels.items():
        arrays[f'codebook/{name}'] = levels
    return arrays


def _metadata(state: GroupState) -> Dict:
    breakdown = state.breakdown
    return {
        'modalities': state.modalities,
        'grids': [{'dims': list(g.dims), 'spacing': list(g.spacing)} for g in state.grids],
        'num_images': state.num_images,
        'extractor': state.extractor.to_text(),
        'codebook_modalities': state.codebook.modalities,
        'codebook_empty': {k: list(v) for k, v in state.codebook.empty_classes.items()},
        'breakdown': {
            'reconstruction': breakdown.reconstruction,
            'structure': breakdown.structure,
            'regularization': breakdown.regularization,
            'structure_per_level': list(breakdown.structure_per_level),
            'regularization_per_level': list(breakdown.regularization_per_level),
            'extras': breakdown.extras,
        },
        'terms': {
            'loglik': list(state.terms.loglik),
            'structural': list(state.terms.structural),
            'velocity_kl': [list(level) for level in state.terms.velocity_kl],
        },
        'trace': [asdict(entry) for entry in state.trace],
        'norm_history': state.norm_history,
    }


def export_state(state: GroupState, path: str):
    """写出组状态（先写临时文件再替换）"""
    sections = []
    chunks = []
    offset = 0
    for name, array in state_arrays(state).items():
        data = np.ascontiguousarray(array, dtype=_DTYPE).tobytes()
        sections.append({'name': name, 'shape': list(array.shape), 'offset': offset, 'nbytes': len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        'magic': STATE_MAGIC,
        'version': FORMAT_VERSION,
        'dtype': _DTYPE,
        'sections': sections,
        'meta': _metadata(state),
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as f:
        f.write(json.dumps(header, ensure_ascii=False).encode('utf-8'))
        f.write(b'\n')
        for chunk in chunks:
            f.write(chunk)
    os.replace(tmp_path, path)
    logger.info("组状态已保存: %s（%d个数据段）", path, len(sections))


def _parse_header(raw: bytes):
    newline = raw.find(b'\n')
    if newline < 0:
        raise StateFormatError('header', "缺少头部结束符", offset=len(raw))
    try:
        header = json.loads(raw[:newline].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise StateFormatError('header', f"头部不是合法JSON: {e}", offset=0) from e
    if not isinstance(header, dict) or header.get('magic') != STATE_MAGIC:
        raise StateFormatError('header', "文件标识不是组状态文件", offset=0)
    if header.get('version') != FORMAT_VERSION:
        raise VersionMismatchError(header.get('version'), FORMAT_VERSION)
    for key in ('sections', 'meta'):
        if key not in header:
            raise StateFormatError('header', f"缺少字段{key}", offset=0)
    return header, newline + 1


def _read_sections(raw: bytes, header: Dict, start: int) -> Dict[str, np.ndarray]:
    payload = raw[start:]
    arrays = {}
    for section in header['sections']:
        name = section.get('name', '?')
        try:
            offset, nbytes, shape = int(section['offset']), int(section['nbytes']), tuple(section['shape'])
        except (KeyError, TypeError, ValueError) as e:
            raise StateFormatError(name, f"段描述不完整: {e}") from e
        expected = int(np.prod(shape)) * np.dtype(_DTYPE).itemsize
        if nbytes != expected:
            raise StateFormatError(name, f"段长度{nbytes}与形状{shape}不符", offset=start + offset)
        if offset + nbytes > len(payload):
            raise StateFormatError(name, "数据被截断", offset=start + offset)
        arrays[name] = np.frombuffer(payload, dtype=_DTYPE, count=int(np.prod(shape)),
                                     offset=offset).reshape(shape).astype(np.float64)
    return arrays


def import_state(path: str) -> GroupState:
    """读取组状态；格式错误时抛出指明段名的异常，不返回部分状态"""
    with open(path, 'rb') as f:
        raw = f.read()
    header, start = _parse_header(raw)
    arrays = _read_sections(raw, header, start)
    meta = header['meta']

    def take(name: str) -> np.ndarray:
        if name not in arrays:
            raise StateFormatError(name, "缺少数据段")
        return arrays[name]

    def build(name: str, factory):
        """由数据段构造对象；取值非法时报告该段名"""
        data = take(name)
        try:
            return factory(data)
        except ValueError as e:
            raise StateFormatError(name, f"数据段取值非法: {e}") from e

    try:
        grids = [GridSpec(tuple(g['dims']), tuple(g['spacing'])) for g in meta['grids']]
        finest = grids[-1]
        n = int(meta['num_images'])
        extractor = ViewExtractorParams.from_text(meta['extractor'])
        b = meta['breakdown']
        breakdown = ElboBreakdown(b['reconstruction'], b['structure'], b['regularization'],
                                  tuple(b['structure_per_level']), tuple(b['regularization_per_level']),
                                  dict(b.get('extras', {})))
        t = meta['terms']
        terms = ObjectiveTerms(tuple(t['loglik']), tuple(t['structural']),
                               tuple(tuple(level) for level in t['velocity_kl']))
        trace: List[TraceEntry] = [TraceEntry(**entry) for entry in meta['trace']]
        codebook_modalities = list(meta['codebook_modalities'])
        codebook_empty = {k: tuple(v) for k, v in meta.get('codebook_empty', {}).items()}
        modalities = list(meta['modalities'])
        norm_history = list(meta.get('norm_history', []))
    except (KeyError, TypeError, IndexError, ValueError) as e:
        raise StateFormatError('meta', f"元数据不完整或非法: {e}") from e

    def vectors(grid: GridSpec):
        return lambda data: VectorField(grid, data)

    images = [build(f'image/{j}', lambda data: ImageField(finest, data)) for j in range(n)]
    posteriors = [build(f'posterior/{j}', lambda data: CategoricalField(finest, data)) for j in range(n)]
    velocity_fields = [[build(f'velocity/{l}/{j}', vectors(g)) for j in range(n)] for l, g in enumerate(grids)]
    totals = [build(f'total/{j}', vectors(finest)) for j in range(n)]
    forward = [build(f'forward/{j}', vectors(finest)) for j in range(n)]
    inverse = [build(f'inverse/{j}', vectors(finest)) for j in range(n)]
    try:
        velocities = VelocitySet(grids, velocity_fields)
        transforms = TransformSet(forward, inverse)
    except ValueError as e:
        raise StateFormatError('meta', f"网格与数据段不一致: {e}") from e
    levels = {name: take(f'codebook/{name}') for name in codebook_modalities}
    try:
        codebook = IntensityCodebook(levels, codebook_empty)
    except ValueError as e:
        raise StateFormatError('codebook', f"码本非法: {e}") from e
    state = GroupState(
        images=images,
        modalities=modalities,
        extractor=extractor,
        posteriors=posteriors,
        velocities=velocities,
        totals=totals,
        transforms=transforms,
        codebook=codebook,
        fused=build('fused', lambda data: CategoricalField(finest, data)),
        breakdown=breakdown,
        terms=terms,
        trace=trace,
        norm_history=norm_history,
    )
    logger.info("组状态已读取: %s（%d幅图像）", path, n)
    return state
