#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
命令实现模块
register / evaluate / synth / plotdata / benchmark 五个子命令的实现
每个输出目录都带有可用于重跑的 manifest.json
"""

import csv
import json
from contextlib import contextmanager
import logging
import os
import platform
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import nibabel
import numpy as np
import PIL
import scipy

from app.config import APP_NAME, APP_VERSION, CONTAINER_SUFFIX, STATE_SUFFIX
from app.data.database import RunLedger
from app.engine import GroupState, export_state, import_state, reconstruct, register_group
from app.errors import GridMismatchError, InvalidInputError
from app.evaluation import groupwise_metrics, make_phantom_group
from app.evaluation.benchmark import run_acceptance
from app.grid import LabelField, VectorField, warp
from app.io.preview import save_mosaic
from app.io.run_config import RunConfig
from app.io.volume import read_volume, write_volume
from app.utils.reporter import ProgressReporter

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
STATE_NAME = f"state{STATE_SUFFIX}"
TRACE_COLUMNS = ('level', 'iteration', 'loss', 'alpha', 'backtracks')
METRIC_COLUMNS = ('group_id', 'group_size', 'dice', 'assd', 'neg_jacobian_pct', 'gwi')
METRIC_NAMES = ('dice', 'assd', 'neg_jacobian_pct', 'gwi')


def _versions() -> Dict[str, str]:
    return {
        APP_NAME: APP_VERSION,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'nibabel': nibabel.__version__,
        'Pillow': PIL.__version__,
    }


def _write_json(path: str, data: Dict):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write('\n')


def _write_csv(path: str, columns: Sequence[str], rows: Iterable[Dict]):
    if os.path.isdir(path) or not path.endswith('.csv'):
        raise InvalidInputError(f"输出路径必须是.csv文件: {path}")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction='ignore')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, '') for k in columns})


def read_csv(path: str) -> List[Dict[str, str]]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"文件不存在: {path}")
    with open(path, 'r', encoding='utf-8', newline='') as f:
        return list(csv.DictReader(f))


def _manifest(command: str, config: RunConfig, arguments: Dict, files: Dict,
              reporter: ProgressReporter) -> Dict:
    return {
        'command': command,
        'arguments': arguments,
        'config': config.to_dict(),
        'config_hash': config.config_hash(),
        'seed': config.seed,
        'threads': config.threads,
        'versions': _versions(),
        'files': files,
        'events': [{'kind': e['kind'], 'message': e['message']} for e in reporter.events],
    }


def load_manifest(directory: str) -> Dict:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FileNotFoundError(f"目录中没有{MANIFEST_NAME}: {directory}")
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def _manifest_files(directory: str, key: str) -> List[str]:
    files = load_manifest(directory).get('files', {})
    if key not in files:
        raise InvalidInputError(f"{directory} 的清单中没有 {key} 文件列表")
    entries = files[key]
    if isinstance(entries, str):
        entries = [entries]
    return [os.path.join(directory, name) for name in entries]


def expand_inputs(paths: Sequence[str], key: str) -> List[str]:
    """单个目录参数展开为其清单中的文件列表，其余原样返回"""
    if len(paths) == 1 and os.path.isdir(paths[0]):
        return _manifest_files(paths[0], key)
    for path in paths:
        if not os.path.exists(path):
            raise FileNotFoundError(f"输入文件不存在: {path}")
    return list(paths)


def _load_all(paths: Sequence[str], kind: str, role: str) -> list:
    fields = [read_volume(path, kind) for path in paths]
    if fields:
        grid = fields[0].grid
        for path, f in zip(paths, fields):
            if f.grid != grid:
                raise GridMismatchError(f"{role}文件 {path} 的网格{f.grid.dims}与{paths[0]}的{grid.dims}不一致")
    return fields


@contextmanager
def _ledger_run(ledger: Optional[RunLedger], command: str, config: RunConfig,
                out_dir: str) -> Iterator[Optional[int]]:
    """登记一次运行；块内抛出异常时把运行标记为failed"""
    if ledger is None:
        yield None
        return
    run_id = ledger.start_run(command, config.config_hash(), config.seed, out_dir)
    try:
        yield run_id
    except Exception as e:
        ledger.finish_run(run_id, 'failed', {'error': str(e)})
        raise


def _finish(ledger: Optional[RunLedger], run_id: Optional[int], details: Dict):
    if ledger is not None and run_id is not None:
        ledger.finish_run(run_id, 'completed', details)


def trace_rows(state: GroupState) -> List[Dict]:
    return [{'level': t.level, 'iteration': t.iteration, 'loss': repr(t.loss),
             'alpha': repr(t.alpha), 'backtracks': t.backtracks} for t in state.trace]


def norm_rows(state: GroupState) -> Tuple[List[str], List[Dict]]:
    columns = ['level', 'iteration'] + [f'norm_level{l + 1}' for l in range(len(state.grids))]
    rows = []
    for record in state.norm_history:
        row = {'level': record['level'], 'iteration': record['iteration']}
        for l, value in enumerate(record['norms']):
            row[f'norm_level{l + 1}'] = repr(value)
        rows.append(row)
    return columns, rows


def cmd_register(inputs: Sequence[str], out_dir: str, config: Optional[RunConfig] = None,
                 modalities: Optional[Sequence[str]] = None,
                 reporter: Optional[ProgressReporter] = None,
                 ledger: Optional[RunLedger] = None) -> Dict:
    """配准一组图像并写出变换、融合后验、码本、轨迹与清单"""
    config = config or RunConfig()
    reporter = reporter or ProgressReporter("register")
    paths = expand_inputs(inputs, 'images')
    if modalities is None:
        if len(inputs) == 1 and os.path.isdir(inputs[0]):
            modalities = load_manifest(inputs[0]).get('modalities')
        if modalities is None:
            raise InvalidInputError("请通过--modalities为每幅图像指定模态")
    modalities = list(modalities)
    if len(modalities) != len(paths):
        raise InvalidInputError(f"模态数量{len(modalities)}与图像数量{len(paths)}不一致")

    with _ledger_run(ledger, 'register', config, out_dir) as run_id:
        manifest = _register_outputs(paths, modalities, out_dir, config, reporter)
        _finish(ledger, run_id, manifest['summary'])
    return manifest


def _register_outputs(paths: Sequence[str], modalities: List[str], out_dir: str,
                      config: RunConfig, reporter: ProgressReporter) -> Dict:
    images = _load_all(paths, 'image', '图像')
    reporter.announce(f"读取{len(images)}幅图像，模态{sorted(set(modalities))}")
    state = register_group(images, modalities, config.engine_config(), reporter)

    os.makedirs(out_dir, exist_ok=True)
    files: Dict = {'forward': [], 'inverse': [], 'reconstructions': []}
    for j in range(state.num_images):
        for key, fields in (('forward', state.transforms.forward), ('inverse', state.transforms.inverse)):
            name = f"{key}_{j:03d}{CONTAINER_SUFFIX}"
            write_volume(fields[j], os.path.join(out_dir, name))
            files[key].append(name)
        name = f"reconstruction_{j:03d}{CONTAINER_SUFFIX}"
        write_volume(reconstruct(state, j), os.path.join(out_dir, name))
        files['reconstructions'].append(name)
    write_volume(state.fused, os.path.join(out_dir, f"fused{CONTAINER_SUFFIX}"))
    files['fused'] = f"fused{CONTAINER_SUFFIX}"
    _write_json(os.path.join(out_dir, 'codebook.json'),
                {name: [repr(float(v)) for v in levels] for name, levels in state.codebook.levels.items()})
    files['codebook'] = 'codebook.json'
    _write_csv(os.path.join(out_dir, 'trace.csv'), TRACE_COLUMNS, trace_rows(state))
    files['trace'] = 'trace.csv'
    export_state(state, os.path.join(out_dir, STATE_NAME))
    files['state'] = STATE_NAME

    warped = [warp(image, transform, 'linear') for image, transform in zip(state.images, state.transforms.forward)]
    save_mosaic(state.images, os.path.join(out_dir, 'preview_inputs.png'))
    save_mosaic(warped + [state.fused], os.path.join(out_dir, 'preview_warped.png'))
    files['previews'] = ['preview_inputs.png', 'preview_warped.png']

    breakdown = state.breakdown
    summary = {'loss': breakdown.loss, 'reconstruction': breakdown.reconstruction,
               'structure': breakdown.structure, 'regularization': breakdown.regularization,
               'accepted_steps': len(state.trace) - 1}
    reporter.announce_success(f"结果已写入 {out_dir}")
    manifest = _manifest('register', config, {'inputs': [os.path.abspath(p) for p in paths],
                                             'modalities': modalities}, files, reporter)
    manifest['summary'] = summary
    _write_json(os.path.join(out_dir, MANIFEST_NAME), manifest)
    return manifest


def cmd_evaluate(labels: Sequence[str], out_csv: str, transforms: Optional[Sequence[str]] = None,
                 ground_truth: Optional[Sequence[str]] = None, foreground: Optional[str] = None,
                 config: Optional[RunConfig] = None, group_id: str = 'group0',
                 reporter: Optional[ProgressReporter] = None,
                 ledger: Optional[RunLedger] = None) -> List[Dict]:
    """按预测变换评估一组标签；给出真值变换与前景时同时计算gWI"""
    config = config or RunConfig()
    reporter = reporter or ProgressReporter("evaluate")
    if not out_csv.endswith('.csv') or os.path.isdir(out_csv):
        raise InvalidInputError(f"输出路径必须是.csv文件: {out_csv}")
    label_paths = expand_inputs(labels, 'labels')
    label_fields: List[LabelField] = _load_all(label_paths, 'label', '标签')
    grid = label_fields[0].grid

    if transforms:
        transform_paths = expand_inputs(transforms, 'forward')
        predicted: List[VectorField] = _load_all(transform_paths, 'vector', '变换')
    else:
        reporter.announce("未给出预测变换，按恒等变换评估")
        predicted = [VectorField.zeros(grid) for _ in label_fields]
    if len(predicted) != len(label_fields):
        raise InvalidInputError(f"变换数量{len(predicted)}与标签数量{len(label_fields)}不一致")
    if predicted[0].grid != grid:
        raise GridMismatchError(f"变换网格{predicted[0].grid.dims}与标签网格{grid.dims}不一致")

    truth, mask = None, None
    if ground_truth:
        truth_dir = ground_truth[0] if len(ground_truth) == 1 and os.path.isdir(ground_truth[0]) else None
        truth = _load_all(expand_inputs(ground_truth, 'ground_truth'), 'vector', '真值变换')
        if foreground is None and truth_dir is not None:
            foreground = _manifest_files(truth_dir, 'anatomy')[0]
        if foreground is None:
            raise InvalidInputError("计算gWI需要前景（--foreground或合成目录中的anatomy）")
        anatomy = read_volume(foreground, 'label')
        if anatomy.grid.dims != grid.dims:
            raise GridMismatchError(f"前景文件 {foreground} 网格与标签不一致")
        mask = anatomy.labels > 0

    spacing = grid.spacing if config.evaluation.physical_units else None
    record = groupwise_metrics(predicted, label_fields, truth, mask, config.evaluation.label, spacing)
    row = {'group_id': group_id, **{k: repr(float(v)) for k, v in record.items()}}
    row['group_size'] = len(label_fields)
    _write_csv(out_csv, METRIC_COLUMNS, [row])
    if ledger is not None:
        with _ledger_run(ledger, 'evaluate', config, os.path.dirname(os.path.abspath(out_csv))) as run_id:
            ledger.add_metrics(run_id, group_id, record)
            _finish(ledger, run_id, record)
    reporter.announce_success(f"评估完成：DSC={record['dice']:.4f}，ASSD={record['assd']:.4f}")
    return [row]


def cmd_synth(out_dir: str, config: Optional[RunConfig] = None,
              reporter: Optional[ProgressReporter] = None,
              ledger: Optional[RunLedger] = None) -> Dict:
    """生成合成体模组：图像、标签、真值变换、解剖图与清单"""
    config = config or RunConfig()
    reporter = reporter or ProgressReporter("synth")
    with _ledger_run(ledger, 'synth', config, out_dir) as run_id:
        manifest = _synth_outputs(out_dir, config, reporter)
        _finish(ledger, run_id, {'images': len(manifest['files']['images'])})
    return manifest


def _synth_outputs(out_dir: str, config: RunConfig, reporter: ProgressReporter) -> Dict:
    synth = config.synth
    group = make_phantom_group(shape=synth.shape, modalities=synth.modalities, codebooks=synth.codebooks,
                               noise=synth.noise, ffd=synth.ffd(config.seed), seed=config.seed,
                               repeats=synth.repeats, blur=synth.blur)
    os.makedirs(out_dir, exist_ok=True)
    prefixes = {'images': 'image', 'labels': 'label', 'ground_truth': 'gt'}
    files: Dict = {key: [] for key in prefixes}
    for j in range(group.size):
        for key, field in (('images', group.images[j]), ('labels', group.labels[j]),
                           ('ground_truth', group.transforms[j])):
            name = f"{prefixes[key]}_{j:03d}{CONTAINER_SUFFIX}"
            write_volume(field, os.path.join(out_dir, name))
            files[key].append(name)
    write_volume(group.anatomy, os.path.join(out_dir, f"anatomy{CONTAINER_SUFFIX}"))
    files['anatomy'] = f"anatomy{CONTAINER_SUFFIX}"
    save_mosaic(group.images, os.path.join(out_dir, 'preview.png'))
    save_mosaic(group.labels, os.path.join(out_dir, 'preview_labels.png'))
    files['previews'] = ['preview.png', 'preview_labels.png']
    reporter.announce_success(f"已生成{group.size}幅体模图像: {out_dir}")
    manifest = _manifest('synth', config, {'out': os.path.abspath(out_dir)}, files, reporter)
    manifest['modalities'] = group.modalities
    manifest['shape'] = list(synth.shape)
    _write_json(os.path.join(out_dir, MANIFEST_NAME), manifest)
    return manifest


def _load_trace(source: str) -> Tuple[List[Dict], Optional[GroupState]]:
    if os.path.isdir(source):
        source = os.path.join(source, STATE_NAME)
    if source.endswith(STATE_SUFFIX):
        state = import_state(source)
        return trace_rows(state), state
    if source.endswith('.csv'):
        return read_csv(source), None
    raise InvalidInputError(f"无法识别的绘图数据来源: {source}")


def cmd_plotdata(out_dir: str, source: Optional[str] = None,
                 ledger: Optional[RunLedger] = None,
                 metrics: Sequence[str] = METRIC_NAMES,
                 reporter: Optional[ProgressReporter] = None) -> Dict[str, str]:
    """导出绘图用CSV：目标轨迹、各层速度范数、指标随组规模的变化"""
    reporter = reporter or ProgressReporter("plotdata")
    if source is None and ledger is None:
        raise InvalidInputError("需要状态/轨迹来源或运行记录数据库")
    os.makedirs(out_dir, exist_ok=True)
    written: Dict[str, str] = {}
    if source is not None:
        rows, state = _load_trace(source)
        path = os.path.join(out_dir, 'trace.csv')
        _write_csv(path, TRACE_COLUMNS, rows)
        written['trace'] = path
        if state is not None:
            columns, norms = norm_rows(state)
            path = os.path.join(out_dir, 'velocity_norms.csv')
            _write_csv(path, columns, norms)
            written['velocity_norms'] = path
    if ledger is not None:
        rows = []
        for name in metrics:
            for entry in ledger.metric_by_group_size(name):
                rows.append({'metric': name, **entry})
        path = os.path.join(out_dir, 'metric_vs_group_size.csv')
        _write_csv(path, ('metric', 'group_size', 'mean', 'count'), rows)
        written['metric_vs_group_size'] = path
    reporter.announce_success(f"已导出{len(written)}个绘图数据文件")
    return written


def cmd_benchmark(out_csv: str, suite: str = 'quick', seed: int = 0,
                  only: Optional[Sequence[int]] = None,
                  reporter: Optional[ProgressReporter] = None) -> List[Dict]:
    """运行验收基准并写出CSV"""
    reporter = reporter or ProgressReporter("benchmark")
    if not out_csv.endswith('.csv') or os.path.isdir(out_csv):
        raise InvalidInputError(f"输出路径必须是.csv文件: {out_csv}")
    results = run_acceptance(suite, seed, reporter, list(only) if only else None)
    rows = [{'criterion': r.criterion, 'name': r.name, 'value': repr(r.value), 'threshold': r.threshold,
             'passed': int(r.passed), 'seconds': r.seconds, 'detail': r.detail} for r in results]
    _write_csv(out_csv, ('criterion', 'name', 'value', 'threshold', 'passed', 'seconds', 'detail'), rows)
    failed = [r.criterion for r in results if not r.passed]
    if failed:
        reporter.announce_error(f"未通过的准则: {failed}")
    else:
        reporter.announce_success(f"全部{len(results)}项准则通过")
    return rows
