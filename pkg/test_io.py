#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
输入输出与命令行测试
数组容器、NIfTI、运行配置、预览图、运行记录数据库以及各子命令的退出码
"""

import json
import logging
import os

import numpy as np
import pytest
from PIL import Image

from app.cli.commands import cmd_evaluate, cmd_synth, read_csv
from app.data.database import RunLedger
from app.engine import import_state
from app.errors import (
    ConfigError,
    ContainerFormatError,
    EXIT_INTERNAL,
    EXIT_OK,
    EXIT_USAGE,
    InvalidInputError,
    VersionMismatchError,
    exit_code_for,
)
from app.grid import CategoricalField, GridSpec, ImageField, LabelField, VectorField
from app.io.preview import save_mosaic, save_preview, to_uint8
from app.io.run_config import RunConfig
from app.io.volume import ArrayContainer, parse_container, read_volume, write_volume
from main import main

GRID = GridSpec((16, 12), (1.5, 0.5))

SMALL_CONFIG = {
    'engine': {'levels': 2, 'iters_per_level': 3, 'num_classes': 4, 'em_iters': 10},
    'synth': {'shape': [32, 32], 'ffd_spacing': 8.0, 'ffd_bound': 2.0},
}


def _config_file(tmp_path, data=None, name='config.json') -> str:
    path = tmp_path / name
    path.write_text(json.dumps(SMALL_CONFIG if data is None else data), encoding='utf-8')
    return str(path)


def _image() -> ImageField:
    # 取float32可精确表示的值
    values = np.random.default_rng(0).normal(size=GRID.dims).astype(np.float32)
    return ImageField(GRID, values.astype(np.float64))


def test_container_round_trips(tmp_path):
    image = _image()
    write_volume(image, str(tmp_path / 'image.grc'))
    restored = read_volume(str(tmp_path / 'image.grc'))
    assert restored.grid == GRID
    assert np.array_equal(restored.values, image.values)

    vectors = VectorField(GRID, np.random.default_rng(1).normal(size=(2,) + GRID.dims))
    write_volume(vectors, str(tmp_path / 'vector.grc'))
    assert parse_container((tmp_path / 'vector.grc').read_bytes()).dtype == '<f4'
    expected = vectors.vectors.astype(np.float32).astype(np.float64)
    assert np.array_equal(read_volume(str(tmp_path / 'vector.grc')).vectors, expected)
    write_volume(vectors, str(tmp_path / 'vector64.grc'), dtype='<f8')
    assert np.array_equal(read_volume(str(tmp_path / 'vector64.grc')).vectors, vectors.vectors)

    probs = CategoricalField.normalized(GRID, np.random.default_rng(2).uniform(0.1, 1.0, size=(3,) + GRID.dims))
    write_volume(probs, str(tmp_path / 'probs.grc'))
    restored = read_volume(str(tmp_path / 'probs.grc'))
    assert np.allclose(restored.probs, probs.probs, atol=1e-6)
    assert np.allclose(restored.probs.sum(axis=0), 1.0, atol=1e-12)

    labels = LabelField(GRID, np.arange(GRID.size).reshape(GRID.dims) % 5, 5)
    write_volume(labels, str(tmp_path / 'labels.grc'))
    restored = read_volume(str(tmp_path / 'labels.grc'))
    assert isinstance(restored, LabelField)
    assert restored.num_labels == 5
    assert np.array_equal(restored.labels, labels.labels)


def test_categorical_container_rejects_values_off_simplex(tmp_path):
    probs = np.full((2,) + GRID.dims, 0.5)
    probs[0, 0, 0] = 0.7
    container = ArrayContainer('categorical', GRID, probs.astype(np.float32), 2, '<f4')
    (tmp_path / 'bad.grc').write_bytes(container.to_bytes())
    with pytest.raises(InvalidInputError):
        read_volume(str(tmp_path / 'bad.grc'))


def test_container_header_is_one_json_line():
    raw = ArrayContainer.from_field(_image()).to_bytes()
    head, _, payload = raw.partition(b'\n')
    header = json.loads(head)
    assert header['version'] == 1
    assert header['kind'] == 'image'
    assert header['dims'] == [16, 12]
    assert header['spacing'] == [1.5, 0.5]
    assert len(payload) == GRID.size * 4


def test_container_format_errors():
    raw = ArrayContainer.from_field(_image()).to_bytes()

    with pytest.raises(ContainerFormatError) as info:
        parse_container(raw[:-3])
    assert info.value.section == 'payload'
    assert info.value.offset == len(raw) - 3

    with pytest.raises(ContainerFormatError) as info:
        parse_container(raw + b'\0' * 4)
    assert info.value.offset == len(raw)

    with pytest.raises(ContainerFormatError) as info:
        parse_container(b'no header terminator')
    assert info.value.section == 'header'

    with pytest.raises(ContainerFormatError):
        parse_container(raw.replace(b'"GRC"', b'"XYZ"', 1))

    with pytest.raises(VersionMismatchError):
        parse_container(raw.replace(b'"version": 1', b'"version": 2', 1))

    assert parse_container(raw).data.shape == GRID.dims


def test_nifti_round_trip(tmp_path):
    image = _image()
    path = str(tmp_path / 'image.nii.gz')
    write_volume(image, path)
    restored = read_volume(path)
    assert restored.grid.dims == GRID.dims
    assert restored.grid.spacing == pytest.approx(GRID.spacing)
    assert np.allclose(restored.values, image.values)

    labels = LabelField(GRID, np.arange(GRID.size).reshape(GRID.dims) % 3, 3)
    write_volume(labels, str(tmp_path / 'labels.nii'))
    restored = read_volume(str(tmp_path / 'labels.nii'), 'label')
    assert restored.num_labels == 3
    assert np.array_equal(restored.labels, labels.labels)


def test_read_volume_errors(tmp_path, caplog):
    with pytest.raises(FileNotFoundError):
        read_volume(str(tmp_path / 'missing.grc'))
    with caplog.at_level(logging.WARNING, logger='app.io.volume'):
        write_volume(_image(), str(tmp_path / 'image.bin'))
    assert any('.grc' in record.getMessage() for record in caplog.records)
    assert np.array_equal(read_volume(str(tmp_path / 'image.bin')).values, _image().values)


def test_run_config_defaults_and_hash():
    config = RunConfig()
    assert config.seed == 0
    assert config.threads == 1
    assert config.config_hash() == RunConfig.from_dict({}).config_hash()
    assert config.config_hash() != RunConfig(seed=1).config_hash()
    data = config.to_dict()
    assert 'seed' not in data['engine']
    assert 'threads' not in data['engine']
    assert RunConfig.from_dict(data).config_hash() == config.config_hash()


def test_run_config_error_paths():
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({'engine': {'bogus': 1}})
    assert info.value.field_path == 'engine.bogus'
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({'engine': {'prior': {'lam': -1.0}}})
    assert info.value.field_path == 'engine.prior.lam'
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({'engine': {'levels': 0}})
    assert info.value.field_path == 'engine.levels'
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({'engine': {'seed': 3}})
    assert info.value.field_path == 'engine.seed'
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({'synth': {'ffd_bound': 100.0}})
    assert info.value.field_path == 'synth.ffd_bound'
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({'synth': {'modalities': ['a']}})
    assert info.value.field_path == 'synth.modalities'
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({'synth': {'codebooks': [[0.0, 1.0]] * 3}})
    assert info.value.field_path == 'synth.codebooks'
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({'engine': {'diffusion_sigma': -1.0}})
    assert info.value.field_path == 'engine.diffusion_sigma'


def test_run_config_from_file(tmp_path):
    config = RunConfig.from_file(_config_file(tmp_path))
    assert config.engine.levels == 2
    assert config.synth.shape == (32, 32)
    bad = tmp_path / 'bad.json'
    bad.write_text('{not json', encoding='utf-8')
    with pytest.raises(ConfigError):
        RunConfig.from_file(str(bad))
    with pytest.raises(FileNotFoundError):
        RunConfig.from_file(str(tmp_path / 'missing.json'))


def test_threads_precedence(monkeypatch):
    monkeypatch.setenv('GROUPREG_THREADS', '3')
    config = RunConfig(threads=2)
    assert config.with_overrides().threads == 3
    assert config.with_overrides(threads=4).threads == 4
    assert config.with_overrides(seed=7).engine_config().seed == 7
    monkeypatch.setenv('GROUPREG_THREADS', 'many')
    with pytest.raises(ConfigError):
        config.with_overrides()
    monkeypatch.delenv('GROUPREG_THREADS')
    assert config.with_overrides().threads == 2


def test_preview_sizes(tmp_path):
    image = _image()
    save_preview(image, str(tmp_path / 'one.png'))
    with Image.open(tmp_path / 'one.png') as png:
        assert png.size == (24, 32)
    labels = LabelField(GRID, np.zeros(GRID.dims, dtype=int), 2)
    save_mosaic([image, labels], str(tmp_path / 'mosaic.png'))
    with Image.open(tmp_path / 'mosaic.png') as png:
        assert png.size == (2 * 24 + 2, 32)
    with pytest.raises(InvalidInputError):
        save_mosaic([], str(tmp_path / 'empty.png'))
    assert not np.any(to_uint8(np.full((4, 4), 3.0)))


def test_run_ledger(tmp_path):
    ledger = RunLedger(str(tmp_path / 'runs.db'))
    run_id = ledger.start_run('evaluate', 'abc', 0, str(tmp_path))
    assert ledger.get_run(run_id)['status'] == 'running'
    ledger.add_metrics(run_id, 'g0', {'group_size': 3, 'dice': 0.5})
    ledger.add_metrics(run_id, 'g1', {'group_size': 3, 'dice': 0.7})
    ledger.add_metrics(run_id, 'g2', {'group_size': 5, 'dice': 0.9})
    ledger.finish_run(run_id, 'completed', {'groups': 3})
    run = ledger.get_run(run_id)
    assert run['status'] == 'completed'
    assert run['details'] == {'groups': 3}
    rows = ledger.metric_by_group_size('dice')
    assert [r['group_size'] for r in rows] == [3, 5]
    assert rows[0]['mean'] == pytest.approx(0.6)
    assert rows[0]['count'] == 2
    with pytest.raises(ValueError):
        ledger.finish_run(run_id, 'paused')
    with pytest.raises(ValueError):
        ledger.add_metrics(run_id, 'g3', {'dice': 1.0})
    assert ledger.get_run(run_id + 100) is None


def test_failed_run_is_recorded(tmp_path):
    ledger = RunLedger(str(tmp_path / 'runs.db'))
    blocked = tmp_path / 'blocked'
    blocked.write_text('occupied', encoding='utf-8')
    config = RunConfig.from_dict(SMALL_CONFIG)
    with pytest.raises(OSError):
        cmd_synth(str(blocked), config, ledger=ledger)
    run = ledger.get_runs('synth')[0]
    assert run['status'] == 'failed'


def test_exit_codes():
    assert exit_code_for(InvalidInputError("x")) == EXIT_USAGE
    assert exit_code_for(ConfigError("engine.levels", "x")) == EXIT_USAGE
    assert exit_code_for(FileNotFoundError("x")) == EXIT_USAGE
    assert exit_code_for(RuntimeError("x")) == EXIT_INTERNAL


def test_cli_synth_writes_manifest(tmp_path):
    out = tmp_path / 'synth'
    assert main(['synth', '--out', str(out), '--config', _config_file(tmp_path), '--no-ledger']) == EXIT_OK
    manifest = json.loads((out / 'manifest.json').read_text(encoding='utf-8'))
    assert manifest['modalities'] == ['m0', 'm1', 'm2']
    assert manifest['shape'] == [32, 32]
    for key in ('images', 'labels', 'ground_truth'):
        assert len(manifest['files'][key]) == 3
        for name in manifest['files'][key]:
            assert (out / name).exists()
    assert (out / 'anatomy.grc').exists()
    assert (out / 'preview.png').exists()


def test_cli_usage_errors(tmp_path):
    single = dict(SMALL_CONFIG, synth={'shape': [32, 32], 'modalities': ['m0']})
    path = _config_file(tmp_path, single, 'single.json')
    assert main(['synth', '--out', str(tmp_path / 'x'), '--config', path, '--no-ledger']) == EXIT_USAGE
    assert main(['register', str(tmp_path / 'missing.grc'), '--modalities', 'a', 'b',
                 '--out', str(tmp_path / 'reg'), '--no-ledger']) == EXIT_USAGE
    assert main(['synth', '--out', str(tmp_path / 'x'), '--config', str(tmp_path / 'nope.json'),
                 '--no-ledger']) == EXIT_USAGE


def test_evaluate_identity_on_undeformed_group(tmp_path):
    data = dict(SMALL_CONFIG, synth={'shape': [32, 32], 'ffd_spacing': 8.0, 'ffd_bound': 0.0})
    config_path = _config_file(tmp_path, data)
    out = tmp_path / 'synth'
    db = str(tmp_path / 'runs.db')
    assert main(['synth', '--out', str(out), '--config', config_path, '--ledger', db]) == EXIT_OK

    rows = cmd_evaluate([str(out)], str(tmp_path / 'direct.csv'), config=RunConfig.from_file(config_path))
    assert float(rows[0]['dice']) == 1.0
    assert float(rows[0]['assd']) == 0.0

    csv_path = tmp_path / 'metrics.csv'
    assert main(['evaluate', '--labels', str(out), '--out', str(csv_path), '--config', config_path,
                 '--ledger', db]) == EXIT_OK
    written = read_csv(str(csv_path))
    assert written[0]['group_id'] == 'group0'
    assert written[0]['group_size'] == '3'
    assert float(written[0]['dice']) == 1.0

    assert main(['evaluate', '--labels', str(out), '--out', str(tmp_path / 'metrics.txt'),
                 '--no-ledger']) == EXIT_USAGE

    plots = tmp_path / 'plots'
    assert main(['plotdata', '--group-sizes', '--ledger', db, '--out', str(plots)]) == EXIT_OK
    curve = read_csv(str(plots / 'metric_vs_group_size.csv'))
    dice_rows = [row for row in curve if row['metric'] == 'dice']
    assert dice_rows[0]['group_size'] == '3'
    assert float(dice_rows[0]['mean']) == 1.0
    assert RunLedger(db).get_runs('evaluate')[0]['status'] == 'completed'


@pytest.mark.slow
def test_cli_register_evaluate_plotdata(tmp_path):
    config_path = _config_file(tmp_path)
    synth = tmp_path / 'synth'
    assert main(['synth', '--out', str(synth), '--config', config_path, '--no-ledger']) == EXIT_OK

    first, second = tmp_path / 'reg1', tmp_path / 'reg2'
    for out in (first, second):
        assert main(['register', str(synth), '--out', str(out), '--config', config_path,
                     '--no-ledger']) == EXIT_OK
    for j in range(3):
        name = f'forward_{j:03d}.grc'
        assert (first / name).read_bytes() == (second / name).read_bytes()
        assert (first / f'inverse_{j:03d}.grc').exists()
    manifest = json.loads((first / 'manifest.json').read_text(encoding='utf-8'))
    assert manifest['summary']['accepted_steps'] >= 0
    assert manifest['seed'] == 0

    csv_path = tmp_path / 'metrics.csv'
    assert main(['evaluate', '--labels', str(synth), '--transforms', str(first), '--ground-truth', str(synth),
                 '--out', str(csv_path), '--config', config_path, '--no-ledger']) == EXIT_OK
    row = read_csv(str(csv_path))[0]
    assert float(row['gwi']) >= 0.0
    assert 0.0 <= float(row['dice']) <= 1.0

    plots = tmp_path / 'plots'
    assert main(['plotdata', '--source', str(first), '--out', str(plots), '--no-ledger']) == EXIT_OK
    state = import_state(os.path.join(str(first), 'state.grs'))
    assert len(read_csv(str(plots / 'trace.csv'))) == len(state.trace)
    assert len(read_csv(str(plots / 'velocity_norms.csv'))) == len(state.norm_history)
