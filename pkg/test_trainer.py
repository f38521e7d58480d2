#!/usr/bin/env python3
"""
Tests for the training loop: run logs, determinism, resume, rank shrinking
and divergence handling. Everything runs on the tiny desk configuration.
"""

import os
from dataclasses import replace

import pandas as pd
import pytest

import trainer
from bench import DivergenceError
from conftest import tiny_run_config
from config import ConfigError, PdrsConfig, load_run_config
from report import MissingArtifactsError
from trainer import (
    evaluate_checkpoint, fit_single_task_references, load_checkpoint, load_reference, train
)


def read(run_dir, name):
    return pd.read_csv(os.path.join(run_dir, f'{name}.csv'))


def test_zero_epochs_records_initial_evaluation(tmp_path, tiny_trunk):
    cfg = tiny_run_config(tmp_path, epochs=0)
    record = train(cfg, cache_dir=str(tmp_path), backbone=tiny_trunk)
    assert [row.epoch for row in record.metrics] == [0]
    metrics = read(record.run_dir, 'metrics')
    assert list(metrics.columns) == ['epoch', 'seg', 'depth', 'edges', 'trainable_params', 'adapter_params',
                                     'delta_m']
    assert len(metrics) == 1
    assert not os.path.exists(os.path.join(record.run_dir, 'losses.csv'))
    assert load_run_config(os.path.join(record.run_dir, 'config.yaml')) == cfg


def test_run_directory_layout(tmp_path, tiny_trunk):
    cfg = tiny_run_config(tmp_path, reference={'seg': 0.5, 'depth': 2.0, 'edges': 0.5})
    record = train(cfg, cache_dir=str(tmp_path), backbone=tiny_trunk)
    for name in ('config.yaml', 'reference.yaml', 'metrics.csv', 'ranks.csv', 'losses.csv', 'checkpoint.npz'):
        assert os.path.exists(os.path.join(record.run_dir, name)), name
    assert load_reference(os.path.join(record.run_dir, 'reference.yaml')) == cfg.reference

    metrics = read(record.run_dir, 'metrics')
    assert list(metrics['epoch']) == [0, 1, 2]
    assert metrics['delta_m'].notna().all()
    losses = read(record.run_dir, 'losses')
    # 8 training scenes in batches of 4
    assert list(losses['step']) == [0, 1, 0, 1]
    assert {'loss_seg', 'loss_depth', 'loss_edges'} <= set(losses.columns)
    assert int(load_checkpoint(os.path.join(record.run_dir, 'checkpoint.npz'))['meta.epoch']) == 2


def test_training_is_deterministic(tmp_path, tiny_trunk):
    first = train(tiny_run_config(tmp_path, output_dir=str(tmp_path / 'a')), backbone=tiny_trunk)
    second = train(tiny_run_config(tmp_path, output_dir=str(tmp_path / 'b')), backbone=tiny_trunk)
    for name in ('metrics', 'ranks', 'losses'):
        pd.testing.assert_frame_equal(read(first.run_dir, name), read(second.run_dir, name))


def test_resume_matches_uninterrupted_run(tmp_path, tiny_trunk):
    straight = train(tiny_run_config(tmp_path, output_dir=str(tmp_path / 'straight')), backbone=tiny_trunk)

    split_dir = str(tmp_path / 'split')
    train(tiny_run_config(tmp_path, output_dir=split_dir, epochs=1), backbone=tiny_trunk)
    resumed = train(tiny_run_config(tmp_path, output_dir=split_dir), resume=True, backbone=tiny_trunk)

    assert [row.epoch for row in resumed.metrics] == [2]
    for name in ('metrics', 'ranks', 'losses'):
        pd.testing.assert_frame_equal(read(straight.run_dir, name), read(split_dir, name))
    assert resumed.final_ranks == straight.final_ranks


def test_resume_rejects_changed_configuration(tmp_path, tiny_trunk):
    cfg = tiny_run_config(tmp_path, epochs=1)
    train(cfg, backbone=tiny_trunk)
    with pytest.raises(ConfigError):
        train(replace(cfg, learning_rate=0.01), resume=True, backbone=tiny_trunk)


def test_resume_without_checkpoint_starts_fresh(tmp_path, tiny_trunk):
    record = train(tiny_run_config(tmp_path, epochs=1), resume=True, backbone=tiny_trunk)
    assert [row.epoch for row in record.metrics] == [0, 1]


def test_rank_shrinking_reduces_parameters(tmp_path, tiny_trunk):
    shrinking = PdrsConfig(rho_shared=0.5, rho_task=0.5)
    enabled = train(tiny_run_config(tmp_path, output_dir=str(tmp_path / 'on'), pdrs=shrinking),
                    backbone=tiny_trunk)
    disabled = train(tiny_run_config(tmp_path, output_dir=str(tmp_path / 'off'),
                                     pdrs=replace(shrinking, enabled=False)), backbone=tiny_trunk)

    assert enabled.final.adapter_params < disabled.final.adapter_params
    assert enabled.final.trainable_params < disabled.final.trainable_params
    assert set(disabled.final_ranks.values()) == {4}
    assert max(enabled.final_ranks.values()) <= 2

    ranks = read(enabled.run_dir, 'ranks')
    assert (ranks['r_after'] <= ranks['r_before']).all()
    for _, history in ranks.sort_values('epoch').groupby('adapter_id'):
        values = list(history['r_after'])
        assert all(b <= a for a, b in zip(values, values[1:]))
        assert values[-1] >= 1

    metrics = read(enabled.run_dir, 'metrics')
    assert metrics['adapter_params'].is_monotonic_decreasing


def test_divergence_keeps_last_checkpoint(tmp_path, tiny_trunk, monkeypatch):
    real_loss = trainer.mtl_loss
    calls = {'n': 0}

    def unstable(preds, batch, tasks):
        calls['n'] += 1
        if calls['n'] > 2:
            raise DivergenceError("non-finite loss (seg=nan)", {'seg': float('nan')})
        return real_loss(preds, batch, tasks)

    monkeypatch.setattr(trainer, 'mtl_loss', unstable)
    cfg = tiny_run_config(tmp_path)
    with pytest.raises(DivergenceError):
        train(cfg, backbone=tiny_trunk)

    arrays = load_checkpoint(os.path.join(cfg.output_dir, 'checkpoint.npz'))
    assert int(arrays['meta.epoch']) == 1
    assert list(read(cfg.output_dir, 'metrics')['epoch']) == [0, 1]


def test_evaluate_checkpoint_reproduces_final_row(tmp_path):
    cache = str(tmp_path / 'cache')
    cfg = tiny_run_config(tmp_path, epochs=1)
    record = train(cfg, cache_dir=cache)
    row = evaluate_checkpoint(os.path.join(record.run_dir, 'checkpoint.npz'), cache_dir=cache)
    assert row.epoch == 1
    assert row.metrics == pytest.approx(record.final.metrics, rel=1e-12)
    assert row.trainable_params == record.final.trainable_params


def test_evaluate_checkpoint_requires_artifacts(tmp_path):
    with pytest.raises(MissingArtifactsError) as info:
        evaluate_checkpoint(str(tmp_path / 'checkpoint.npz'))
    assert len(info.value.missing) == 2


def test_single_task_references(tmp_path):
    cache = str(tmp_path / 'cache')
    cfg = tiny_run_config(tmp_path, epochs=1)
    reference = fit_single_task_references(cfg, cache_dir=cache)
    assert set(reference) == {'seg', 'depth', 'edges'}
    assert load_reference(os.path.join(cfg.output_dir, 'reference.yaml')) == pytest.approx(reference)
    for name in reference:
        single = load_run_config(os.path.join(cfg.output_dir, f'single-{name}', 'config.yaml'))
        assert single.task_names == [name]
        assert single.reference is None



def test_training_leaves_trunk_untouched(tmp_path, tiny_trunk):
    before = {name: w.data.copy() for name, w in tiny_trunk.named_weights().items()}
    train(tiny_run_config(tmp_path), backbone=tiny_trunk)
    for name, weight in tiny_trunk.named_weights().items():
        assert weight.data.tobytes() == before[name].tobytes(), name


if __name__ == '__main__':
    raise SystemExit(pytest.main([__file__, '-q']))
