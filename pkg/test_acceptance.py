#!/usr/bin/env python3
"""
End-to-end behaviour on the desk-scale benchmark.

These train full 30-epoch runs and take minutes; they only run with
SPECTRANK_RUN_SLOW=1.
"""

from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from bench import delta_m_for
from config import DecoderConfig, PdrsConfig, RunConfig
from trainer import fit_single_task_references, train

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


@pytest.fixture(scope='module')
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp('acceptance')


@pytest.fixture(scope='module')
def desk_cfg(workspace):
    return RunConfig(epochs=30, r_init=16, output_dir=str(workspace / 'desk'))


@pytest.fixture(scope='module')
def reference(desk_cfg, workspace):
    return fit_single_task_references(desk_cfg, cache_dir=str(workspace / 'cache'))


@pytest.fixture(scope='module')
def runs(desk_cfg, reference, workspace):
    """Shrinking runs for every seed plus the fixed-rank baseline of the first."""
    cache = str(workspace / 'cache')
    shrinking = {
        seed: train(replace(desk_cfg, seed=seed, reference=reference,
                            output_dir=str(workspace / f'pdrs-{seed}')), cache_dir=cache)
        for seed in SEEDS
    }
    fixed = train(replace(desk_cfg, reference=reference, pdrs=PdrsConfig(enabled=False),
                          output_dir=str(workspace / 'fixed')), cache_dir=cache)
    return shrinking, fixed


def final_ranks(run_dir):
    ranks = pd.read_csv(f'{run_dir}/ranks.csv')
    return ranks[ranks['epoch'] == ranks['epoch'].max()]


def test_shrinking_run_is_smaller_and_as_accurate(runs):
    shrinking, fixed = runs
    run = shrinking[0]

    ranks = pd.read_csv(f'{run.run_dir}/ranks.csv').sort_values('epoch')
    for _, history in ranks.groupby('adapter_id'):
        values = list(history['r_after'])
        assert all(b <= a for a, b in zip(values, values[1:]))

    assert run.final.adapter_params <= 0.5 * fixed.final.adapter_params
    assert abs(run.final.delta_m - fixed.final.delta_m) <= 1.0


def test_task_adapters_keep_more_rank(runs):
    shrinking, _ = runs
    task_wins, depth_wins = 0, 0
    for run in shrinking.values():
        last = final_ranks(run.run_dir)
        shared = last[last['kind'] == 'shared']['r_after'].mean()
        task = last[last['kind'] != 'shared']['r_after'].mean()
        task_wins += task >= shared
        deepest = last[last['stage'] == last['stage'].max()]['r_after'].mean()
        shallowest = last[last['stage'] == last['stage'].min()]['r_after'].mean()
        depth_wins += deepest >= shallowest
    assert task_wins >= 2
    assert depth_wins >= 2


def test_spectral_decoder_helps(desk_cfg, reference, workspace):
    cache = str(workspace / 'cache')
    improved = 0
    for seed in SEEDS:
        scores = {}
        for tspd in (False, True):
            cfg = replace(
                desk_cfg, seed=seed, reference=reference,
                decoder=DecoderConfig(tspd=tspd, xtcons=False),
                output_dir=str(workspace / f'tspd-{tspd}-{seed}'),
            )
            record = train(cfg, cache_dir=cache)
            # Identity filters make the untrained models indistinguishable
            scores.setdefault('initial', []).append(record.metrics[0].delta_m)
            scores[tspd] = delta_m_for(record.final.metrics, reference, cfg.tasks)
        assert scores['initial'][0] == pytest.approx(scores['initial'][1], abs=1e-9)
        improved += scores[True] > scores[False]
    assert improved >= 2


def test_consensus_leaves_untrained_outputs_unchanged(desk_cfg, reference, workspace):
    cache = str(workspace / 'cache')
    rows = []
    for xtcons in (False, True):
        cfg = replace(desk_cfg, epochs=0, reference=reference, decoder=DecoderConfig(xtcons=xtcons),
                      output_dir=str(workspace / f'xtcons-{xtcons}'))
        rows.append(train(cfg, cache_dir=cache).final)
    for task in desk_cfg.task_names:
        assert rows[0].metrics[task] == rows[1].metrics[task]
    assert np.isfinite(rows[0].delta_m)


if __name__ == '__main__':
    raise SystemExit(pytest.main([__file__, '-q', '-m', 'slow']))
