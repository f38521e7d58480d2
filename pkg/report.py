"""
Report generation from run directories.

Everything here is recomputed from the CSV logs and the stored reference
values, never from in-memory training state.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from bench import delta_m
from config import RunConfig, config_hash, load_run_config

logger = logging.getLogger(__name__)

REQUIRED_LOGS = ('config.yaml', 'metrics.csv', 'ranks.csv')
REPORT_FILES = {
    'tradeoff': 'tradeoff.csv',
    'ranks': 'rank_trajectories.csv',
    'summary': 'summary.csv',
}


class MissingArtifactsError(FileNotFoundError):
    """Raised when a run directory lacks the logs a step needs."""

    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__(f"missing artifacts: {', '.join(self.missing)}")


@dataclass
class RunLogs:
    run_dir: str
    cfg: RunConfig
    metrics: pd.DataFrame
    ranks: pd.DataFrame
    reference: Optional[Dict[str, float]]

    @property
    def name(self) -> str:
        return os.path.basename(os.path.normpath(self.run_dir))


def discover_runs(run_dir: str) -> List[str]:
    """
    Run directories under `run_dir`.

    `run_dir` itself counts when it holds a config.yaml; otherwise every
    subdirectory (at any depth) that holds one is a run.
    """
    if not os.path.isdir(run_dir):
        raise MissingArtifactsError([run_dir])
    if os.path.exists(os.path.join(run_dir, 'config.yaml')):
        return [run_dir]
    runs = []
    for root, dirs, files in os.walk(run_dir):
        dirs.sort()
        if 'config.yaml' in files:
            runs.append(root)
    if not runs:
        raise MissingArtifactsError([os.path.join(run_dir, 'config.yaml')])
    return runs


def check_artifacts(run_dir: str, required: Sequence[str] = REQUIRED_LOGS) -> None:
    missing = [os.path.join(run_dir, name) for name in required
               if not os.path.exists(os.path.join(run_dir, name))]
    if missing:
        raise MissingArtifactsError(missing)


def read_reference(run_dir: str, cfg: RunConfig) -> Optional[Dict[str, float]]:
    path = os.path.join(run_dir, 'reference.yaml')
    if os.path.exists(path):
        with open(path, 'r') as f:
            data = yaml.safe_load(f) or {}
        return {k: float(v) for k, v in data.items()}
    if cfg.reference:
        return {k: float(v) for k, v in cfg.reference.items()}
    return None


def load_run(run_dir: str) -> RunLogs:
    """Read one run's config, logs and reference values."""
    check_artifacts(run_dir)
    cfg = load_run_config(os.path.join(run_dir, 'config.yaml'))
    return RunLogs(
        run_dir=run_dir,
        cfg=cfg,
        metrics=pd.read_csv(os.path.join(run_dir, 'metrics.csv')),
        ranks=pd.read_csv(os.path.join(run_dir, 'ranks.csv')),
        reference=read_reference(run_dir, cfg),
    )


def recompute_delta_m(run: RunLogs) -> pd.Series:
    """Per-epoch delta_m from the per-task metric columns; NaN without a usable reference."""
    tasks = run.cfg.tasks
    if not run.reference or any(t.name not in run.reference for t in tasks):
        return pd.Series(np.nan, index=run.metrics.index)
    reference = [run.reference[t.name] for t in tasks]
    directions = [t.lower_is_better for t in tasks]
    return run.metrics.apply(
        lambda row: delta_m([row[t.name] for t in tasks], reference, directions), axis=1
    )


def tradeoff_table(runs: Sequence[RunLogs]) -> pd.DataFrame:
    """One row per run: final delta_m against trainable parameter counts."""
    rows = []
    for run in runs:
        if run.metrics.empty:
            logger.warning(f"{run.run_dir} has no evaluated epochs; skipped")
            continue
        final = run.metrics.iloc[-1]
        rows.append({
            'run': run.name,
            'config_hash': config_hash(run.cfg),
            'adapter_mode': run.cfg.adapter_mode,
            'pdrs': run.cfg.pdrs.enabled,
            'tspd': run.cfg.decoder.tspd,
            'xtcons': run.cfg.decoder.xtcons,
            'epoch': int(final['epoch']),
            'trainable_params': int(final['trainable_params']),
            'adapter_params': int(final['adapter_params']),
            'delta_m': float(recompute_delta_m(run).iloc[-1]),
        })
    return pd.DataFrame(rows, columns=[
        'run', 'config_hash', 'adapter_mode', 'pdrs', 'tspd', 'xtcons',
        'epoch', 'trainable_params', 'adapter_params', 'delta_m',
    ])


def rank_trajectories(runs: Sequence[RunLogs]) -> pd.DataFrame:
    """Mean rank after each epoch, grouped by stage and adapter kind."""
    frames = []
    for run in runs:
        if run.ranks.empty:
            continue
        ranks = run.ranks.assign(
            run=run.name,
            group=np.where(run.ranks['kind'] == 'shared', 'shared', 'task'),
        )
        grouped = (
            ranks.groupby(['run', 'epoch', 'stage', 'group', 'kind'], sort=True)
            .agg(mean_rank=('r_after', 'mean'), adapters=('adapter_id', 'count'))
            .reset_index()
        )
        frames.append(grouped)
    if not frames:
        return pd.DataFrame(columns=['run', 'epoch', 'stage', 'group', 'kind', 'mean_rank', 'adapters'])
    return pd.concat(frames, ignore_index=True)


def summary_table(runs: Sequence[RunLogs]) -> pd.DataFrame:
    """Final per-task metrics, delta_m and mean final ranks of shared vs task adapters."""
    rows = []
    for run in runs:
        if run.metrics.empty:
            continue
        final = run.metrics.iloc[-1]
        row = {'run': run.name, 'epoch': int(final['epoch'])}
        for task in run.cfg.tasks:
            row[task.name] = float(final[task.name])
        row['delta_m'] = float(recompute_delta_m(run).iloc[-1])
        row['trainable_params'] = int(final['trainable_params'])
        row['adapter_params'] = int(final['adapter_params'])

        last = run.ranks[run.ranks['epoch'] == run.ranks['epoch'].max()] if not run.ranks.empty else run.ranks
        shared = last[last['kind'] == 'shared'] if not last.empty else last
        task_specific = last[last['kind'] != 'shared'] if not last.empty else last
        row['mean_rank_shared'] = float(shared['r_after'].mean()) if len(shared) else np.nan
        row['mean_rank_task'] = float(task_specific['r_after'].mean()) if len(task_specific) else np.nan
        rows.append(row)
    return pd.DataFrame(rows)


def plot_tradeoff(table: pd.DataFrame, path: str) -> None:
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.scatter(table['trainable_params'], table['delta_m'], s=30)
    for _, row in table.iterrows():
        ax.annotate(str(row['run']), (row['trainable_params'], row['delta_m']), fontsize=7,
                    xytext=(3, 3), textcoords='offset points')
    ax.set_xlabel('Trainable parameters')
    ax.set_ylabel('Δm (%)')
    ax.set_title('Accuracy / efficiency trade-off')
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format='svg')
    plt.close(fig)


def plot_rank_trajectories(table: pd.DataFrame, path: str) -> None:
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    curves = table.groupby(['run', 'stage', 'group', 'epoch'])['mean_rank'].mean().reset_index()
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    for (run, stage, group), series in curves.groupby(['run', 'stage', 'group']):
        style = '-' if group == 'task' else '--'
        ax.plot(series['epoch'], series['mean_rank'], style, label=f'{run} s{stage} {group}')
    ax.set_xlabel('Epoch')
    ax.set_ylabel('Mean rank')
    ax.set_title('Rank trajectories')
    if len(curves):
        ax.legend(fontsize=6)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format='svg')
    plt.close(fig)


def report(run_dir: str, out_dir: Optional[str] = None, svg: bool = False) -> Dict[str, str]:
    """
    Build the report for every run under `run_dir`.

    Args:
        run_dir: A run directory, or a directory of runs
        out_dir: Where to write the report (defaults to run_dir)
        svg: Also render the trade-off and rank plots

    Returns:
        Dict of artifact name -> written path

    Raises:
        MissingArtifactsError: If a run lacks config.yaml, metrics.csv or ranks.csv
    """
    runs = [load_run(path) for path in discover_runs(run_dir)]
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)

    tables = {
        'tradeoff': tradeoff_table(runs),
        'ranks': rank_trajectories(runs),
        'summary': summary_table(runs),
    }
    written = {}
    for name, table in tables.items():
        path = os.path.join(out_dir, REPORT_FILES[name])
        table.to_csv(path, index=False)
        written[name] = path

    if svg:
        written['tradeoff_svg'] = os.path.join(out_dir, 'tradeoff.svg')
        plot_tradeoff(tables['tradeoff'], written['tradeoff_svg'])
        written['ranks_svg'] = os.path.join(out_dir, 'rank_trajectories.svg')
        plot_rank_trajectories(tables['ranks'], written['ranks_svg'])

    logger.info(f"Report for {len(runs)} run(s) written to {out_dir}")
    return written
