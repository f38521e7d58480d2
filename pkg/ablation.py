"""
Component ablation: run every on/off combination of the chosen switches.
"""

import itertools
import logging
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import pandas as pd

from backbone import build_backbone
from config import Config, ConfigError, RunConfig, config_hash
from trainer import train

logger = logging.getLogger(__name__)

SWITCHES = ('pdrs', 'dora', 'tspd', 'xtcons')


@dataclass
class AblationRow:
    name: str
    settings: Dict[str, bool]
    cfg: RunConfig


def parse_switches(text: str) -> List[str]:
    """Comma-separated switch list; empty text means no switches."""
    names = [s.strip().lower() for s in text.split(',') if s.strip()] if text else []
    unknown = [s for s in names if s not in SWITCHES]
    if unknown:
        raise ConfigError(f"unknown ablation switch(es) {unknown}; expected a subset of {list(SWITCHES)}")
    # Keep canonical order, drop repeats
    return [s for s in SWITCHES if s in names]


def apply_switches(cfg: RunConfig, settings: Dict[str, bool]) -> RunConfig:
    """Copy of cfg with each switch forced on or off; other fields untouched."""
    out = cfg
    if 'pdrs' in settings:
        out = replace(out, pdrs=replace(out.pdrs, enabled=settings['pdrs']))
    if 'dora' in settings:
        out = replace(out, adapter_mode='dora' if settings['dora'] else 'lora')
    if 'tspd' in settings:
        out = replace(out, decoder=replace(out.decoder, tspd=settings['tspd']))
    if 'xtcons' in settings:
        out = replace(out, decoder=replace(out.decoder, xtcons=settings['xtcons']))
    return out


def row_name(settings: Dict[str, bool]) -> str:
    if not settings:
        return 'baseline'
    return '_'.join(f"{k}-{'on' if v else 'off'}" for k, v in settings.items())


def ablation_directory(cfg: RunConfig) -> str:
    return cfg.output_dir or os.path.join(Config.RUNS_DIR, f'ablate-{config_hash(cfg)}')


def plan_ablation(cfg: RunConfig, switches: Sequence[str]) -> List[AblationRow]:
    """
    The 2^k configurations for k switches, all sharing cfg's seed.

    Each row trains into its own subdirectory of the ablation directory.

    Raises:
        ConfigError: On an unknown switch or a mode that cannot be toggled
    """
    switches = parse_switches(','.join(switches))
    if 'dora' in switches and cfg.adapter_mode == 'none':
        raise ConfigError("the dora switch needs adapters; adapter_mode is 'none'")
    base = ablation_directory(cfg)
    rows = []
    for values in itertools.product((False, True), repeat=len(switches)):
        settings = dict(zip(switches, values))
        name = row_name(settings)
        run_cfg = replace(apply_switches(cfg, settings), output_dir=os.path.join(base, name))
        rows.append(AblationRow(name=name, settings=settings, cfg=run_cfg))

    hashes = {config_hash(row.cfg) for row in rows}
    if len(hashes) != len(rows):
        raise ConfigError("ablation produced duplicate configurations")
    return rows


def ablate(cfg: RunConfig, switches: Sequence[str], cache_dir: Optional[str] = None) -> pd.DataFrame:
    """
    Train every planned configuration and collect the final-epoch comparison.

    Runs are sequential and reuse one frozen trunk. The table is also written
    to <ablation dir>/ablation.csv.
    """
    rows = plan_ablation(cfg, switches)
    backbone = build_backbone(cfg.backbone, cache_dir or Config.CACHE_DIR)
    records = []
    for i, row in enumerate(rows, start=1):
        logger.info(f"Ablation run {i}/{len(rows)}: {row.name}")
        result = train(row.cfg, cache_dir=cache_dir, backbone=backbone)
        final = result.final
        record = {'name': row.name}
        record.update({s: row.settings.get(s) for s in row.settings})
        record.update(final.metrics)
        record['trainable_params'] = final.trainable_params
        record['adapter_params'] = final.adapter_params
        record['delta_m'] = final.delta_m
        record['config_hash'] = config_hash(row.cfg)
        record['run_dir'] = result.run_dir
        records.append(record)

    table = pd.DataFrame(records)
    base = ablation_directory(cfg)
    os.makedirs(base, exist_ok=True)
    path = os.path.join(base, 'ablation.csv')
    table.to_csv(path, index=False)
    logger.info(f"Ablation table written to {path}")
    return table
