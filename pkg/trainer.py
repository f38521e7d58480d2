"""
Training loop orchestration, checkpointing and run logs.

A run directory holds:
    config.yaml      the RunConfig, verbatim
    reference.yaml   single-task reference metrics (when known)
    metrics.csv      one MetricRow per epoch (epoch 0 = before training)
    ranks.csv        one row per adapter per epoch
    losses.csv       one row per optimizer step
    checkpoint.npz   last completed epoch
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

from bench import Batch, DivergenceError, MetricRow, collate, evaluate, generate_dataset, mtl_loss
from config import Config, ConfigError, RunConfig, config_hash, load_run_config, save_run_config
from model import MultiTaskModel
from optim import SGD
from pdrs import ShrinkReport, ShrinkRow, ema_update, shrink_epoch, slot_importance
from report import MissingArtifactsError
from tensor import Tape

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = 'checkpoint.npz'
RESUMABLE_FIELDS = ('epochs',)


@dataclass
class RunRecord:
    run_dir: str
    metrics: List[MetricRow] = field(default_factory=list)
    shrink_reports: List[ShrinkReport] = field(default_factory=list)
    final_ranks: Dict[str, int] = field(default_factory=dict)

    @property
    def final(self) -> MetricRow:
        return self.metrics[-1]


def run_directory(cfg: RunConfig) -> str:
    return cfg.output_dir or os.path.join(Config.RUNS_DIR, config_hash(cfg))


def num_classes(cfg: RunConfig) -> int:
    seg = [t.num_classes for t in cfg.tasks if t.kind == 'segmentation']
    return max(seg) if seg else 4


def datasets(cfg: RunConfig):
    size = cfg.backbone.input_size
    k = num_classes(cfg)
    train_set = generate_dataset(cfg.seed, cfg.data.train_size, size, k, cfg.data)
    val_set = generate_dataset(cfg.seed, cfg.data.val_size, size, k, cfg.data, offset=cfg.data.train_size)
    return train_set, val_set


def _append_csv(path: str, records: List[Dict[str, object]], columns: Optional[List[str]] = None) -> None:
    if not records:
        return
    frame = pd.DataFrame(records, columns=columns)
    frame.to_csv(path, mode='a', header=not os.path.exists(path), index=False)


def _truncate_csv(path: str, last_epoch: int) -> None:
    if not os.path.exists(path):
        return
    frame = pd.read_csv(path, float_precision='round_trip')
    frame[frame['epoch'] <= last_epoch].to_csv(path, index=False)


def _rng_state_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def _restore_rng(rng: np.random.Generator, text: str) -> None:
    rng.bit_generator.state = json.loads(text)


def save_checkpoint(path: str, model: MultiTaskModel, optimizer: SGD, epoch: int,
                    rngs: Dict[str, np.random.Generator], cfg: RunConfig) -> None:
    """Write atomically: a crash mid-write leaves the previous checkpoint intact."""
    arrays = model.state_arrays()
    arrays.update(optimizer.state_arrays())
    arrays['meta.epoch'] = np.asarray(epoch)
    arrays['meta.config_hash'] = np.asarray(config_hash(cfg, ignore=('output_dir',) + RESUMABLE_FIELDS))
    for name, rng in rngs.items():
        arrays[f'meta.rng.{name}'] = np.asarray(_rng_state_json(rng))
    tmp = path + '.tmp.npz'
    np.savez(tmp, **arrays)
    os.replace(tmp, path)
    logger.info(f"Checkpoint written: epoch {epoch} -> {path}")


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    with np.load(path) as archive:
        return {name: archive[name] for name in archive.files}


def _importance_step(model: MultiTaskModel, masks, beta: float) -> None:
    for state in model.live_adapters():
        mask = masks[state.adapter_id]
        s = slot_importance(state, None, mask)
        state.ema_scores = ema_update(state.ema_scores, s, beta, np.arange(mask.b))


def _rank_rows(model: MultiTaskModel, epoch: int) -> List[ShrinkRow]:
    return [
        ShrinkRow(epoch=epoch, adapter_id=s.adapter_id, stage=s.stage, kind=s.label,
                  r_before=s.r_curr, r_after=s.r_curr, params_freed=0)
        for s in model.live_adapters()
    ]


def train_epoch(model: MultiTaskModel, optimizer: SGD, train_set, cfg: RunConfig, epoch: int,
                data_rng: np.random.Generator, mask_rng: np.random.Generator) -> List[Dict[str, object]]:
    """
    One pass over the training set.

    Returns:
        Loss records, one per step

    Raises:
        DivergenceError: On a non-finite loss
    """
    order = data_rng.permutation(len(train_set))
    records = []
    for step, start in enumerate(range(0, len(order), cfg.batch_size)):
        batch: Batch = collate([train_set[i] for i in order[start:start + cfg.batch_size]])
        masks = model.sample_masks(mask_rng)
        with Tape() as tape:
            preds = model.forward(batch.images, masks)
            loss, parts = mtl_loss(preds, batch, cfg.tasks)
        tape.backward(loss)
        if cfg.pdrs.enabled and model.mode != 'none':
            _importance_step(model, masks, cfg.pdrs.beta)
        optimizer.step()
        optimizer.zero_grad()

        record = {'epoch': epoch, 'step': step, 'loss': loss.item()}
        record.update({f'loss_{k}': v for k, v in parts.items()})
        records.append(record)
        logger.debug(f"Epoch {epoch} step {step}: loss={loss.item():.6f}")
    return records


def _check_resume(cfg: RunConfig, meta_hash: str) -> None:
    current = config_hash(cfg, ignore=('output_dir',) + RESUMABLE_FIELDS)
    if current != meta_hash:
        raise ConfigError("checkpoint was written for a different configuration; only epochs may change on resume")


def train(cfg: RunConfig, resume: bool = False, cache_dir: Optional[str] = None,
          backbone=None) -> RunRecord:
    """
    Train a multi-task model and write the run directory.

    Epoch 0 records the untrained model. Each later epoch trains, shrinks
    ranks (when enabled and due), evaluates, appends to the CSV logs and
    checkpoints.

    Args:
        cfg: Run configuration
        resume: Continue from checkpoint.npz in the run directory
        cache_dir: Frozen trunk cache (Config.CACHE_DIR when None)
        backbone: Pre-built frozen trunk to reuse

    Returns:
        RunRecord of the metrics produced by this call

    Raises:
        ConfigError: If resuming with an incompatible configuration
        DivergenceError: If the loss becomes non-finite (last checkpoint kept)
    """
    run_dir = run_directory(cfg)
    os.makedirs(run_dir, exist_ok=True)
    paths = {name: os.path.join(run_dir, f'{name}.csv') for name in ('metrics', 'ranks', 'losses')}
    ckpt_path = os.path.join(run_dir, CHECKPOINT_FILE)

    model = MultiTaskModel(cfg, backbone=backbone, cache_dir=cache_dir or Config.CACHE_DIR)
    optimizer = SGD(model.named_parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    rngs = {'data': np.random.default_rng([cfg.seed, 0, 1]), 'mask': np.random.default_rng([cfg.seed, 0, 2])}
    train_set, val_set = datasets(cfg)
    record = RunRecord(run_dir=run_dir)
    metric_columns = ['epoch'] + cfg.task_names + ['trainable_params', 'adapter_params', 'delta_m']

    start_epoch = 1
    if resume and os.path.exists(ckpt_path):
        arrays = load_checkpoint(ckpt_path)
        _check_resume(cfg, str(arrays['meta.config_hash']))
        model.load_state_arrays(arrays)
        optimizer.load_state_arrays(arrays)
        for name, rng in rngs.items():
            _restore_rng(rng, str(arrays[f'meta.rng.{name}']))
        last = int(arrays['meta.epoch'])
        for path in paths.values():
            _truncate_csv(path, last)
        save_run_config(cfg, os.path.join(run_dir, 'config.yaml'))
        start_epoch = last + 1
        logger.info(f"Resuming {run_dir} after epoch {last}")
    else:
        if resume:
            logger.warning(f"No checkpoint in {run_dir}; starting from scratch")
        for path in list(paths.values()) + [ckpt_path]:
            if os.path.exists(path):
                os.remove(path)
        save_run_config(cfg, os.path.join(run_dir, 'config.yaml'))
        if cfg.reference:
            with open(os.path.join(run_dir, 'reference.yaml'), 'w') as f:
                yaml.safe_dump(dict(cfg.reference), f, sort_keys=True)
        else:
            logger.warning("No single-task reference configured; delta_m will be empty")

        row = evaluate(model, val_set, cfg.tasks, cfg.batch_size, epoch=0, reference=cfg.reference)
        record.metrics.append(row)
        _append_csv(paths['metrics'], [row.to_record()], metric_columns)
        _append_csv(paths['ranks'], [vars(r) for r in _rank_rows(model, 0)])
        save_checkpoint(ckpt_path, model, optimizer, 0, rngs, cfg)

    for epoch in range(start_epoch, cfg.epochs + 1):
        try:
            losses = train_epoch(model, optimizer, train_set, cfg, epoch, rngs['data'], rngs['mask'])
        except DivergenceError as e:
            logger.error(f"Diverged in epoch {epoch}: {e}; last good checkpoint kept at {ckpt_path}")
            raise
        _append_csv(paths['losses'], losses)

        if cfg.pdrs.enabled and model.mode != 'none' and epoch % cfg.pdrs.shrink_interval == 0:
            report = shrink_epoch(model.live_adapters(), cfg.pdrs, epoch=epoch, optimizer=optimizer)
        else:
            report = ShrinkReport(epoch=epoch, rows=_rank_rows(model, epoch))
        record.shrink_reports.append(report)
        _append_csv(paths['ranks'], [vars(r) for r in report.rows])

        row = evaluate(model, val_set, cfg.tasks, cfg.batch_size, epoch=epoch, reference=cfg.reference)
        record.metrics.append(row)
        _append_csv(paths['metrics'], [row.to_record()], metric_columns)
        summary = ', '.join(f"{k}={v:.4f}" for k, v in row.metrics.items())
        logger.info(
            f"Epoch {epoch}/{cfg.epochs}: {summary}, trainable={row.trainable_params}, delta_m={row.delta_m:.3f}"
        )
        save_checkpoint(ckpt_path, model, optimizer, epoch, rngs, cfg)

    if not record.metrics:
        # Resumed a finished run; score the restored model without logging it again
        logger.info(f"{run_dir} already trained for {cfg.epochs} epoch(s)")
        record.metrics.append(
            evaluate(model, val_set, cfg.tasks, cfg.batch_size, epoch=start_epoch - 1, reference=cfg.reference)
        )

    record.final_ranks = {s.adapter_id: s.r_curr for s in model.live_adapters()}
    return record


def evaluate_checkpoint(checkpoint: str, cache_dir: Optional[str] = None) -> MetricRow:
    """Rebuild the model of a run directory and score its checkpoint on the validation set."""
    run_dir = os.path.dirname(os.path.abspath(checkpoint))
    config_path = os.path.join(run_dir, 'config.yaml')
    if not os.path.exists(checkpoint) or not os.path.exists(config_path):
        raise MissingArtifactsError([p for p in (checkpoint, config_path) if not os.path.exists(p)])
    cfg = load_run_config(config_path)
    arrays = load_checkpoint(checkpoint)
    model = MultiTaskModel(cfg, cache_dir=cache_dir or Config.CACHE_DIR)
    model.load_state_arrays(arrays)
    _, val_set = datasets(cfg)
    return evaluate(model, val_set, cfg.tasks, cfg.batch_size, epoch=int(arrays['meta.epoch']),
                    reference=cfg.reference)


def fit_single_task_references(cfg: RunConfig, cache_dir: Optional[str] = None) -> Dict[str, float]:
    """
    Train each task alone with the same recipe and collect its final metric.

    Results are written to <run_dir>/reference.yaml and returned.
    """
    base = run_directory(cfg)
    os.makedirs(base, exist_ok=True)
    reference = {}
    for task in cfg.tasks:
        single = replace(
            cfg, tasks=[task], reference=None,
            output_dir=os.path.join(base, f'single-{task.name}'),
        )
        logger.info(f"Fitting single-task reference for '{task.name}'")
        result = train(single, cache_dir=cache_dir)
        reference[task.name] = result.final.metrics[task.name]

    path = os.path.join(base, 'reference.yaml')
    with open(path, 'w') as f:
        yaml.safe_dump(reference, f, sort_keys=True)
    logger.info(f"Single-task references written to {path}")
    return reference


def load_reference(path: str) -> Dict[str, float]:
    with open(path, 'r') as f:
        data = yaml.safe_load(f) or {}
    return {k: float(v) for k, v in data.items()}

