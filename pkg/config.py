"""
Configuration module for spectrank.
Loads process settings from environment variables and defines the run
configuration (backbone, tasks, rank shrinking, decoder, data, optimizer).
"""

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import yaml
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

TASK_KINDS = ('segmentation', 'regression_l1', 'balanced_binary')
TASK_METRICS = {
    'segmentation': 'miou_higher_better',
    'regression_l1': 'rmse_lower_better',
    'balanced_binary': 'miou_higher_better',
}
ADAPTER_MODES = ('dora', 'lora', 'none')


class ConfigError(ValueError):
    """Raised for invalid run configuration."""


class Config:
    """Process-level settings read from the environment."""

    # Where run directories are created by default
    RUNS_DIR: str = os.getenv('SPECTRANK_RUNS_DIR', 'runs')

    # Cache of pretrained frozen trunks, keyed by backbone spec hash
    CACHE_DIR: str = os.getenv('SPECTRANK_CACHE_DIR', '.trunk_cache')

    LOG_LEVEL: str = os.getenv('SPECTRANK_LOG_LEVEL', 'INFO').upper()

    # Enables the minutes-scale acceptance tests
    RUN_SLOW: bool = os.getenv('SPECTRANK_RUN_SLOW', '') not in ('', '0', 'false')

    @classmethod
    def validate(cls) -> Tuple[bool, str]:
        """
        Validate process configuration.

        Returns:
            tuple: (is_valid, error_message)
        """
        if not isinstance(logging.getLevelName(cls.LOG_LEVEL), int):
            return False, f"SPECTRANK_LOG_LEVEL is not a logging level: {cls.LOG_LEVEL}"

        if not cls.RUNS_DIR.strip():
            return False, "SPECTRANK_RUNS_DIR is empty"

        if not cls.CACHE_DIR.strip():
            return False, "SPECTRANK_CACHE_DIR is empty"

        return True, ""


@dataclass
class BackboneSpec:
    """Desk-scale hierarchical encoder shape."""
    stages: int = 3
    blocks_per_stage: int = 2
    base_channels: int = 16
    patch_size: int = 4
    input_size: Tuple[int, int] = (64, 64)
    seed: int = 0
    pretrain_steps: int = 40
    adapted_layers: Tuple[str, ...] = ('mix', 'fc1', 'fc2')

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.adapted_layers = tuple(self.adapted_layers)
        if self.stages < 1 or self.blocks_per_stage < 1:
            raise ConfigError("backbone needs at least one stage and one block per stage")
        if self.base_channels < 1 or self.patch_size < 1:
            raise ConfigError("base_channels and patch_size must be positive")
        unit = self.patch_size * 2 ** (self.stages - 1)
        if any(v % unit for v in self.input_size):
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by patch_size*2^(stages-1) = {unit}"
            )
        unknown = set(self.adapted_layers) - {'mix', 'fc1', 'fc2'}
        if unknown:
            raise ConfigError(f"unknown adapted layers: {sorted(unknown)}")

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage

    def stage_resolution(self, stage: int) -> Tuple[int, int]:
        factor = self.patch_size * 2 ** stage
        return self.input_size[0] // factor, self.input_size[1] // factor


@dataclass
class TaskSpec:
    """One dense prediction task and its loss weight."""
    name: str
    kind: str
    weight: float = 1.0
    num_classes: int = 2
    metric: str = ''

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind '{self.kind}' for task '{self.name}'")
        if self.weight <= 0:
            raise ConfigError(f"task '{self.name}' weight must be positive")
        expected = TASK_METRICS[self.kind]
        if not self.metric:
            self.metric = expected
        elif self.metric != expected:
            raise ConfigError(f"task '{self.name}': metric {self.metric} inconsistent with kind {self.kind}")
        if self.kind == 'segmentation' and self.num_classes < 2:
            raise ConfigError(f"segmentation task '{self.name}' needs at least 2 classes")

    @property
    def lower_is_better(self) -> bool:
        return self.metric.endswith('lower_better')

    @property
    def out_channels(self) -> int:
        return self.num_classes if self.kind == 'segmentation' else 1


@dataclass
class PdrsConfig:
    """Rank shrinking settings."""
    enabled: bool = True
    rho_shared: float = 0.95
    rho_task: float = 0.95
    beta: float = 0.9
    rank_floor: int = 1
    shrink_interval: int = 1

    def __post_init__(self):
        for name in ('rho_shared', 'rho_task'):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {value}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must be in [0, 1), got {self.beta}")
        if self.rank_floor < 1:
            raise ConfigError("rank_floor must be >= 1")
        if self.shrink_interval < 1:
            raise ConfigError("shrink_interval must be >= 1")


@dataclass
class DecoderConfig:
    """Task-spectral decoder switches."""
    tspd: bool = True
    xtcons: bool = True
    tau: float = 0.5
    swap_bands: bool = False
    fuse_channels: int = 16
    # None disables the imaginary-residue check
    imag_tol: Optional[float] = 1e-9

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must be in (0, 1), got {self.tau}")
        if self.fuse_channels < 1:
            raise ConfigError("fuse_channels must be positive")
        if self.imag_tol is not None and self.imag_tol <= 0:
            raise ConfigError("imag_tol must be positive (or null to disable the check)")


@dataclass
class DataConfig:
    """Synthetic benchmark size."""
    train_size: int = 64
    val_size: int = 32
    min_shapes: int = 1
    max_shapes: int = 4

    def __post_init__(self):
        if self.train_size < 1 or self.val_size < 1:
            raise ConfigError("train_size and val_size must be positive")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("need 0 <= min_shapes <= max_shapes")


def default_tasks() -> List[TaskSpec]:
    return [
        TaskSpec(name='seg', kind='segmentation', num_classes=4),
        TaskSpec(name='depth', kind='regression_l1'),
        TaskSpec(name='edges', kind='balanced_binary'),
    ]


@dataclass
class RunConfig:
    """Everything that determines a run, given the code version."""
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    tasks: List[TaskSpec] = field(default_factory=default_tasks)
    pdrs: PdrsConfig = field(default_factory=PdrsConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    adapter_mode: str = 'dora'
    r_init: int = 16
    alpha: float = 1.0
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    output_dir: str = ''
    reference: Optional[Dict[str, float]] = None

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("at least one task is required")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate task names: {names}")
        seg_classes = sorted({t.num_classes for t in self.tasks if t.kind == 'segmentation'})
        if len(seg_classes) > 1:
            # Scenes carry one label map, so every segmentation task reads the same classes
            raise ConfigError(f"segmentation tasks must share num_classes, got {seg_classes}")
        if self.adapter_mode not in ADAPTER_MODES:
            raise ConfigError(f"adapter_mode must be one of {ADAPTER_MODES}, got '{self.adapter_mode}'")
        if self.r_init < 1:
            raise ConfigError("r_init must be >= 1")
        if self.pdrs.rank_floor > self.r_init:
            raise ConfigError("rank_floor cannot exceed r_init")
        if self.learning_rate <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("learning_rate must be positive and momentum in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.reference is not None:
            missing = set(names) - set(self.reference)
            if missing:
                raise ConfigError(f"reference is missing tasks: {sorted(missing)}")
            self.reference = {k: float(v) for k, v in self.reference.items()}

    @property
    def task_names(self) -> List[str]:
        return [t.name for t in self.tasks]


def _build(cls, values: Optional[Dict[str, Any]]):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**values)


def run_config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """Build a RunConfig from plain (YAML-loaded) data."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    try:
        if 'backbone' in data:
            data['backbone'] = _build(BackboneSpec, data['backbone'])
        if 'tasks' in data:
            data['tasks'] = [_build(TaskSpec, t) for t in data['tasks']]
        if 'pdrs' in data:
            data['pdrs'] = _build(PdrsConfig, data['pdrs'])
        if 'decoder' in data:
            data['decoder'] = _build(DecoderConfig, data['decoder'])
        if 'data' in data:
            data['data'] = _build(DataConfig, data['data'])
        return _build(RunConfig, data)
    except TypeError as e:
        raise ConfigError(f"invalid config: {e}")


def run_config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    """Plain-data view of a RunConfig (tuples become lists)."""
    data = asdict(cfg)
    data['backbone']['input_size'] = list(cfg.backbone.input_size)
    data['backbone']['adapted_layers'] = list(cfg.backbone.adapted_layers)
    return data


def load_run_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, 'r') as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}")
    return run_config_from_dict(data)


def save_run_config(cfg: RunConfig, path: str) -> None:
    with open(path, 'w') as f:
        yaml.safe_dump(run_config_to_dict(cfg), f, sort_keys=True)


def _digest(data: Dict[str, Any]) -> str:
    text = yaml.safe_dump(data, sort_keys=True)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:12]


def config_hash(cfg: RunConfig, ignore: Tuple[str, ...] = ('output_dir',)) -> str:
    """Short stable hash of the configuration, excluding location fields."""
    data = run_config_to_dict(cfg)
    for key in ignore:
        data.pop(key, None)
    return _digest(data)


def backbone_hash(spec: BackboneSpec) -> str:
    """Cache key of a pretrained frozen trunk."""
    data = asdict(spec)
    data['input_size'] = list(spec.input_size)
    data['adapted_layers'] = list(spec.adapted_layers)
    return _digest(data)


# Validate on import (but don't fail - let the CLI handle it)
_is_valid, _error = Config.validate()
if not _is_valid:
    import warnings
    warnings.warn(f"Configuration warning: {_error}", UserWarning)
