"""
Shared pytest fixtures: desk-sized configurations small enough for unit tests.
"""

import numpy as np
import pytest

from backbone import build_backbone
from config import BackboneSpec, Config, DataConfig, RunConfig


def tiny_backbone_spec(**overrides) -> BackboneSpec:
    values = dict(stages=2, blocks_per_stage=1, base_channels=4, patch_size=2,
                  input_size=(8, 8), seed=0, pretrain_steps=2)
    values.update(overrides)
    return BackboneSpec(**values)


def tiny_run_config(tmp_path, **overrides) -> RunConfig:
    values = dict(
        backbone=tiny_backbone_spec(),
        data=DataConfig(train_size=8, val_size=4),
        r_init=4,
        batch_size=4,
        epochs=2,
        seed=0,
        output_dir=str(tmp_path / 'run'),
    )
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture
def tiny_spec():
    return tiny_backbone_spec()


@pytest.fixture
def tiny_cfg(tmp_path):
    return tiny_run_config(tmp_path)


@pytest.fixture(scope='session')
def tiny_trunk(tmp_path_factory):
    """Pretrained frozen trunk for tiny_backbone_spec(), built once per session."""
    return build_backbone(tiny_backbone_spec(), str(tmp_path_factory.mktemp('trunk_cache')))


def pytest_collection_modifyitems(config, items):
    if Config.RUN_SLOW:
        return
    skip_slow = pytest.mark.skip(reason="set SPECTRANK_RUN_SLOW=1 to run acceptance tests")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def conjugate_symmetric(weight: np.ndarray) -> np.ndarray:
    """Average a filter with its frequency-reversed copy so real inputs stay real."""
    h, w = weight.shape[-2:]
    rows = (-np.arange(h)) % h
    cols = (-np.arange(w)) % w
    mirrored = weight[..., rows, :][..., :, cols]
    return 0.5 * (weight + mirrored)
