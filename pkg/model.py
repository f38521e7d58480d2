"""
Multi-task model: frozen backbone + adapters + task-spectral decoders.
"""

import logging
from dataclasses import replace
from typing import Dict, List, Mapping, Optional

import numpy as np

from adapters import AdapterBank, AdapterState, PrefixMask, place_adapters, sample_prefix
from backbone import Backbone, attach_adapters, build_backbone, forward_multitask
from config import RunConfig
from pdrs import adapter_parameter_count
from spectral import TaskDecoder, decode, init_task_decoder
from tensor import Tensor

logger = logging.getLogger(__name__)


class MultiTaskModel:
    """Everything trainable in a run, plus the frozen trunk it adapts."""

    def __init__(self, cfg: RunConfig, backbone: Optional[Backbone] = None, cache_dir: Optional[str] = None):
        self.cfg = cfg
        self.mode = cfg.adapter_mode
        self.backbone = backbone or build_backbone(cfg.backbone, cache_dir)
        self.layout = place_adapters(cfg.backbone, cfg.task_names)

        # Adapters and decoders draw from their own seeded streams
        adapter_rng = np.random.default_rng(cfg.seed + 1)
        if self.mode == 'none':
            self.adapters = AdapterBank()
        else:
            self.adapters = attach_adapters(self.backbone, self.layout, cfg.r_init, adapter_rng, cfg.alpha)

        decoder_rng = np.random.default_rng([cfg.seed, 0, 3])
        self.decoders: Dict[str, TaskDecoder] = {
            task.name: init_task_decoder(cfg.backbone, task, cfg.decoder, decoder_rng) for task in cfg.tasks
        }
        self.decoder_cfg = replace(cfg.decoder, xtcons=self.xtcons_active)

    @property
    def xtcons_active(self) -> bool:
        return self.cfg.decoder.xtcons and len(self.cfg.tasks) > 1

    def live_adapters(self) -> List[AdapterState]:
        return self.adapters.live()

    def sample_masks(self, rng: np.random.Generator) -> Dict[str, PrefixMask]:
        """One independent prefix draw per live adapter, in layout order."""
        return {
            state.adapter_id: sample_prefix(state.r_curr, rng, state.r_init)
            for state in self.live_adapters()
        }

    def full_masks(self) -> Dict[str, PrefixMask]:
        return {state.adapter_id: state.full_mask() for state in self.live_adapters()}

    def features(self, images: np.ndarray, masks: Optional[Mapping[str, PrefixMask]] = None):
        masks = self.full_masks() if masks is None else masks
        return forward_multitask(
            self.backbone, Tensor(images), masks, bank=self.adapters,
            tasks=self.cfg.task_names, mode=self.mode
        )

    def forward(self, images: np.ndarray, masks: Optional[Mapping[str, PrefixMask]] = None) -> Dict[str, Tensor]:
        """
        Task predictions for a batch.

        Args:
            images: (N, 3, H, W) array
            masks: Prefix mask per live adapter; full current rank when None

        Returns:
            Dict of task name -> (N, C_t, H, W) output
        """
        _, per_task = self.features(images, masks)
        return decode(per_task, self.decoders, self.decoder_cfg, self.cfg.backbone.patch_size)

    def adapter_parameters(self) -> Dict[str, Tensor]:
        params = {}
        for state in self.live_adapters():
            params.update(state.parameters(self.mode))
        return params

    def decoder_parameters(self) -> Dict[str, Tensor]:
        params = {}
        for dec in self.decoders.values():
            params.update(dec.parameters(tspd=self.cfg.decoder.tspd, xtcons=self.xtcons_active))
        return params

    def named_parameters(self) -> Dict[str, Tensor]:
        params = self.adapter_parameters()
        params.update(self.decoder_parameters())
        return params

    def adapter_parameter_count(self) -> int:
        if self.mode == 'none':
            return 0
        return adapter_parameter_count(self.live_adapters(), self.mode)

    def trainable_parameter_count(self) -> int:
        """Live adapter parameters plus every decoder parameter in use."""
        return self.adapter_parameter_count() + sum(p.size for p in self.decoder_parameters().values())

    def rank_table(self) -> List[Dict[str, object]]:
        return [
            {'adapter_id': s.adapter_id, 'stage': s.stage, 'kind': s.label, 'r_curr': s.r_curr}
            for s in self.live_adapters()
        ]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Trainable tensors and adapter rank state for checkpoints."""
        arrays = {f'param.{name}': p.data.copy() for name, p in self.named_parameters().items()}
        for state in self.adapters:
            arrays[f'adapter.{state.adapter_id}.r_curr'] = np.asarray(state.r_curr)
            arrays[f'adapter.{state.adapter_id}.alive'] = state.alive.copy()
            arrays[f'adapter.{state.adapter_id}.ema'] = state.ema_scores.copy()
        return arrays

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, param in self.named_parameters().items():
            param.data[...] = arrays[f'param.{name}']
        for state in self.adapters:
            state.r_curr = int(arrays[f'adapter.{state.adapter_id}.r_curr'])
            state.alive = np.asarray(arrays[f'adapter.{state.adapter_id}.alive'], dtype=bool).copy()
            state.ema_scores = np.asarray(arrays[f'adapter.{state.adapter_id}.ema'], dtype=np.float64).copy()
