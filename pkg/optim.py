"""
SGD with momentum over named parameters.
"""

import logging
from typing import Dict, Mapping

import numpy as np

from tensor import Tensor

logger = logging.getLogger(__name__)


class SGD:
    """
    Heavy-ball SGD: v <- mu*v + g, p <- p - lr*v.

    Parameters are addressed by name so rank shrinking can permute and clear
    the momentum of individual adapter slots.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9):
        self.params: Dict[str, Tensor] = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.params.items()
        }

    def step(self) -> None:
        for name, param in self.params.items():
            if param.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += param.grad
            param.data -= self.lr * v

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def permute_slots(self, prefix: str, perm: np.ndarray) -> None:
        """Reorder the rank-slot momentum of adapter `prefix` (A rows, B columns)."""
        if f'{prefix}.A' in self.velocity:
            v = self.velocity[f'{prefix}.A']
            v[...] = v[perm]
        if f'{prefix}.B' in self.velocity:
            v = self.velocity[f'{prefix}.B']
            v[...] = v[:, perm]

    def clear_slots(self, prefix: str, keep: int) -> None:
        """Drop momentum of slots >= keep."""
        if f'{prefix}.A' in self.velocity:
            self.velocity[f'{prefix}.A'][keep:] = 0.0
        if f'{prefix}.B' in self.velocity:
            self.velocity[f'{prefix}.B'][:, keep:] = 0.0

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {f'velocity.{name}': v.copy() for name, v in self.velocity.items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name in self.velocity:
            key = f'velocity.{name}'
            if key not in arrays:
                logger.warning(f"Checkpoint has no momentum for {name}; starting from zero")
                continue
            self.velocity[name][...] = arrays[key]

    def describe(self) -> str:
        count = sum(p.size for p in self.params.values())
        return f"SGD(lr={self.lr}, momentum={self.momentum}, tensors={len(self.params)}, values={count})"
