"""
Low-rank adapters (LoRA and DoRA) with prefix rank masking.

Shapes follow the usual LoRA convention: a frozen layer maps in -> out with
weight (out x in), the adapter has A (r x in) and B (out x r), and inputs are
laid out as (..., in).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import BackboneSpec, ConfigError
from tensor import (
    DimensionError, Tensor, matmul, maximum, reshape, rowwise_l2_norm, scale, swap_last
)

logger = logging.getLogger(__name__)

# Guard for the DoRA row-norm denominator
NORM_EPS = 1e-12


class InvariantError(ValueError):
    """Raised when a prefix mask or adapter rank violates its invariants."""


@dataclass
class FrozenLinear:
    """Pretrained affine map y = x @ W^T + b; never updated after pretraining."""
    weight: Tensor
    bias: Tensor

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        _check_input(self, x)
        return matmul(x, swap_last(self.weight)) + self.bias

    @classmethod
    def initialize(cls, in_features: int, out_features: int, rng: np.random.Generator) -> 'FrozenLinear':
        bound = 1.0 / np.sqrt(in_features)
        weight = rng.uniform(-bound, bound, size=(out_features, in_features))
        bias = rng.uniform(-bound, bound, size=out_features)
        return cls(weight=Tensor(weight), bias=Tensor(bias))


@dataclass
class PrefixMask:
    """Activates the first b of r_init rank slots."""
    b: int
    mask: np.ndarray

    def __post_init__(self):
        if self.b < 1 or self.b > self.mask.size:
            raise InvariantError(f"prefix size {self.b} outside [1, {self.mask.size}]")

    @classmethod
    def of(cls, b: int, r_init: int) -> 'PrefixMask':
        mask = np.zeros(r_init, dtype=bool)
        mask[:b] = True
        return cls(b=b, mask=mask)


@dataclass
class AdapterState:
    """
    One adapter attached to a frozen linear layer.

    Slots [0, r_curr) are live; slots past r_curr were erased by rank
    shrinking and hold zeros.
    """
    adapter_id: str
    A: Tensor
    B: Tensor
    m: Tensor
    r_init: int
    r_curr: int
    kind: str
    stage: int
    block: int
    layer: str
    task: Optional[str] = None
    alpha: float = 1.0
    ema_scores: np.ndarray = field(default=None)
    alive: np.ndarray = field(default=None)
    dormant: bool = False

    def __post_init__(self):
        if self.ema_scores is None:
            self.ema_scores = np.zeros(self.r_init)
        if self.alive is None:
            self.alive = np.arange(self.r_init) < self.r_curr
        if not 1 <= self.r_curr <= self.r_init:
            raise InvariantError(f"{self.adapter_id}: r_curr {self.r_curr} outside [1, {self.r_init}]")

    @property
    def label(self) -> str:
        return 'shared' if self.kind == 'shared' else f'task-{self.task}'

    @property
    def in_features(self) -> int:
        return self.A.shape[1]

    @property
    def out_features(self) -> int:
        return self.B.shape[0]

    def trainable_count(self, mode: str = 'dora') -> int:
        """Live adapter parameters: r_curr*(in+out), plus the magnitude under DoRA."""
        count = self.r_curr * (self.in_features + self.out_features)
        if mode == 'dora':
            count += self.out_features
        return count

    def parameters(self, mode: str = 'dora') -> Dict[str, Tensor]:
        params = {f'{self.adapter_id}.A': self.A, f'{self.adapter_id}.B': self.B}
        if mode == 'dora':
            params[f'{self.adapter_id}.m'] = self.m
        return params

    def full_mask(self) -> PrefixMask:
        return PrefixMask.of(self.r_curr, self.r_init)

    def check_prefix(self) -> None:
        """Raise InvariantError unless alive and ema follow the live prefix."""
        expected = np.arange(self.r_init) < self.r_curr
        if not np.array_equal(self.alive, expected):
            raise InvariantError(f"{self.adapter_id}: alive is not a prefix of length {self.r_curr}")
        if np.any(self.ema_scores[self.r_curr:] != 0.0):
            raise InvariantError(f"{self.adapter_id}: erased slots still carry importance")


def init_adapter(
    adapter_id: str,
    layer: FrozenLinear,
    r_init: int,
    rng: np.random.Generator,
    alpha: float = 1.0,
    kind: str = 'shared',
    task: Optional[str] = None,
    stage: int = 0,
    block: int = 0,
    layer_name: str = ''
) -> AdapterState:
    """
    Create an adapter in its identity configuration.

    A ~ U(-1/sqrt(in), 1/sqrt(in)), B = 0 and m = row norms of W, so the
    adapted layer reproduces the frozen layer exactly until B moves.
    """
    if r_init < 1:
        raise InvariantError(f"r_init must be >= 1, got {r_init}")
    bound = 1.0 / np.sqrt(layer.in_features)
    A = rng.uniform(-bound, bound, size=(r_init, layer.in_features))
    B = np.zeros((layer.out_features, r_init))
    m = rowwise_l2_norm(layer.weight).data.copy()
    return AdapterState(
        adapter_id=adapter_id,
        A=Tensor(A, requires_grad=True),
        B=Tensor(B, requires_grad=True),
        m=Tensor(m, requires_grad=True),
        r_init=r_init,
        r_curr=r_init,
        kind=kind,
        task=task,
        stage=stage,
        block=block,
        layer=layer_name,
        alpha=alpha,
    )


def sample_prefix(r_curr: int, rng: np.random.Generator, r_init: Optional[int] = None) -> PrefixMask:
    """
    Draw b uniformly from {1, ..., r_curr}.

    Args:
        r_curr: Current rank of the adapter
        rng: Seeded generator; one draw per call
        r_init: Mask length (defaults to r_curr)

    Raises:
        InvariantError: If r_curr < 1
    """
    if r_curr < 1:
        raise InvariantError(f"cannot sample a prefix for rank {r_curr}")
    b = int(rng.integers(1, r_curr + 1))
    return PrefixMask.of(b, r_init or r_curr)


def masked_factors(state: AdapterState, mask: PrefixMask) -> Tuple[Tensor, Tensor]:
    """
    Zero the rank slots outside the prefix: A_eff = diag(mask) A, B_eff = B diag(mask).

    Raises:
        InvariantError: If the mask exceeds the current rank or has the wrong length
    """
    if mask.mask.size != state.r_init:
        raise InvariantError(f"{state.adapter_id}: mask length {mask.mask.size} != r_init {state.r_init}")
    if mask.b > state.r_curr:
        raise InvariantError(f"{state.adapter_id}: prefix {mask.b} exceeds r_curr {state.r_curr}")
    keep = mask.mask.astype(np.float64)
    A_eff = state.A * Tensor(keep[:, None])
    B_eff = state.B * Tensor(keep[None, :])
    return A_eff, B_eff


def _prefix_factors(state: AdapterState, mask: PrefixMask) -> Tuple[Tensor, Tensor]:
    # Masked factors restricted to the live prefix. Cropping after masking makes
    # the masked forward and a physically cropped adapter run the same ops.
    A_eff, B_eff = masked_factors(state, mask)
    return A_eff[:mask.b], B_eff[:, :mask.b]


def _check_input(layer: FrozenLinear, x: Tensor) -> None:
    if x.ndim < 2 or x.shape[-1] != layer.in_features:
        raise DimensionError(f"input {x.shape} does not end in {layer.in_features} features")


def _as_rows(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 1:
        return reshape(x, (1, x.shape[0])), True
    return x, False


def lora_forward(layer: FrozenLinear, state: AdapterState, mask: PrefixMask, x: Tensor) -> Tensor:
    """W x + b + alpha * B_eff A_eff x."""
    x, squeeze = _as_rows(x)
    _check_input(layer, x)
    A_b, B_b = _prefix_factors(state, mask)
    down = matmul(x, swap_last(A_b))
    out = layer(x) + scale(matmul(down, swap_last(B_b)), state.alpha)
    return reshape(out, (layer.out_features,)) if squeeze else out


def dora_forward(layer: FrozenLinear, state: AdapterState, mask: PrefixMask, x: Tensor) -> Tensor:
    """
    Magnitude/direction decomposed update.

    V = W + alpha * B_eff A_eff, each row of V is divided by max(||V_j||, eps)
    and rescaled by m_j, then applied to x with the frozen bias.
    """
    x, squeeze = _as_rows(x)
    _check_input(layer, x)
    A_b, B_b = _prefix_factors(state, mask)
    V = layer.weight + scale(matmul(B_b, A_b), state.alpha)
    denom = maximum(rowwise_l2_norm(V), NORM_EPS)
    row_scale = state.m / denom
    weight = V * reshape(row_scale, (layer.out_features, 1))
    out = matmul(x, swap_last(weight)) + layer.bias
    return reshape(out, (layer.out_features,)) if squeeze else out


def adapter_forward(
    mode: str,
    layer: FrozenLinear,
    state: Optional[AdapterState],
    mask: Optional[PrefixMask],
    x: Tensor
) -> Tensor:
    """Dispatch on adapter mode; without a state the frozen layer runs alone."""
    if state is None or mode == 'none':
        return layer(x)
    if mask is None:
        raise InvariantError(f"no prefix mask for adapter {state.adapter_id}")
    if mode == 'dora':
        return dora_forward(layer, state, mask, x)
    if mode == 'lora':
        return lora_forward(layer, state, mask, x)
    raise ConfigError(f"unknown adapter mode '{mode}'")


@dataclass(frozen=True)
class AdapterPosition:
    stage: int
    block: int
    layer: str
    kind: str
    task: Optional[str] = None
    dormant: bool = False

    @property
    def adapter_id(self) -> str:
        owner = 'shared' if self.task is None else f'task-{self.task}'
        return f's{self.stage}.b{self.block}.{self.layer}.{owner}'


@dataclass
class AdapterLayout:
    positions: List[AdapterPosition]

    def __iter__(self) -> Iterator[AdapterPosition]:
        return iter(self.positions)

    def __len__(self) -> int:
        return len(self.positions)

    def count(self, kind: Optional[str] = None) -> int:
        return sum(1 for p in self.positions if kind is None or p.kind == kind)

    def at_block(self, stage: int, block: int) -> List[AdapterPosition]:
        return [p for p in self.positions if p.stage == stage and p.block == block]


def place_adapters(spec: BackboneSpec, tasks: Union[int, Sequence[str]]) -> AdapterLayout:
    """
    Enumerate adapter positions.

    Every block carries one shared adapter per adapted layer; the last block of
    each stage additionally carries one task-specific adapter per task. The
    shared adapters of the very last block have no downstream consumer and are
    marked dormant.

    Raises:
        ConfigError: If there are no tasks
    """
    names = [f'task{i}' for i in range(tasks)] if isinstance(tasks, int) else list(tasks)
    if len(names) < 1:
        raise ConfigError("at least one task is required to place adapters")

    last_block = spec.blocks_per_stage - 1
    positions = []
    for stage in range(spec.stages):
        for block in range(spec.blocks_per_stage):
            for layer in spec.adapted_layers:
                dormant = stage == spec.stages - 1 and block == last_block
                positions.append(AdapterPosition(stage, block, layer, 'shared', dormant=dormant))
                if block == last_block:
                    for name in names:
                        positions.append(AdapterPosition(stage, block, layer, 'task', task=name))
    return AdapterLayout(positions)


class AdapterBank:
    """Adapters keyed by id, with lookup by backbone position."""

    def __init__(self, states: Optional[Sequence[AdapterState]] = None):
        self.states: Dict[str, AdapterState] = {}
        self._index: Dict[Tuple[int, int, str, Optional[str]], AdapterState] = {}
        for state in states or []:
            self.add(state)

    def add(self, state: AdapterState) -> None:
        self.states[state.adapter_id] = state
        self._index[(state.stage, state.block, state.layer, state.task)] = state

    def lookup(self, stage: int, block: int, layer: str, task: Optional[str] = None) -> Optional[AdapterState]:
        return self._index.get((stage, block, layer, task))

    def __iter__(self) -> Iterator[AdapterState]:
        return iter(self.states.values())

    def __len__(self) -> int:
        return len(self.states)

    def live(self) -> List[AdapterState]:
        return [s for s in self.states.values() if not s.dormant]
