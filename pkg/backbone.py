"""
Frozen hierarchical encoder.

Images are cut into patches and embedded; every stage runs token-mixing +
MLP blocks, and stages are joined by 2x2 patch merging (channels double,
resolution halves). The trunk is fitted briefly on an image reconstruction
objective, then frozen and cached by spec hash.

Within a stage, blocks before the last run on the shared path. The last block
forks: each task runs it with its own adapters to produce that task's stage
feature, while the shared path runs it with the shared adapters and continues
into the next stage.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from adapters import (
    AdapterBank, AdapterLayout, FrozenLinear, InvariantError, PrefixMask, adapter_forward, init_adapter
)
from config import BackboneSpec, backbone_hash
from optim import SGD
from tensor import DimensionError, Tape, Tensor, gelu, mean, reshape, sqrt, square, swap_last, transpose

logger = logging.getLogger(__name__)

LAYERNORM_EPS = 1e-5

# Stage features of one path, finest first, each (N, C_s, H_s, W_s)
Pyramid = List[Tensor]


@dataclass
class Block:
    mix: FrozenLinear
    fc1: FrozenLinear
    fc2: FrozenLinear

    def layer(self, name: str) -> FrozenLinear:
        return getattr(self, name)


@dataclass
class Backbone:
    spec: BackboneSpec
    embed: FrozenLinear
    blocks: List[List[Block]]
    merges: List[FrozenLinear]

    def named_weights(self) -> Dict[str, Tensor]:
        weights = {'embed.weight': self.embed.weight, 'embed.bias': self.embed.bias}
        for s, stage in enumerate(self.blocks):
            for b, block in enumerate(stage):
                for name in ('mix', 'fc1', 'fc2'):
                    layer = block.layer(name)
                    weights[f's{s}.b{b}.{name}.weight'] = layer.weight
                    weights[f's{s}.b{b}.{name}.bias'] = layer.bias
        for s, merge in enumerate(self.merges):
            weights[f'merge{s}.weight'] = merge.weight
            weights[f'merge{s}.bias'] = merge.bias
        return weights

    def parameter_count(self) -> int:
        return sum(w.size for w in self.named_weights().values())

    def freeze(self) -> None:
        for w in self.named_weights().values():
            w.requires_grad = False
            w.zero_grad()


def expected_parameter_count(spec: BackboneSpec) -> int:
    """Closed-form count of frozen trunk parameters."""
    p, c0 = spec.patch_size, spec.base_channels
    total = 3 * p * p * c0 + c0
    for s in range(spec.stages):
        c = spec.stage_channels(s)
        h, w = spec.stage_resolution(s)
        tokens = h * w
        per_block = (tokens * tokens + tokens) + (2 * c * c + 2 * c) + (2 * c * c + c)
        total += spec.blocks_per_stage * per_block
        if s < spec.stages - 1:
            total += 8 * c * c + 2 * c
    return total


def _init_weights(spec: BackboneSpec) -> Backbone:
    rng = np.random.default_rng(spec.seed)
    p, c0 = spec.patch_size, spec.base_channels
    embed = FrozenLinear.initialize(3 * p * p, c0, rng)
    blocks, merges = [], []
    for s in range(spec.stages):
        c = spec.stage_channels(s)
        h, w = spec.stage_resolution(s)
        tokens = h * w
        blocks.append([
            Block(
                mix=FrozenLinear.initialize(tokens, tokens, rng),
                fc1=FrozenLinear.initialize(c, 2 * c, rng),
                fc2=FrozenLinear.initialize(2 * c, c, rng),
            )
            for _ in range(spec.blocks_per_stage)
        ])
        if s < spec.stages - 1:
            merges.append(FrozenLinear.initialize(4 * c, 2 * c, rng))
    return Backbone(spec=spec, embed=embed, blocks=blocks, merges=merges)


def patchify(images: Tensor, patch: int) -> Tensor:
    """(N, 3, H, W) -> (N, L, 3*p*p) with tokens in row-major patch order."""
    n, ch, h, w = images.shape
    x = reshape(images, (n, ch, h // patch, patch, w // patch, patch))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (n, (h // patch) * (w // patch), ch * patch * patch))


def layer_norm(x: Tensor) -> Tensor:
    """Parameter-free normalization over the channel axis."""
    centered = x - mean(x, axis=-1, keepdims=True)
    var = mean(square(centered), axis=-1, keepdims=True)
    return centered / sqrt(var + LAYERNORM_EPS)


def tokens_to_map(tokens: Tensor, hw: Tuple[int, int]) -> Tensor:
    n, _, c = tokens.shape
    return reshape(swap_last(tokens), (n, c, hw[0], hw[1]))


def patch_merge(tokens: Tensor, hw: Tuple[int, int], merge: FrozenLinear) -> Tensor:
    """Concatenate 2x2 token neighbourhoods (4C) and project to 2C."""
    n, _, c = tokens.shape
    h, w = hw
    x = reshape(tokens, (n, h // 2, 2, w // 2, 2, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return merge(reshape(x, (n, (h // 2) * (w // 2), 4 * c)))


AdapterLookup = Optional[Mapping[str, Tuple[object, Optional[PrefixMask]]]]


def block_forward(
    block: Block,
    x: Tensor,
    adapters: AdapterLookup = None,
    mode: str = 'none'
) -> Tensor:
    """
    h = x + T(mix(T(norm(x)))); out = h + fc2(gelu(fc1(norm(h)))).

    Args:
        block: Frozen block weights
        x: Tokens (N, L, C)
        adapters: layer name -> (AdapterState, PrefixMask) for adapted layers
        mode: Adapter mode ('dora', 'lora' or 'none')
    """
    def run(name: str, inp: Tensor) -> Tensor:
        state, mask = (adapters or {}).get(name, (None, None))
        return adapter_forward(mode, block.layer(name), state, mask, inp)

    mixed = swap_last(run('mix', swap_last(layer_norm(x))))
    h = x + mixed
    return h + run('fc2', gelu(run('fc1', layer_norm(h))))


def _block_adapters(
    bank: Optional[AdapterBank],
    masks: Mapping[str, PrefixMask],
    stage: int,
    block: int,
    task: Optional[str]
) -> Dict[str, Tuple[object, Optional[PrefixMask]]]:
    found = {}
    if bank is None:
        return found
    for name in ('mix', 'fc1', 'fc2'):
        state = bank.lookup(stage, block, name, task)
        if state is None or state.dormant:
            continue
        if state.adapter_id not in masks:
            raise InvariantError(f"no prefix mask for live adapter {state.adapter_id}")
        found[name] = (state, masks[state.adapter_id])
    return found


def forward_multitask(
    bb: Backbone,
    x: Tensor,
    masks: Mapping[str, PrefixMask],
    bank: Optional[AdapterBank] = None,
    tasks: Optional[List[str]] = None,
    mode: str = 'dora'
) -> Tuple[Pyramid, Dict[str, Pyramid]]:
    """
    Shared and per-task stage features.

    Args:
        bb: Frozen backbone
        x: Images (N, 3, H, W)
        masks: Prefix mask per live adapter id
        bank: Adapters (None for the plain frozen trunk)
        tasks: Task names; task paths use the task adapters of each last block
        mode: Adapter mode

    Returns:
        (shared pyramid, {task: pyramid})

    Raises:
        DimensionError: If images do not match the input size
        InvariantError: If a live adapter has no mask
    """
    spec = bb.spec
    tasks = tasks or []
    if x.shape[1:] != (3,) + tuple(spec.input_size):
        raise DimensionError(f"images {x.shape} do not match input size {spec.input_size}")

    tokens = bb.embed(patchify(x, spec.patch_size))
    shared: Pyramid = []
    per_task: Dict[str, Pyramid] = {t: [] for t in tasks}
    last = spec.blocks_per_stage - 1
    for s, stage in enumerate(bb.blocks):
        hw = spec.stage_resolution(s)
        for b in range(last):
            tokens = block_forward(stage[b], tokens, _block_adapters(bank, masks, s, b, None), mode)
        for t in tasks:
            out = block_forward(stage[last], tokens, _block_adapters(bank, masks, s, last, t), mode)
            per_task[t].append(tokens_to_map(out, hw))
        tokens = block_forward(stage[last], tokens, _block_adapters(bank, masks, s, last, None), mode)
        shared.append(tokens_to_map(tokens, hw))
        if s < spec.stages - 1:
            tokens = patch_merge(tokens, hw, bb.merges[s])
    return shared, per_task


def attach_adapters(
    bb: Backbone,
    layout: AdapterLayout,
    r_init: int,
    rng: np.random.Generator,
    alpha: float = 1.0
) -> AdapterBank:
    """Create one identity-initialized adapter per layout position."""
    bank = AdapterBank()
    for pos in layout:
        layer = bb.blocks[pos.stage][pos.block].layer(pos.layer)
        state = init_adapter(
            pos.adapter_id, layer, r_init, rng, alpha=alpha, kind=pos.kind, task=pos.task,
            stage=pos.stage, block=pos.block, layer_name=pos.layer
        )
        state.dormant = pos.dormant
        bank.add(state)
    dormant = sum(1 for s in bank if s.dormant)
    if dormant:
        logger.warning(f"{dormant} shared adapter(s) in the final block have no consumer and stay dormant")
    return bank


def _pooled_targets(images: np.ndarray, spec: BackboneSpec, stage: int) -> np.ndarray:
    factor = spec.patch_size * 2 ** stage
    n, c, h, w = images.shape
    pooled = images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    return pooled.reshape(n, c, -1).transpose(0, 2, 1)


def pretrain(bb: Backbone, steps: int, batch: int = 8, lr: float = 0.05) -> List[float]:
    """
    Fit the trunk to reconstruct average-pooled images from every stage.

    Per-stage linear read-outs are trained alongside and discarded afterwards.

    Returns:
        Reconstruction loss per step
    """
    from bench import generate_scene

    spec = bb.spec
    if steps <= 0:
        return []
    rng = np.random.default_rng([spec.seed, 0, 7])
    pool = np.stack([
        generate_scene(np.random.default_rng([spec.seed, 7, i]), spec.input_size).image
        for i in range(2 * batch)
    ])
    readouts = [
        FrozenLinear.initialize(spec.stage_channels(s), 3, rng) for s in range(spec.stages)
    ]
    params = dict(bb.named_weights())
    for s, readout in enumerate(readouts):
        params[f'readout{s}.weight'] = readout.weight
        params[f'readout{s}.bias'] = readout.bias
    for p in params.values():
        p.requires_grad = True
    optimizer = SGD(params, lr=lr, momentum=0.9)

    losses = []
    for step in range(steps):
        idx = rng.choice(pool.shape[0], size=batch, replace=False)
        images = pool[idx]
        with Tape() as tape:
            shared, _ = forward_multitask(bb, Tensor(images), {}, bank=None, mode='none')
            loss = None
            for s, feat in enumerate(shared):
                n, c = feat.shape[:2]
                tokens = swap_last(reshape(feat, (n, c, -1)))
                err = readouts[s](tokens) - Tensor(_pooled_targets(images, spec, s))
                term = mean(square(err))
                loss = term if loss is None else loss + term
        tape.backward(loss)
        optimizer.step()
        optimizer.zero_grad()
        losses.append(loss.item())
        logger.debug(f"Pretrain step {step + 1}/{steps}: loss={losses[-1]:.6f}")

    bb.freeze()
    logger.info(f"Pretrained trunk for {steps} steps: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return losses


def build_backbone(spec: BackboneSpec, cache_dir: Optional[str] = None) -> Backbone:
    """
    Deterministic frozen trunk for spec; loaded from cache_dir when present.

    Returns:
        Backbone with every weight frozen
    """
    path = os.path.join(cache_dir, f'trunk-{backbone_hash(spec)}.npz') if cache_dir else None
    bb = _init_weights(spec)
    if path and os.path.exists(path):
        with np.load(path) as archive:
            for name, weight in bb.named_weights().items():
                weight.data[...] = archive[name]
        logger.info(f"Loaded frozen trunk from {path}")
        bb.freeze()
        return bb

    pretrain(bb, spec.pretrain_steps)
    bb.freeze()
    if path:
        os.makedirs(cache_dir, exist_ok=True)
        tmp = path + '.tmp.npz'
        np.savez(tmp, **{name: w.data for name, w in bb.named_weights().items()})
        os.replace(tmp, path)
        logger.info(f"Cached frozen trunk at {path}")
    return bb
