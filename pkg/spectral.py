"""
Task-spectral pyramidal decoder.

Per task and per backbone stage, features pass through a channel-wise
spectral filter (real filter on the unnormalized fft2 spectrum, then
per-channel scale and shift). Cross-task consensus then nudges each task's
spectrum towards the average spectrum of the other tasks, separately on the
high-magnitude and low-magnitude bins. The filtered pyramid is fused at the
finest stage resolution and mapped to task outputs by a 1x1 head.

Feature maps are laid out (N, C, H, W); filters are (C, H, W).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import BackboneSpec, ConfigError, DecoderConfig, TASK_KINDS, TaskSpec
from tensor import (
    DimensionError, Tensor, conv2d, fft2, gelu, ifft2, mean, mul, real, reshape, stack,
    threshold_mask, upsample_nearest
)

logger = logging.getLogger(__name__)


class SpectralResidueError(RuntimeError):
    """Raised when an inverse FFT leaves a non-negligible imaginary part."""


@dataclass
class SpectralFilterState:
    weight: Tensor
    alpha: Tensor
    beta: Tensor

    @classmethod
    def identity(cls, channels: int, height: int, width: int) -> 'SpectralFilterState':
        return cls(
            weight=Tensor(np.ones((channels, height, width)), requires_grad=True),
            alpha=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
        )

    @property
    def channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class XtConsState:
    """Consensus step sizes; both start at 0 so the step is a no-op at init."""
    alpha_low: Tensor
    alpha_high: Tensor
    tau: float = 0.5
    swap_bands: bool = False

    @classmethod
    def initial(cls, tau: float = 0.5, swap_bands: bool = False) -> 'XtConsState':
        return cls(
            alpha_low=Tensor(np.zeros(()), requires_grad=True),
            alpha_high=Tensor(np.zeros(()), requires_grad=True),
            tau=tau,
            swap_bands=swap_bands,
        )


def check_residue(z: Tensor, imag_tol: Optional[float]) -> None:
    """
    Raises:
        SpectralResidueError: If max|imag| exceeds imag_tol * max(1, max|real|)
    """
    if imag_tol is None or not z.is_complex:
        return
    residue = float(np.max(np.abs(z.data.imag))) if z.size else 0.0
    magnitude = float(np.max(np.abs(z.data.real))) if z.size else 0.0
    if residue > imag_tol * max(1.0, magnitude):
        raise SpectralResidueError(
            f"imaginary residue {residue:.3e} exceeds {imag_tol:.1e} (real magnitude {magnitude:.3e})"
        )


def cwsp_forward(x: Tensor, f: SpectralFilterState, imag_tol: Optional[float] = 1e-9) -> Tensor:
    """
    Channel-wise spectral filter: out_c = alpha_c * Re(ifft2(W_c * fft2(x_c))) + beta_c.

    Args:
        x: Features of shape (..., C, H, W)
        f: Filter state with weight (C, H, W)
        imag_tol: Residue tolerance checked before taking the real part

    Raises:
        DimensionError: If x does not end in the filter's shape
    """
    if x.shape[-3:] != f.weight.shape:
        raise DimensionError(f"cwsp: features {x.shape} do not match filter {f.weight.shape}")
    c = f.channels
    z = ifft2(mul(fft2(x), f.weight))
    check_residue(z, imag_tol)
    return real(z) * reshape(f.alpha, (c, 1, 1)) + reshape(f.beta, (c, 1, 1))


def band_masks(spectrum: np.ndarray, tau: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Partition frequency bins by normalized magnitude.

    A bin is "high" when |F| / max|F| over its channel exceeds tau; every other
    bin is "low". A channel whose spectrum is all zero is entirely low.

    Returns:
        (low, high) boolean arrays shaped like spectrum
    """
    magnitude = np.abs(spectrum)
    peak = magnitude.max(axis=(-2, -1), keepdims=True)
    normalized = np.divide(magnitude, peak, out=np.zeros_like(magnitude), where=peak > 0.0)
    high = threshold_mask(normalized, tau).data > 0.0
    return ~high, high


def spectral_consensus(
    main: Tensor,
    aux: Sequence[Tensor],
    st: XtConsState,
    imag_tol: Optional[float] = 1e-9
) -> Tensor:
    """
    Move main towards the auxiliary features' average spectrum.

    out = main + alpha_low * Re(ifft2(M_low * (F_avg - F_main)))
               + alpha_high * Re(ifft2(M_high * (F_avg - F_main)))

    The band masks are constants; no gradient flows through the thresholding.

    Raises:
        DimensionError: If aux is empty or shapes differ
    """
    if not aux:
        raise DimensionError("spectral_consensus needs at least one auxiliary feature map")
    for a in aux:
        if a.shape != main.shape:
            raise DimensionError(f"auxiliary features {a.shape} differ from main {main.shape}")

    f_main = fft2(main)
    low, high = band_masks(f_main.data, st.tau)
    if st.swap_bands:
        low, high = high, low
    f_avg = mean(stack([fft2(a) for a in aux], axis=0), axis=0)
    diff = f_avg - f_main

    z_low = ifft2(mul(diff, Tensor(low.astype(np.float64))))
    z_high = ifft2(mul(diff, Tensor(high.astype(np.float64))))
    check_residue(z_low, imag_tol)
    check_residue(z_high, imag_tol)
    return main + real(z_low) * st.alpha_low + real(z_high) * st.alpha_high


@dataclass
class FuseState:
    """1x1 projections per stage, shared bias, then a 3x3 conv."""
    projections: List[Tensor]
    bias: Tensor
    conv: Tensor
    conv_bias: Tensor

    @property
    def out_channels(self) -> int:
        return self.bias.shape[0]


def init_fuse(stage_channels: Sequence[int], out_channels: int, rng: np.random.Generator) -> FuseState:
    projections = [
        Tensor(rng.normal(0.0, 1.0 / np.sqrt(c), size=(out_channels, c, 1, 1)), requires_grad=True)
        for c in stage_channels
    ]
    conv = rng.normal(0.0, 1.0 / np.sqrt(9 * out_channels), size=(out_channels, out_channels, 3, 3))
    return FuseState(
        projections=projections,
        bias=Tensor(np.zeros(out_channels), requires_grad=True),
        conv=Tensor(conv, requires_grad=True),
        conv_bias=Tensor(np.zeros(out_channels), requires_grad=True),
    )


def fuse_projection(feats: Sequence[Tensor], fuse: FuseState) -> Tensor:
    """Project every stage to the common width and sum at the finest resolution (pre-bias)."""
    if len(feats) != len(fuse.projections):
        raise DimensionError(f"pyramid has {len(feats)} stage(s), fusion expects {len(fuse.projections)}")
    finest = feats[0].shape[-1]
    total = None
    for feat, proj in zip(feats, fuse.projections):
        projected = upsample_nearest(conv2d(feat, proj), finest // feat.shape[-1])
        total = projected if total is None else total + projected
    return total


def pyramid_fuse(feats: Sequence[Tensor], fuse: FuseState) -> Tensor:
    """
    Fuse a feature pyramid into one map at the finest stage resolution.

    Args:
        feats: Stage features, finest first, each (N, C_s, H_s, W_s)
        fuse: Fusion parameters

    Returns:
        Tensor of shape (N, C_out, H_0, W_0)
    """
    c = fuse.out_channels
    summed = fuse_projection(feats, fuse) + reshape(fuse.bias, (c, 1, 1))
    return gelu(conv2d(summed, fuse.conv, padding=1) + reshape(fuse.conv_bias, (c, 1, 1)))


@dataclass
class HeadState:
    weight: Tensor
    bias: Tensor


def init_head(in_channels: int, task: TaskSpec, rng: np.random.Generator) -> HeadState:
    out = task.out_channels
    return HeadState(
        weight=Tensor(rng.normal(0.0, 1.0 / np.sqrt(in_channels), size=(out, in_channels, 1, 1)), requires_grad=True),
        bias=Tensor(np.zeros(out), requires_grad=True),
    )


def task_head(fused: Tensor, task: TaskSpec, head: HeadState, patch_size: int = 1) -> Tensor:
    """
    1x1 map to task outputs, upsampled by patch_size to input resolution.

    Raises:
        ConfigError: For an unknown task kind
    """
    if task.kind not in TASK_KINDS:
        raise ConfigError(f"no head for task kind '{task.kind}'")
    out = conv2d(fused, head.weight) + reshape(head.bias, (head.bias.shape[0], 1, 1))
    return upsample_nearest(out, patch_size)


@dataclass
class TaskDecoder:
    task: TaskSpec
    filters: List[SpectralFilterState]
    consensus: List[XtConsState]
    fuse: FuseState
    head: HeadState

    def parameters(self, tspd: bool = True, xtcons: bool = True) -> Dict[str, Tensor]:
        """Named trainable tensors; switched-off components are left out."""
        prefix = f'decoder.{self.task.name}'
        params = {}
        for s, (f, st) in enumerate(zip(self.filters, self.consensus)):
            if tspd:
                params[f'{prefix}.s{s}.filter'] = f.weight
                params[f'{prefix}.s{s}.alpha'] = f.alpha
                params[f'{prefix}.s{s}.beta'] = f.beta
            if xtcons:
                params[f'{prefix}.s{s}.alpha_low'] = st.alpha_low
                params[f'{prefix}.s{s}.alpha_high'] = st.alpha_high
        for s, proj in enumerate(self.fuse.projections):
            params[f'{prefix}.fuse.proj{s}'] = proj
        params[f'{prefix}.fuse.bias'] = self.fuse.bias
        params[f'{prefix}.fuse.conv'] = self.fuse.conv
        params[f'{prefix}.fuse.conv_bias'] = self.fuse.conv_bias
        params[f'{prefix}.head.weight'] = self.head.weight
        params[f'{prefix}.head.bias'] = self.head.bias
        return params


def init_task_decoder(
    spec: BackboneSpec,
    task: TaskSpec,
    cfg: DecoderConfig,
    rng: np.random.Generator
) -> TaskDecoder:
    filters, consensus, channels = [], [], []
    for stage in range(spec.stages):
        c = spec.stage_channels(stage)
        h, w = spec.stage_resolution(stage)
        filters.append(SpectralFilterState.identity(c, h, w))
        consensus.append(XtConsState.initial(cfg.tau, cfg.swap_bands))
        channels.append(c)
    fuse = init_fuse(channels, cfg.fuse_channels, rng)
    head = init_head(cfg.fuse_channels, task, rng)
    return TaskDecoder(task=task, filters=filters, consensus=consensus, fuse=fuse, head=head)


def decode(
    features: Dict[str, List[Tensor]],
    decoders: Dict[str, TaskDecoder],
    cfg: DecoderConfig,
    patch_size: int
) -> Dict[str, Tensor]:
    """
    Run the decoder for every task.

    Consensus for task t at stage s reads the other tasks' stage-s features
    after spectral filtering (raw features when filtering is off). It is
    skipped when there is a single task.
    """
    names = list(decoders)
    filtered = {}
    for name in names:
        dec = decoders[name]
        if cfg.tspd:
            filtered[name] = [cwsp_forward(x, f, cfg.imag_tol) for x, f in zip(features[name], dec.filters)]
        else:
            filtered[name] = list(features[name])

    aligned = filtered
    if cfg.xtcons and len(names) > 1:
        aligned = {}
        for name in names:
            stages = []
            for s, main in enumerate(filtered[name]):
                aux = [filtered[other][s] for other in names if other != name]
                stages.append(spectral_consensus(main, aux, decoders[name].consensus[s], cfg.imag_tol))
            aligned[name] = stages

    outputs = {}
    for name in names:
        dec = decoders[name]
        outputs[name] = task_head(pyramid_fuse(aligned[name], dec.fuse), dec.task, dec.head, patch_size)
    return outputs
