"""
Synthetic multi-task dense-prediction benchmark.

Scenes are layered rectangles and ellipses over a background gradient. Each
scene carries three dense targets: class labels (segmentation), depth by
layer order (regression) and label boundaries (balanced binary).
"""

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import DataConfig, TaskSpec
from tensor import Tensor, abs_, log_softmax, mean, mul, softplus, sum_

logger = logging.getLogger(__name__)

BACKGROUND_DEPTH = 10.0

EXPORT_MAGIC = b'SRSC'
_DTYPE_CODES = {'f': np.dtype('<f8'), 'i': np.dtype('<i4')}


class DivergenceError(RuntimeError):
    """Raised when the training loss is not finite."""

    def __init__(self, message: str, task_losses: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.task_losses = dict(task_losses or {})


class EmptyDatasetError(ValueError):
    """Raised when evaluating on no scenes."""


@dataclass
class Scene:
    image: np.ndarray
    seg: np.ndarray
    depth: np.ndarray
    edges: np.ndarray


def class_colour(label: int, num_classes: int) -> np.ndarray:
    """Fixed RGB colour of a class, spread around the hue circle."""
    phase = label / max(num_classes, 1)
    return 0.5 + 0.4 * np.cos(2.0 * np.pi * (phase + np.array([0.0, 1.0 / 3.0, 2.0 / 3.0])))


def label_edges(seg: np.ndarray) -> np.ndarray:
    """1.0 where a 4-neighbour carries a different label."""
    edges = np.zeros(seg.shape, dtype=bool)
    vertical = seg[1:, :] != seg[:-1, :]
    horizontal = seg[:, 1:] != seg[:, :-1]
    edges[1:, :] |= vertical
    edges[:-1, :] |= vertical
    edges[:, 1:] |= horizontal
    edges[:, :-1] |= horizontal
    return edges.astype(np.float64)


def generate_scene(
    rng: np.random.Generator,
    size: Tuple[int, int] = (64, 64),
    num_classes: int = 4,
    min_shapes: int = 1,
    max_shapes: int = 4,
    n_shapes: Optional[int] = None
) -> Scene:
    """
    Draw one scene.

    Shapes are painted back to front; later shapes are nearer, so depth
    strictly decreases with paint order. Class 0 is the background.

    Args:
        rng: Seeded generator
        size: (H, W)
        num_classes: Labels including background
        min_shapes: Fewest shapes drawn when n_shapes is None
        max_shapes: Most shapes drawn when n_shapes is None
        n_shapes: Exact shape count

    Returns:
        Scene with image in [0, 1] and positive depth
    """
    h, w = size
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing='ij')

    base = rng.uniform(0.3, 0.7, size=3)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    image = base[:, None, None] + 0.2 * (ramp - ramp.mean())[None]
    seg = np.zeros(size, dtype=np.int64)
    depth = np.full(size, BACKGROUND_DEPTH)

    count = n_shapes if n_shapes is not None else int(rng.integers(min_shapes, max_shapes + 1))
    for layer in range(count):
        label = int(rng.integers(1, num_classes)) if num_classes > 1 else 0
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        ry, rx = rng.uniform(0.08, 0.3, size=2)
        if rng.random() < 0.5:
            region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        if not region.any():
            region[int(cy * (h - 1)), int(cx * (w - 1))] = True
        seg[region] = label
        depth[region] = BACKGROUND_DEPTH - 8.0 * (layer + 1) / (count + 1)
        image[:, region] = class_colour(label, num_classes)[:, None]

    return Scene(
        image=np.clip(image, 0.0, 1.0),
        seg=seg,
        depth=depth,
        edges=label_edges(seg),
    )


def generate_dataset(
    seed: int,
    count: int,
    size: Tuple[int, int],
    num_classes: int = 4,
    data: Optional[DataConfig] = None,
    offset: int = 0
) -> List[Scene]:
    """Scenes offset..offset+count-1 of the stream for seed; scene i uses default_rng([seed, i])."""
    data = data or DataConfig()
    return [
        generate_scene(np.random.default_rng([seed, i]), size, num_classes, data.min_shapes, data.max_shapes)
        for i in range(offset, offset + count)
    ]


@dataclass
class Batch:
    images: np.ndarray
    seg: np.ndarray
    depth: np.ndarray
    edges: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]


def collate(scenes: Sequence[Scene]) -> Batch:
    return Batch(
        images=np.stack([s.image for s in scenes]),
        seg=np.stack([s.seg for s in scenes]),
        depth=np.stack([s.depth for s in scenes]),
        edges=np.stack([s.edges for s in scenes]),
    )


def task_target(task: TaskSpec, batch: Batch) -> np.ndarray:
    return {'segmentation': batch.seg, 'regression_l1': batch.depth, 'balanced_binary': batch.edges}[task.kind]


# Losses

def segmentation_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean pixel cross-entropy; logits (N, K, H, W), labels (N, H, W)."""
    k = logits.shape[1]
    one_hot = np.moveaxis(np.eye(k)[labels], -1, 1)
    return -mean(sum_(mul(log_softmax(logits, axis=1), Tensor(one_hot)), axis=1))


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute error; pred (N, 1, H, W), target (N, H, W)."""
    return mean(abs_(pred - Tensor(target[:, None])))


def balanced_bce_weights(target: np.ndarray) -> np.ndarray:
    """
    Per-pixel weights 1 / (n_present * freq_c) for the class c of each pixel.

    Weights average to 1 over the batch; with a single class present they are
    all 1.
    """
    pos = float(target.mean())
    freqs = {1: pos, 0: 1.0 - pos}
    present = [c for c, f in freqs.items() if f > 0.0]
    weights = np.zeros(target.shape)
    for c in present:
        weights[target == c] = 1.0 / (len(present) * freqs[c])
    return weights


def balanced_bce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Class-balanced binary cross-entropy on logits (N, 1, H, W)."""
    y = target[:, None]
    weights = Tensor(balanced_bce_weights(y))
    per_pixel = softplus(logits) - mul(logits, Tensor(y))
    return mean(mul(per_pixel, weights))


def task_loss(task: TaskSpec, pred: Tensor, batch: Batch) -> Tensor:
    target = task_target(task, batch)
    if task.kind == 'segmentation':
        return segmentation_loss(pred, target)
    if task.kind == 'regression_l1':
        return l1_loss(pred, target)
    return balanced_bce_loss(pred, target)


def mtl_loss(preds: Mapping[str, Tensor], batch: Batch, tasks: Sequence[TaskSpec]) -> Tuple[Tensor, Dict[str, float]]:
    """
    Weighted sum of task losses.

    Returns:
        (total loss, per-task unweighted loss values)

    Raises:
        DivergenceError: If any task loss or the total is not finite
    """
    total = None
    parts = {}
    for task in tasks:
        loss = task_loss(task, preds[task.name], batch)
        parts[task.name] = loss.item()
        weighted = loss * task.weight
        total = weighted if total is None else total + weighted
    if not np.isfinite(total.item()) or not all(np.isfinite(v) for v in parts.values()):
        details = ', '.join(f"{k}={v}" for k, v in parts.items())
        raise DivergenceError(f"non-finite loss ({details})", parts)
    return total, parts


# Metrics

def delta_m(metrics: Sequence[float], reference: Sequence[float], lower_is_better: Sequence[bool]) -> float:
    """
    Mean signed relative change vs single-task references, in percent.

    Raises:
        ValueError: On length mismatch or a zero reference value
    """
    if not (len(metrics) == len(reference) == len(lower_is_better)) or not metrics:
        raise ValueError("delta_m needs equally long, non-empty metric, reference and direction lists")
    total = 0.0
    for m, ref, lower in zip(metrics, reference, lower_is_better):
        if ref == 0:
            raise ValueError("delta_m reference values must be nonzero")
        sign = -1.0 if lower else 1.0
        total += sign * (m - ref) / ref
    return 100.0 * total / len(metrics)


def delta_m_for(metrics: Mapping[str, float], reference: Optional[Mapping[str, float]], tasks: Sequence[TaskSpec]) -> float:
    """delta_m keyed by task name; NaN without a reference."""
    if not reference:
        return float('nan')
    return delta_m(
        [metrics[t.name] for t in tasks],
        [reference[t.name] for t in tasks],
        [t.lower_is_better for t in tasks],
    )


def confusion_matrix(pred: np.ndarray, target: np.ndarray, num_classes: int) -> np.ndarray:
    index = target.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(index, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou_from_confusion(cm: np.ndarray) -> float:
    """Mean of TP / (TP + FP + FN) over classes with a nonzero union."""
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        return 1.0
    return float(np.mean(tp[present] / union[present]))


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.sqrt(np.mean((pred - target) ** 2)))


@dataclass
class MetricRow:
    epoch: int
    metrics: Dict[str, float]
    trainable_params: int
    adapter_params: int
    delta_m: float = float('nan')
    task_losses: Dict[str, float] = field(default_factory=dict)

    def to_record(self) -> Dict[str, object]:
        record = {'epoch': self.epoch}
        record.update(self.metrics)
        record['trainable_params'] = self.trainable_params
        record['adapter_params'] = self.adapter_params
        record['delta_m'] = self.delta_m
        return record


def evaluate(model, scenes: Sequence[Scene], tasks: Sequence[TaskSpec], batch_size: int = 8,
             epoch: int = 0, reference: Optional[Mapping[str, float]] = None) -> MetricRow:
    """
    Score a model at full current rank.

    Segmentation-like tasks use one confusion matrix pooled over every pixel
    of every scene (edges are scored as two classes with a logit threshold of
    0), and mIoU is read from that pooled matrix. This is not the mean of
    per-image mIoU: a class counts when it appears anywhere in the set, and
    classes absent from the whole set are left out. Regression tasks use
    rmse over all pixels.

    Raises:
        EmptyDatasetError: If scenes is empty
    """
    if not scenes:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")

    confusions = {t.name: np.zeros((t.num_classes, t.num_classes), dtype=np.int64) for t in tasks
                  if t.kind != 'regression_l1'}
    squared = {t.name: 0.0 for t in tasks if t.kind == 'regression_l1'}
    pixels = 0
    masks = model.full_masks()
    for start in range(0, len(scenes), batch_size):
        batch = collate(scenes[start:start + batch_size])
        preds = model.forward(batch.images, masks)
        pixels += batch.seg.size
        for task in tasks:
            out = preds[task.name].data
            target = task_target(task, batch)
            if task.kind == 'segmentation':
                confusions[task.name] += confusion_matrix(out.argmax(axis=1), target, task.num_classes)
            elif task.kind == 'balanced_binary':
                confusions[task.name] += confusion_matrix(out[:, 0] > 0.0, target, 2)
            else:
                squared[task.name] += float(np.sum((out[:, 0] - target) ** 2))

    metrics = {}
    for task in tasks:
        if task.kind == 'regression_l1':
            metrics[task.name] = float(np.sqrt(squared[task.name] / pixels))
        else:
            metrics[task.name] = miou_from_confusion(confusions[task.name])

    return MetricRow(
        epoch=epoch,
        metrics=metrics,
        trainable_params=model.trainable_parameter_count(),
        adapter_params=model.adapter_parameter_count(),
        delta_m=delta_m_for(metrics, reference, tasks),
    )


# Export

def write_array(path: str, array: np.ndarray) -> None:
    """
    Header: magic, dtype code, ndim (uint8), dims (uint32 LE each); then raw
    little-endian data in row-major order.
    """
    code = 'i' if np.issubdtype(array.dtype, np.integer) or array.dtype == bool else 'f'
    data = np.ascontiguousarray(array, dtype=_DTYPE_CODES[code])
    with open(path, 'wb') as f:
        f.write(EXPORT_MAGIC)
        f.write(code.encode('ascii'))
        f.write(struct.pack('<B', data.ndim))
        f.write(struct.pack(f'<{data.ndim}I', *data.shape))
        f.write(data.tobytes())


def read_array(path: str) -> np.ndarray:
    with open(path, 'rb') as f:
        if f.read(4) != EXPORT_MAGIC:
            raise ValueError(f"{path} is not a scene array file")
        code = f.read(1).decode('ascii')
        (ndim,) = struct.unpack('<B', f.read(1))
        shape = struct.unpack(f'<{ndim}I', f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=_DTYPE_CODES[code])
    return data.reshape(shape)


def export_scenes(seed: int, count: int, out_dir: str, size: Tuple[int, int] = (64, 64),
                  num_classes: int = 4, data: Optional[DataConfig] = None) -> List[str]:
    """Write scenes as one array file per field. Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, scene in enumerate(generate_dataset(seed, count, size, num_classes, data)):
        for name in ('image', 'seg', 'depth', 'edges'):
            path = os.path.join(out_dir, f'scene_{i:05d}_{name}.bin')
            write_array(path, getattr(scene, name))
            paths.append(path)
    logger.info(f"Exported {count} scene(s) to {out_dir}")
    return paths
