"""
Dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy buffers (float64 or complex128). Operations executed while a
Tape is active are appended to it in execution order, so the tape is always
topologically sorted; Tape.backward replays it once in reverse.

FFT convention: fft2 is the unnormalized forward DFT over the last two axes and
ifft2 applies the 1/(H*W) factor, so ifft2(fft2(x)) == x. Spectral filter
values learned downstream depend on this convention.

Complex intermediates carry gradients as dL/dRe(z) + i*dL/dIm(z). Complex
leaves never require grad; gradients reach the real tensors that produced them.
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised when the recorded graph cannot be differentiated."""


_active_tape: Optional['Tape'] = None

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense real or complex array that can participate in a recorded graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        array = np.asarray(data)
        if np.iscomplexobj(array):
            array = array.astype(np.complex128)
            if requires_grad:
                raise GraphError("complex tensors cannot require grad directly")
        else:
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    @property
    def dtype(self) -> str:
        return 'complex128' if self.is_complex else 'real64'

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> 'Tensor':
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ('output', 'parents', 'backward_fn')

    def __init__(self, output: Tensor, parents: Tuple[Tensor, ...], backward_fn: BackwardFn):
        self.output = output
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """
    Ordered record of differentiable operations.

    A tape is built for one forward pass and replayed by exactly one backward
    pass. Use it as a context manager; nesting restores the outer tape on exit.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self._consumed = False
        self._outer: Optional[Tape] = None

    def __enter__(self) -> 'Tape':
        global _active_tape
        self._outer = _active_tape
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = self._outer
        self._outer = None

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, output: Tensor, parents: Tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        if self._consumed:
            raise GraphError("tape already replayed; record a new tape for the next step")
        output._tape = self
        self.nodes.append(_Node(output, parents, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """
        Populate grad on every requires_grad leaf reachable from loss.

        Args:
            loss: Real scalar produced on this tape

        Raises:
            GraphError: If loss is not a real scalar, was not recorded on this
                tape, or this tape was already replayed
        """
        if self._consumed:
            raise GraphError("backward already ran on this tape")
        if loss.ndim != 0 or loss.is_complex:
            raise GraphError(f"loss must be a real scalar, got shape {loss.shape} ({loss.dtype})")
        if loss._tape is not self:
            raise GraphError("loss is detached from this tape")

        grads = {id(loss): np.ones((), dtype=np.float64)}
        leaves = {}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node.output), None)
            if grad is None:
                continue
            parent_grads = node.backward_fn(grad)
            for parent, parent_grad in zip(node.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent._tape is None:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

        for key, leaf in leaves.items():
            grad = grads[key]
            leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad

        self._consumed = True
        logger.debug(f"Backward replayed {len(self.nodes)} nodes, {len(leaves)} leaves")


def backward(loss: Tensor) -> None:
    """Run backward on the tape that recorded loss."""
    if loss._tape is None:
        raise GraphError("loss was not produced on a tape")
    loss._tape.backward(loss)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    if _active_tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _active_tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _fit(grad: np.ndarray, parent: Tensor) -> np.ndarray:
    grad = _unbroadcast(grad, parent.shape)
    if not parent.is_complex and np.iscomplexobj(grad):
        grad = grad.real
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, 'add')
    return _make(a.data + b.data, (a, b), lambda g: (_fit(g, a), _fit(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, 'sub')
    return _make(a.data - b.data, (a, b), lambda g: (_fit(g, a), _fit(-g, b)))


def mul(a, b) -> Tensor:
    """Elementwise product; also the complex multiply used by spectral filters."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, 'mul')

    def backward_fn(g):
        return _fit(g * np.conj(b.data), a), _fit(g * np.conj(a.data), b)

    return _make(a.data * b.data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, 'div')
    out = a.data / b.data

    def backward_fn(g):
        return _fit(g / np.conj(b.data), a), _fit(-g * np.conj(out / b.data), b)

    return _make(out, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    return _make(a.data * factor, (a,), lambda g: (_fit(g * np.conj(factor), a),))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def abs_(a: Tensor) -> Tensor:
    """Absolute value of a real tensor (subgradient 0 at 0)."""
    if a.is_complex:
        return complex_abs(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient flows only where a > floor."""
    return _make(np.maximum(a.data, floor), (a,), lambda g: (g * (a.data > floor),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _make(out, (a,), backward_fn)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed stably."""
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g / (1.0 + np.exp(-a.data)),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward_fn)


def threshold_mask(a: Union[Tensor, np.ndarray], tau: float) -> Tensor:
    """Constant 0/1 mask of a > tau. Never part of the graph."""
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    return Tensor((data > tau).astype(np.float64))


# Shape manipulation

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swap_last(a: Tensor) -> Tensor:
    """Transpose the last two axes."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    def backward_fn(g):
        full = np.zeros(a.shape, dtype=np.result_type(a.data, g))
        np.add.at(full, index, g)
        return (_fit(full, a),)

    return _make(np.ascontiguousarray(a.data[index]), (a,), backward_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward_fn)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Repeat each of the last two axes `factor` times."""
    if factor == 1:
        return a
    out = a.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    h, w = a.shape[-2:]

    def backward_fn(g):
        g = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        return (g.sum(axis=(-3, -1)),)

    return _make(out, (a,), backward_fn)


# Reductions

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make(np.asarray(out), (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1)

    def backward_fn(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _make(np.asarray(out), (a,), backward_fn)


def rowwise_l2_norm(w: Tensor) -> Tensor:
    """
    L2 norm of every row (last axis) of w.

    Zero rows give norm 0 and a zero gradient; callers guard any division.
    """
    if w.size == 0:
        raise DimensionError("rowwise_l2_norm: empty input")
    norm = np.sqrt((w.data * w.data).sum(axis=-1))

    def backward_fn(g):
        safe = np.where(norm > 0.0, norm, 1.0)
        return (np.where(norm[..., None] > 0.0, g[..., None] * w.data / safe[..., None], 0.0),)

    return _make(norm, (w,), backward_fn)


# Linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes, batched over leading axes.

    Args:
        a: Tensor of shape (..., M, K)
        b: Tensor of shape (..., K, N) or (K, N)

    Returns:
        Tensor of shape (..., M, N)

    Raises:
        DimensionError: If either operand has fewer than 2 axes or K differs
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(np.conj(b.data), -1, -2))
        gb = np.matmul(np.swapaxes(np.conj(a.data), -1, -2), g)
        return _fit(ga, a), _fit(gb, b)

    return _make(np.matmul(a.data, b.data), (a, b), backward_fn)


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """
    Stride-1 2D cross-correlation.

    Args:
        x: Input of shape (N, C_in, H, W)
        w: Kernel of shape (C_out, C_in, kh, kw)
        padding: Zero padding on each spatial side

    Returns:
        Tensor of shape (N, C_out, H + 2p - kh + 1, W + 2p - kw + 1)
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    kh, kw = w.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum('nchwij,ocij->nohw', cols, w.data, optimize=True)
    out_h, out_w = out.shape[2:]

    def backward_fn(g):
        gw = np.einsum('nohw,nchwij->ocij', g, cols, optimize=True)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + out_h, j:j + out_w] += np.einsum('nohw,oc->nchw', g, w.data[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]]
        return gx, gw

    return _make(out, (x, w), backward_fn)


# Spectral ops

def fft2(x: Tensor) -> Tensor:
    """Unnormalized 2D DFT over the last two axes."""
    h, w = x.shape[-2:]

    def backward_fn(g):
        return (_fit(np.fft.ifft2(g) * (h * w), x),)

    return _make(np.fft.fft2(x.data), (x,), backward_fn)


def ifft2(f: Tensor) -> Tensor:
    """Inverse 2D DFT over the last two axes, 1/(H*W) normalized."""
    h, w = f.shape[-2:]

    def backward_fn(g):
        return (_fit(np.fft.fft2(g) / (h * w), f),)

    return _make(np.fft.ifft2(f.data), (f,), backward_fn)


def real(z: Tensor) -> Tensor:
    """Real part; the explicit, differentiable exit from the complex domain."""
    if not z.is_complex:
        return z
    return _make(z.data.real.copy(), (z,), lambda g: (g.astype(np.complex128),))


def complex_abs(z: Tensor) -> Tensor:
    magnitude = np.abs(z.data)

    def backward_fn(g):
        safe = np.where(magnitude > 0.0, magnitude, 1.0)
        return (np.where(magnitude > 0.0, g * z.data / safe, 0.0),)

    return _make(magnitude, (z,), backward_fn)
