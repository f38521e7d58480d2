"""
Finite-difference gradient checking for the tensor engine.
"""

from typing import Callable, Dict, Mapping, Optional

import numpy as np

from tensor import Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error, 0 when both gradients vanish."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def numerical_gradient(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    eps: float = 1e-5,
    coords: Optional[np.ndarray] = None
) -> np.ndarray:
    """
    Central-difference gradient of a scalar function w.r.t. one tensor.

    Args:
        fn: Zero-argument function recomputing the scalar loss from current data
        tensor: Tensor whose entries are perturbed in place
        eps: Finite-difference step
        coords: Flat indices to perturb (all entries when None)

    Returns:
        Array shaped like tensor; entries outside coords are 0
    """
    grad = np.zeros(tensor.size)
    flat = tensor.data.reshape(-1)
    indices = range(tensor.size) if coords is None else coords
    for i in indices:
        original = flat[i]
        flat[i] = original + eps
        plus = fn().item()
        flat[i] = original - eps
        minus = fn().item()
        flat[i] = original
        grad[i] = (plus - minus) / (2.0 * eps)
    return grad.reshape(tensor.shape)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None
) -> Dict[str, float]:
    """
    Compare analytic and central-difference gradients for named parameters.

    When max_coords is set, large tensors are checked at a random subset of
    entries and the analytic gradient is compared on the same subset.

    Returns:
        Relative error per parameter name
    """
    for param in params.values():
        param.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)

    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, param in params.items():
        analytic = np.zeros(param.shape) if param.grad is None else param.grad
        coords = None
        if max_coords is not None and param.size > max_coords:
            coords = rng.choice(param.size, size=max_coords, replace=False)
        numeric = numerical_gradient(fn, param, eps=eps, coords=coords)
        if coords is not None:
            errors[name] = relative_error(analytic.reshape(-1)[coords], numeric.reshape(-1)[coords])
        else:
            errors[name] = relative_error(analytic, numeric)
    return errors
