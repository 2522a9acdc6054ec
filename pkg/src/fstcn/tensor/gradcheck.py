"""Central finite-difference checks for taped gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .core import Tape, Tensor


def _evaluate(fn: Callable[[], Tensor]) -> float:
    with Tape():
        return fn().item()


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5,
                       indices: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central-difference estimate of d fn() / d tensor.

    ``fn`` is re-evaluated with ``tensor.data`` perturbed in place, each time
    under a throwaway tape so that code requiring one (train-mode forwards)
    still runs. When ``indices`` is given only those entries are estimated;
    the rest stay 0.
    """
    grad = np.zeros_like(tensor.data)
    data = tensor.data
    coords = indices if indices is not None else list(np.ndindex(data.shape))
    for idx in coords:
        orig = data[idx]
        data[idx] = orig + h
        plus = _evaluate(fn)
        data[idx] = orig - h
        minus = _evaluate(fn)
        data[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``, or 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                    max_entries: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> dict:
    """Compare taped gradients of the scalar ``fn()`` with central differences.

    Args:
        fn: zero-argument callable building the loss; it must be deterministic.
        tensors: leaves to check; each must have ``requires_grad=True``.
        h: finite-difference step.
        max_entries: if set, compare only this many randomly chosen entries
            per tensor (the analytic gradient is still computed in full).
        rng: generator used to choose entries.

    Returns:
        Mapping from tensor position (or name when set) to relative error.
    """
    with Tape() as tape:
        loss = fn()
    analytic = tape.gradient(loss, tensors)
    rng = rng or np.random.default_rng(0)
    errors = {}
    for pos, (t, a) in enumerate(zip(tensors, analytic)):
        coords = None
        if max_entries is not None and t.size > max_entries:
            flat = rng.choice(t.size, size=max_entries, replace=False)
            coords = [np.unravel_index(i, t.shape) for i in sorted(flat)]
        n = numerical_gradient(fn, t, h, coords)
        if coords is not None:
            mask = np.zeros(t.shape, dtype=bool)
            for c in coords:
                mask[c] = True
            a, n = a[mask], n[mask]
        errors[t.name or pos] = relative_error(a, n)
    return errors
