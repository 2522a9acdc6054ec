"""Direct 3D convolution versus its separable spatial-then-temporal form.

A 3D kernel that is the Kronecker product of a 2D spatial kernel and a 1D
temporal kernel can be applied as a per-frame 2D convolution followed by a
per-pixel 1D convolution along time. This module provides both routes, the
kernel expansion, the parameter-count comparison, a best rank-1 fit for
arbitrary kernels, and a randomized harness that checks the two routes agree.

All routes use cross-correlation and zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import conv1d_tf, conv2d, resolve_padding


@dataclass(frozen=True)
class FactorizedKernel:
    """Spatial kernel ``(n_x, n_y)`` paired with a temporal kernel ``(n_t,)``."""

    spatial: np.ndarray
    temporal: np.ndarray

    def __post_init__(self):
        spatial = np.asarray(self.spatial, dtype=np.float64)
        temporal = np.asarray(self.temporal, dtype=np.float64).reshape(-1)
        if spatial.ndim != 2 or min(spatial.shape) < 1 or temporal.size < 1:
            raise ValueError(f"bad factorized kernel shapes {spatial.shape} / {temporal.shape}")
        object.__setattr__(self, "spatial", spatial)
        object.__setattr__(self, "temporal", temporal)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.spatial.shape + (self.temporal.size,)

    @property
    def n_params(self) -> int:
        return self.spatial.size + self.temporal.size


def _check_volume(volume) -> np.ndarray:
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 1:
        raise ValueError(f"video volume must be (m_x, m_y, m_t) with positive extents, got {v.shape}")
    return v


def conv3d(volume, kernel, padding="same") -> np.ndarray:
    """Single-channel 3D cross-correlation of ``(m_x, m_y, m_t)`` with ``(n_x, n_y, n_t)``.

    With the default ``"same"`` padding the output has the volume's extents.
    """
    v = _check_volume(volume)
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 3 or k.size == 0:
        raise ValueError(f"kernel must be a non-empty (n_x, n_y, n_t) array, got shape {k.shape}")
    pads = resolve_padding(padding, k.shape, v.shape, (1, 1, 1))
    vp = np.pad(v, pads)
    if any(n > m for n, m in zip(k.shape, vp.shape)):
        raise ValueError(f"kernel {k.shape} does not fit padded volume {vp.shape}")
    win = sliding_window_view(vp, k.shape)
    return np.tensordot(win, k, axes=3)


def kron_expand(fk: FactorizedKernel) -> np.ndarray:
    """``K[i, j, l] = spatial[i, j] * temporal[l]``."""
    return fk.spatial[:, :, None] * fk.temporal[None, None, :]


def conv_factorized(volume, fk: FactorizedKernel, padding="same") -> np.ndarray:
    """Per-frame spatial convolution, then per-pixel temporal convolution."""
    v = _check_volume(volume)
    nx, ny, nt = fk.shape
    pads = resolve_padding(padding, (nx, ny, nt), v.shape, (1, 1, 1))
    mx, my, mt = v.shape

    # frames become the batch axis
    frames = np.transpose(v, (2, 0, 1))[..., None]
    spatial = conv2d(frames, fk.spatial[:, :, None, None], padding=(pads[0], pads[1])).data[..., 0]
    # (t, x', y') -> fibers (x', y', t)
    fibers = np.transpose(spatial, (1, 2, 0))[..., None]
    out = conv1d_tf(fibers, fk.temporal[:, None, None], padding=(pads[2], 0)).data
    return out[..., 0, 0]


def param_savings(n_x: int, n_y: int, n_t: int) -> tuple[int, int]:
    """Parameter counts ``(direct, factorized)`` for an ``n_x x n_y x n_t`` kernel."""
    if min(n_x, n_y, n_t) < 1:
        raise ValueError("kernel extents must be >= 1")
    return n_x * n_y * n_t, n_x * n_y + n_t


def best_rank1_fit(kernel, seed: int = 0, tol: float = 1e-14,
                   max_iter: int = 10_000) -> tuple[FactorizedKernel, float]:
    """Closest spatial-times-temporal kernel in Frobenius norm.

    Runs power iteration on the ``(n_x*n_y, n_t)`` unfolding. When the two
    leading singular values coincide the best fit is not unique; the one
    reached from the seeded start vector is returned.

    Returns:
        ``(fit, residual_norm)`` where ``residual_norm = ||kernel - kron_expand(fit)||_F``.
    """
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 3:
        raise ValueError(f"kernel must be (n_x, n_y, n_t), got shape {k.shape}")
    if not np.any(k):
        raise ValueError("best rank-1 fit of a zero kernel is undefined")
    nx, ny, nt = k.shape
    a = k.reshape(nx * ny, nt)

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(nt)
    v /= np.linalg.norm(v)
    sigma = 0.0
    u = np.zeros(nx * ny)
    for _ in range(max_iter):
        u = a @ v
        norm_u = np.linalg.norm(u)
        if norm_u == 0.0:
            # start vector orthogonal to the row space; reseed deterministically
            v = rng.standard_normal(nt)
            v /= np.linalg.norm(v)
            continue
        u /= norm_u
        w = a.T @ u
        sigma = np.linalg.norm(w)
        w /= sigma
        done = np.linalg.norm(w - v) <= tol
        v = w
        if done:
            break

    # fix the sign so the result does not depend on the start vector's sign
    if v[np.argmax(np.abs(v))] < 0:
        u, v = -u, -v
    fit = FactorizedKernel((sigma * u).reshape(nx, ny), v)
    residual = float(np.linalg.norm(k - kron_expand(fit)))
    return fit, residual


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    volume_shape: tuple
    kernel_shape: tuple
    max_abs_error: float
    direct_params: int
    factorized_params: int

    def to_dict(self) -> dict:
        return {
            "trial": self.trial,
            "volume_shape": list(self.volume_shape),
            "kernel_shape": list(self.kernel_shape),
            "max_abs_error": self.max_abs_error,
            "direct_params": self.direct_params,
            "factorized_params": self.factorized_params,
        }


def equivalence_trials(trials: int = 100, max_volume=(16, 16, 8), max_kernel=(5, 5, 5),
                       seed: int = 0, padding="same") -> Iterator[TrialRecord]:
    """Yield one record per random (volume, factorized kernel) trial.

    Each record holds ``max |conv_factorized - conv3d(kron_expand)|`` for a
    volume and kernel with extents drawn uniformly up to the given maxima
    (kernels never exceed the volume).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    for i in range(trials):
        vshape = tuple(int(rng.integers(1, m + 1)) for m in max_volume)
        kshape = tuple(int(rng.integers(1, min(m, n) + 1)) for m, n in zip(max_kernel, vshape))
        volume = rng.standard_normal(vshape)
        fk = FactorizedKernel(rng.standard_normal(kshape[:2]), rng.standard_normal(kshape[2]))
        err = np.max(np.abs(conv_factorized(volume, fk, padding) - conv3d(volume, kron_expand(fk), padding)))
        direct, factorized = param_savings(*kshape)
        yield TrialRecord(i, vshape, kshape, float(err), direct, factorized)


def max_equivalence_error(trials: int = 100, seed: int = 0, **kwargs) -> float:
    return max(r.max_abs_error for r in equivalence_trials(trials, seed=seed, **kwargs))
