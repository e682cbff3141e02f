"""Affinity normalisation, boundary handling and kernel cropping.

One raw field of logits at ``k_max`` resolution serves every kernel branch:
a smaller kernel reads the central sub-window and renormalises it. Neighbours
outside the image are dropped from the normalisation sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .exceptions import ConfigurationError, ContractError, DimensionError
from .grid import PropagationConfig, real_array

__all__ = [
    "NormalizedKernel",
    "neighbor_offsets",
    "subwindow_index",
    "valid_neighbors",
    "kernel_size_of",
    "normalize",
    "effective_kernel",
]


@lru_cache(maxsize=None)
def _offsets(k: int) -> np.ndarray:
    r = k // 2
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]
    arr = np.array(offs, dtype=np.intp).reshape(-1, 2)
    arr.setflags(write=False)
    return arr


def neighbor_offsets(k: int) -> np.ndarray:
    """``(k*k - 1, 2)`` array of ``(dy, dx)`` in row-major order, centre excluded."""
    if k < 1 or k % 2 == 0:
        raise ConfigurationError(f"kernel size {k} must be odd")
    return _offsets(int(k))


@lru_cache(maxsize=None)
def _subwindow(k: int, k_max: int) -> np.ndarray:
    r = k // 2
    offs = _offsets(k_max)
    idx = np.flatnonzero((np.abs(offs[:, 0]) <= r) & (np.abs(offs[:, 1]) <= r))
    idx.setflags(write=False)
    return idx


def subwindow_index(k: int, k_max: int) -> np.ndarray:
    """Slots of the ``k_max`` layout that belong to the central ``k x k`` window.

    The returned slots are ordered like ``neighbor_offsets(k)``.
    """
    if k > k_max or k % 2 == 0 or k < 1:
        raise ConfigurationError(f"kernel size {k} is not an odd size <= {k_max}")
    return _subwindow(int(k), int(k_max))


def valid_neighbors(height: int, width: int, k: int) -> np.ndarray:
    """Boolean ``(H, W, k*k - 1)``: true where ``x + offset`` lies inside the image."""
    offs = neighbor_offsets(k)
    ys = np.arange(height)[:, None, None] + offs[None, None, :, 0]
    xs = np.arange(width)[None, :, None] + offs[None, None, :, 1]
    return (ys >= 0) & (ys < height) & (xs >= 0) & (xs < width)


def kernel_size_of(raw) -> int:
    m = np.shape(raw)[-1]
    k = int(round(np.sqrt(m + 1)))
    if k * k - 1 != m or k % 2 == 0:
        raise DimensionError(f"{m} neighbour slots is not k*k-1 for an odd k")
    return k


@dataclass
class NormalizedKernel:
    """Per-pixel propagation weights for one kernel size.

    Attributes
    ----------
    size : int
        Kernel size ``k``.
    weights : ndarray, shape (H, W, k*k - 1)
        Neighbour weights, ordered like ``neighbor_offsets(size)``. Exactly
        zero for neighbours outside the image.
    center : ndarray, shape (H, W)
        Weight applied to the anchor grid, ``1 - weights.sum(-1)``.
    """

    size: int
    weights: np.ndarray
    center: np.ndarray

    @property
    def offsets(self) -> np.ndarray:
        return neighbor_offsets(self.size)

    @property
    def shape(self):
        return self.center.shape

    def embed(self, k_max: int) -> "NormalizedKernel":
        """Same kernel expressed in the ``k_max`` layout (zeros outside)."""
        if k_max == self.size:
            return self
        h, w = self.center.shape
        out = np.zeros((h, w, k_max * k_max - 1), dtype=self.weights.dtype)
        out[:, :, subwindow_index(self.size, k_max)] = self.weights
        return NormalizedKernel(k_max, out, self.center)


def _cropped(raw: np.ndarray, k: int):
    k_max = kernel_size_of(raw)
    h, w = raw.shape[:2]
    sub = raw[:, :, subwindow_index(k, k_max)] * valid_neighbors(h, w, k)
    return sub


def normalize(raw, k: int, config: Optional[PropagationConfig] = None) -> NormalizedKernel:
    """Normalise raw logits into a ``k x k`` propagation kernel.

    Each valid neighbour weight is ``raw / sum(|raw|)`` over the in-image
    neighbours of the central ``k x k`` sub-window, and the centre weight is
    one minus the neighbour sum. A pixel whose valid logits are all zero gets
    the identity kernel (centre 1, neighbours 0).

    Raises
    ------
    ConfigurationError
        If ``k`` is not one of ``config.kernel_sizes`` (when given) or exceeds
        the field's window.
    """
    raw = real_array(raw)
    if raw.ndim != 3:
        raise DimensionError(f"raw affinity must be (H, W, M), got {raw.shape}")
    if config is not None:
        config.kernel_index(k)
        if kernel_size_of(raw) != config.k_max:
            raise ConfigurationError(
                f"affinity window {kernel_size_of(raw)} does not match k_max={config.k_max}")
    sub = _cropped(raw, k)
    total = np.abs(sub).sum(axis=-1)
    safe = np.where(total > 0, total, 1.0)
    weights = sub / safe[..., None]
    center = 1.0 - weights.sum(axis=-1)
    return NormalizedKernel(int(k), weights, center)


def effective_kernel(raw, alpha, config: PropagationConfig) -> NormalizedKernel:
    """Single ``k_max`` kernel equivalent to an alpha-weighted set of branches.

    ``alpha`` is either one mixture of length ``K`` shared by all pixels or a
    per-pixel ``(H, W, K)`` array. Because one propagation step is linear in
    the kernel, stepping with the result equals mixing the per-branch steps.

    Raises
    ------
    ContractError
        If ``alpha`` is not a positive mixture summing to one.
    """
    raw = real_array(raw)
    alpha = real_array(alpha)
    K = config.n_kernels
    if alpha.shape[-1] != K:
        raise ContractError(f"alpha has {alpha.shape[-1]} entries, config has {K} kernels")
    if np.any(alpha < 0) or not np.allclose(alpha.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
        raise ContractError("alpha must be non-negative and sum to one")
    h, w = raw.shape[:2]
    if alpha.ndim == 1:
        alpha = np.broadcast_to(alpha, (h, w, K))
    k_max = config.k_max
    dtype = np.result_type(raw, alpha)
    weights = np.zeros((h, w, k_max * k_max - 1), dtype=dtype)
    center = np.zeros((h, w), dtype=dtype)
    for i, k in enumerate(config.kernel_sizes):
        kern = normalize(raw, k, config)
        weights[:, :, subwindow_index(k, k_max)] += alpha[:, :, i, None] * kern.weights
        center += alpha[:, :, i] * kern.center
    return NormalizedKernel(k_max, weights, center)
