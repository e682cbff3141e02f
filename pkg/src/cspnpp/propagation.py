"""Vanilla spatial propagation: one linear step, hard replacement, N-step loop."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .affinity import NormalizedKernel, normalize, valid_neighbors
from .cost import OpCounter
from .exceptions import ContractError, DimensionError
from .grid import SparseObservations, as_grid_array

__all__ = [
    "PropagationState",
    "cspn_step",
    "replace",
    "run_cspn",
    "shifted",
]


def shifted(padded: np.ndarray, r: int, dy: int, dx: int, h: int, w: int) -> np.ndarray:
    """View of ``padded`` (zero border ``r``) holding the value at ``x + (dy, dx)``."""
    return padded[r + dy:r + dy + h, r + dx:r + dx + w]


def _check_kernel(h_t: np.ndarray, kernel: NormalizedKernel) -> None:
    if kernel.center.shape != h_t.shape[:2]:
        raise DimensionError(f"kernel {kernel.center.shape} does not match grid {h_t.shape[:2]}")


def cspn_step(h_t, h0, kernel: NormalizedKernel, counter: Optional[OpCounter] = None) -> np.ndarray:
    """One propagation step.

    ``out[x] = center[x] * h0[x] + sum_n w_n[x] * h_t[x + offset_n]``, reading
    ``h_t`` as a snapshot (Jacobi update). Affinities are shared across
    channels. The result has the dimensionality of ``h_t``.
    """
    ref = h_t
    h_t = as_grid_array(h_t)
    h0 = as_grid_array(h0)
    if h_t.shape != h0.shape:
        raise DimensionError(f"h_t {h_t.shape} and h0 {h0.shape} differ")
    _check_kernel(h_t, kernel)
    h, w, c = h_t.shape
    r = kernel.size // 2
    pad = np.pad(h_t, ((r, r), (r, r), (0, 0)))
    out = kernel.center[..., None] * h0
    for n, (dy, dx) in enumerate(kernel.offsets):
        out += kernel.weights[:, :, n, None] * shifted(pad, r, dy, dx, h, w)
    if counter is not None:
        n_valid = int(valid_neighbors(h, w, kernel.size).sum())
        counter.add(c * (n_valid + h * w), kernel.size ** 2 * c * h * w + 3 * h * w * c)
        counter.steps += 1
    return _like(out, ref)


def replace(grid, obs: Optional[SparseObservations]) -> np.ndarray:
    """Hard replacement: observed depths overwrite the grid where the mask is set.

    For ``C > 1`` the observed value is broadcast across channels.
    """
    grid = as_grid_array(grid)
    if obs is None:
        return grid.copy()
    if obs.shape != grid.shape[:2]:
        raise DimensionError(f"observations {obs.shape} do not match grid {grid.shape[:2]}")
    m = obs.mask[..., None].astype(np.float64)
    return (1.0 - m) * grid + m * obs.values[..., None]


@dataclass
class PropagationState:
    """Anchor ``h0`` and the current iterate ``h_current`` after ``step_index`` steps."""

    h0: np.ndarray
    h_current: np.ndarray
    step_index: int = 0

    def __post_init__(self):
        self.h0 = as_grid_array(self.h0)
        if self.h0.flags.writeable:
            self.h0 = self.h0.copy()
            self.h0.setflags(write=False)
        self.h_current = as_grid_array(self.h_current)
        if self.h0.shape != self.h_current.shape:
            raise DimensionError("h0 and h_current must have the same shape")

    @classmethod
    def start(cls, h0) -> "PropagationState":
        h0 = as_grid_array(h0)
        return cls(h0, h0.copy(), 0)

    def advance(self, kernel: NormalizedKernel, obs: Optional[SparseObservations] = None,
                counter: Optional[OpCounter] = None) -> "PropagationState":
        nxt = cspn_step(self.h_current, self.h0, kernel, counter)
        if obs is not None:
            nxt = replace(nxt, obs)
        return PropagationState(self.h0, nxt, self.step_index + 1)


def _like(out: np.ndarray, reference) -> np.ndarray:
    return out[:, :, 0] if np.ndim(reference) == 2 else out


def run_cspn(h0, raw, obs: Optional[SparseObservations], k: int, n_steps: int,
             counter: Optional[OpCounter] = None) -> np.ndarray:
    """Run ``n_steps`` propagation steps with kernel size ``k``.

    Each step is followed by hard replacement when ``obs`` is given. The
    result has the same dimensionality as ``h0``.

    Raises
    ------
    ContractError
        If ``n_steps`` is negative.
    """
    if n_steps < 0:
        raise ContractError(f"n_steps must be >= 0, got {n_steps}")
    h0_arr = as_grid_array(h0)
    kernel = normalize(raw, k)
    state = PropagationState.start(h0_arr)
    for _ in range(n_steps):
        state = state.advance(kernel, obs, counter)
    return _like(state.h_current.copy(), h0)
