"""Shared value types: grids, sparse observations, mixture weights and configs.

Array layout conventions used throughout the package:

* grids are ``(H, W, C)`` float64 arrays (depth in millimetres when ``C == 1``);
* raw affinities are ``(H, W, k_max**2 - 1)``, neighbours in row-major order
  over the ``k_max x k_max`` window with the centre removed;
* kernel-size logits are ``(H, W, K)`` and iteration logits ``(H, W, K, T)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .exceptions import ConfigurationError, ContractError, DimensionError

__all__ = [
    "PropagationConfig",
    "DepthGrid",
    "SparseObservations",
    "AffinityField",
    "AssemblyWeights",
    "ObjectiveConfig",
    "make_grid",
    "as_grid_array",
    "real_array",
    "sigmoid_normalize",
    "normalized_alpha",
    "normalized_lambda",
]


@dataclass(frozen=True)
class PropagationConfig:
    """Candidate kernel sizes and iteration checkpoints.

    Defaults are kernels ``(3, 5, 7)`` and checkpoints ``(3, 6, 9, 12)``.
    """

    kernel_sizes: Tuple[int, ...] = (3, 5, 7)
    iteration_checkpoints: Tuple[int, ...] = (3, 6, 9, 12)
    channels: int = 1

    def __post_init__(self):
        ks = tuple(int(k) for k in self.kernel_sizes)
        ts = tuple(int(t) for t in self.iteration_checkpoints)
        object.__setattr__(self, "kernel_sizes", ks)
        object.__setattr__(self, "iteration_checkpoints", ts)
        if not ks:
            raise ConfigurationError("kernel_sizes must not be empty")
        if not ts:
            raise ConfigurationError("iteration_checkpoints must not be empty")
        for k in ks:
            if k < 3 or k % 2 == 0:
                raise ConfigurationError(f"kernel size {k} must be odd and >= 3")
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ConfigurationError(f"kernel_sizes {ks} must be strictly increasing")
        if ts[0] < 1 or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigurationError(
                f"iteration_checkpoints {ts} must be positive and strictly increasing")
        if self.channels < 1:
            raise ConfigurationError("channels must be >= 1")

    @property
    def n_steps(self) -> int:
        return self.iteration_checkpoints[-1]

    @property
    def k_max(self) -> int:
        return self.kernel_sizes[-1]

    @property
    def n_kernels(self) -> int:
        return len(self.kernel_sizes)

    @property
    def n_checkpoints(self) -> int:
        return len(self.iteration_checkpoints)

    @property
    def n_neighbors(self) -> int:
        return self.k_max * self.k_max - 1

    def kernel_index(self, k: int) -> int:
        try:
            return self.kernel_sizes.index(int(k))
        except ValueError:
            raise ConfigurationError(
                f"kernel size {k} not in {self.kernel_sizes}") from None

    def checkpoint_index(self, t: int) -> int:
        try:
            return self.iteration_checkpoints.index(int(t))
        except ValueError:
            raise ConfigurationError(
                f"iteration count {t} not in {self.iteration_checkpoints}") from None


def _check_shape(height, width, channels):
    for name, v in (("height", height), ("width", width), ("channels", channels)):
        if int(v) != v or v < 1:
            raise DimensionError(f"{name} must be a positive integer, got {v!r}")


class DepthGrid:
    """Immutable ``H x W x C`` array of finite values.

    Supports ``np.asarray(grid)`` and cell access via ``grid[y, x, c]``.
    Use :meth:`with_cell` to get a modified copy.
    """

    __slots__ = ("_values",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise DimensionError(f"grid must be 2-D or 3-D, got shape {arr.shape}")
        _check_shape(*arr.shape)
        if not np.all(np.isfinite(arr)):
            raise ContractError("grid values must be finite")
        arr.setflags(write=False)
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def shape(self):
        return self._values.shape

    @property
    def height(self) -> int:
        return self._values.shape[0]

    @property
    def width(self) -> int:
        return self._values.shape[1]

    @property
    def channels(self) -> int:
        return self._values.shape[2]

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._values
        return self._values.astype(dtype)

    def __getitem__(self, idx):
        return self._values[idx]

    def with_cell(self, y: int, x: int, c: int, value: float) -> "DepthGrid":
        arr = self._values.copy()
        arr[y, x, c] = value
        return DepthGrid(arr)

    def __eq__(self, other):
        if not isinstance(other, DepthGrid):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._values, other._values))

    def __repr__(self):
        return f"DepthGrid(shape={self.shape})"


def make_grid(height: int, width: int, channels: int = 1, fill: float = 0.0) -> DepthGrid:
    """Return a grid of the given shape filled with ``fill``.

    Raises
    ------
    DimensionError
        If any dimension is not a positive integer.
    """
    _check_shape(height, width, channels)
    if not np.isfinite(fill):
        raise ContractError("fill must be finite")
    return DepthGrid(np.full((height, width, channels), float(fill)))


def real_array(values) -> np.ndarray:
    """``np.asarray`` as float64, except that extended precision is kept.

    The finite-difference oracle evaluates the forward path in
    ``np.longdouble``; everything else runs in float64.
    """
    arr = np.asarray(values)
    if arr.dtype == np.longdouble:
        return arr
    return arr.astype(np.float64, copy=False)


def as_grid_array(values) -> np.ndarray:
    """Coerce a 2-D or 3-D array (or DepthGrid) to a real ``(H, W, C)`` array."""
    arr = real_array(values)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DimensionError(f"expected a 2-D or 3-D grid, got shape {arr.shape}")
    return arr


@dataclass
class SparseObservations:
    """Sparse depth samples with validity mask and confidence logits.

    ``values`` is ignored wherever ``mask`` is false.
    """

    values: np.ndarray
    mask: np.ndarray
    confidence_logits: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = real_array(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise DimensionError(
                f"values {self.values.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if self.confidence_logits is None:
            self.confidence_logits = np.zeros(self.values.shape)
        else:
            self.confidence_logits = real_array(self.confidence_logits)
            if self.confidence_logits.shape != self.values.shape:
                raise DimensionError("confidence_logits must match values shape")
        # masked-out values may be garbage; make them harmless
        self.values = np.where(self.mask, self.values, 0.0)

    @property
    def shape(self):
        return self.values.shape

    @property
    def confidence(self) -> np.ndarray:
        """Effective blend factor ``mask * sigmoid(logit)``; zero where invalid."""
        return np.where(self.mask, expit(self.confidence_logits), 0.0)

    def with_confidence_logits(self, logits) -> "SparseObservations":
        return SparseObservations(self.values, self.mask, real_array(np.array(logits)))


class AffinityField:
    """Raw affinity logits over the non-centre cells of a ``k_max`` window."""

    __slots__ = ("raw", "k_max")

    def __init__(self, raw, k_max: Optional[int] = None):
        raw = real_array(raw)
        if raw.ndim != 3:
            raise DimensionError(f"raw affinity must be (H, W, M), got {raw.shape}")
        inferred = int(round(np.sqrt(raw.shape[2] + 1)))
        if inferred * inferred - 1 != raw.shape[2] or inferred % 2 == 0:
            raise DimensionError(f"{raw.shape[2]} neighbour slots is not k*k-1 for odd k")
        if k_max is not None and k_max != inferred:
            raise ConfigurationError(f"k_max={k_max} does not match {raw.shape[2]} slots")
        if not np.all(np.isfinite(raw)):
            raise ContractError("affinity logits must be finite")
        self.raw = raw
        self.k_max = inferred

    @property
    def shape(self):
        return self.raw.shape

    @property
    def valid(self) -> np.ndarray:
        """Boolean ``(H, W, M)`` flag; false where the neighbour is outside the image."""
        from .affinity import valid_neighbors

        return valid_neighbors(self.raw.shape[0], self.raw.shape[1], self.k_max)

    def __array__(self, dtype=None, copy=None):
        return self.raw if dtype is None else self.raw.astype(dtype)


def sigmoid_normalize(logits, axis: int = -1) -> np.ndarray:
    """``sigmoid(logits) / sum(sigmoid(logits))`` along ``axis``."""
    s = expit(real_array(logits))
    return s / s.sum(axis=axis, keepdims=True)


@dataclass
class AssemblyWeights:
    """Per-pixel logits for kernel-size and iteration-checkpoint mixtures."""

    alpha_logits: np.ndarray
    lambda_logits: np.ndarray

    def __post_init__(self):
        self.alpha_logits = real_array(self.alpha_logits)
        self.lambda_logits = real_array(self.lambda_logits)
        a, l = self.alpha_logits, self.lambda_logits
        if a.ndim != 3 or l.ndim != 4 or a.shape != l.shape[:3]:
            raise DimensionError(
                f"alpha_logits {a.shape} must be (H,W,K), lambda_logits {l.shape} (H,W,K,T)")

    @classmethod
    def uniform(cls, height: int, width: int, config: PropagationConfig) -> "AssemblyWeights":
        K, T = config.n_kernels, config.n_checkpoints
        return cls(np.zeros((height, width, K)), np.zeros((height, width, K, T)))

    @property
    def shape(self):
        return self.alpha_logits.shape[:2]

    def check(self, config: PropagationConfig) -> None:
        K, T = config.n_kernels, config.n_checkpoints
        if self.alpha_logits.shape[2] != K or self.lambda_logits.shape[3] != T:
            raise ConfigurationError(
                f"weights have K={self.alpha_logits.shape[2]}, T={self.lambda_logits.shape[3]}; "
                f"config expects K={K}, T={T}")

    def alpha(self) -> np.ndarray:
        return sigmoid_normalize(self.alpha_logits, axis=-1)

    def lam(self) -> np.ndarray:
        return sigmoid_normalize(self.lambda_logits, axis=-1)


def normalized_alpha(weights: AssemblyWeights, x: Sequence[int]) -> np.ndarray:
    """Kernel-size mixture at pixel ``x = (row, col)``."""
    y, c = x
    return sigmoid_normalize(weights.alpha_logits[y, c])


def normalized_lambda(weights: AssemblyWeights, x: Sequence[int], k: int) -> np.ndarray:
    """Iteration-checkpoint mixture at pixel ``x`` for kernel index ``k``."""
    y, c = x
    return sigmoid_normalize(weights.lambda_logits[y, c, k])


@dataclass(frozen=True)
class ObjectiveConfig:
    """Weights of the fitting objective.

    ``budget_latency`` and ``budget_memory`` are normalised budgets in (0, 1];
    ``None`` disables the corresponding hinge. ``depth_scale`` converts grid
    units to the units of the squared-error term (mm -> cm by default).
    """

    eta1: float = 0.0005
    eta2: float = 0.1
    eta2_prime: float = 1.0
    eta3: float = 1.0
    budget_latency: Optional[float] = None
    budget_memory: Optional[float] = None
    depth_scale: float = 1e-2

    def __post_init__(self):
        for name in ("eta1", "eta2", "eta2_prime", "eta3"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        for name in ("budget_latency", "budget_memory"):
            v = getattr(self, name)
            if v is not None and not (0.0 < v <= 1.0):
                raise ConfigurationError(f"{name} must lie in (0, 1], got {v}")
        if self.depth_scale <= 0:
            raise ConfigurationError("depth_scale must be positive")
