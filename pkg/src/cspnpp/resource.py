"""Resource-aware propagation: per-pixel (kernel, iterations) selection.

Each pixel runs its argmax kernel for its argmax number of steps and then
freezes; frozen values stay readable by neighbours that are still running.
Two executors are provided. :func:`run_ra_cspn_naive` walks pixels one by one
and is the reference. :func:`run_ra_cspn_scheduled` groups pixels into one
region per kernel size and runs each region as a gathered matrix product
(regional im2col).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .affinity import neighbor_offsets, normalize, valid_neighbors
from .cost import OpCounter
from .exceptions import ConfigurationError, ContractError, DimensionError
from .grid import AssemblyWeights, PropagationConfig, SparseObservations, as_grid_array
from .propagation import _like

__all__ = [
    "SelectionMap",
    "Region",
    "RegionBatch",
    "select_configuration",
    "run_ra_cspn_naive",
    "build_regions",
    "run_ra_cspn_scheduled",
    "configuration_costs",
    "pareto_frontier",
    "budget_round",
]


@dataclass
class SelectionMap:
    """Per-pixel kernel size ``k_star`` and iteration count ``t_star``."""

    k_star: np.ndarray
    t_star: np.ndarray

    def __post_init__(self):
        self.k_star = np.asarray(self.k_star, dtype=np.int64)
        self.t_star = np.asarray(self.t_star, dtype=np.int64)
        if self.k_star.ndim != 2 or self.k_star.shape != self.t_star.shape:
            raise DimensionError("k_star and t_star must be equal-shaped 2-D arrays")

    @classmethod
    def uniform(cls, height: int, width: int, k: int, t: int) -> "SelectionMap":
        return cls(np.full((height, width), k), np.full((height, width), t))

    @property
    def shape(self):
        return self.k_star.shape

    def validate(self, config: PropagationConfig) -> None:
        if not np.isin(self.k_star, config.kernel_sizes).all():
            raise ConfigurationError(f"k_star values outside {config.kernel_sizes}")
        if not np.isin(self.t_star, config.iteration_checkpoints).all():
            raise ConfigurationError(f"t_star values outside {config.iteration_checkpoints}")

    def copy(self) -> "SelectionMap":
        return SelectionMap(self.k_star.copy(), self.t_star.copy())


def select_configuration(weights: AssemblyWeights, config: PropagationConfig,
                         minimum: Optional[Tuple[int, int]] = (3, 3)) -> SelectionMap:
    """Argmax kernel, then argmax checkpoint of that kernel, at every pixel.

    Ties go to the smaller kernel and the fewer iterations. The argmax is taken
    on the logits, which gives the same result as on the normalised weights
    because the sigmoid is monotone. ``minimum`` floors the selection at
    ``(kernel, iterations)``; it is a no-op for the default configuration.
    """
    weights.check(config)
    ks = np.asarray(config.kernel_sizes)
    ts = np.asarray(config.iteration_checkpoints)
    k_idx = np.argmax(weights.alpha_logits, axis=-1)
    lam_k = np.take_along_axis(weights.lambda_logits, k_idx[..., None, None], axis=2)[:, :, 0, :]
    t_idx = np.argmax(lam_k, axis=-1)
    k_star, t_star = ks[k_idx], ts[t_idx]
    if minimum is not None:
        k_min, t_min = minimum
        k_floor = ks[ks >= k_min].min() if (ks >= k_min).any() else ks.max()
        t_floor = ts[ts >= t_min].min() if (ts >= t_min).any() else ts.max()
        k_star = np.maximum(k_star, k_floor)
        t_star = np.maximum(t_star, t_floor)
    return SelectionMap(k_star, t_star)


def _prepare(h0, raw, obs, selection, config):
    h0 = as_grid_array(h0)
    selection.validate(config)
    if selection.shape != h0.shape[:2] or np.shape(raw)[:2] != h0.shape[:2]:
        raise DimensionError("h0, raw affinity and selection must share H x W")
    if obs is not None and obs.shape != h0.shape[:2]:
        raise DimensionError("observations must match the grid")
    kernels = {k: normalize(raw, k, config) for k in config.kernel_sizes}
    return h0, kernels


def run_ra_cspn_naive(h0, raw, obs: Optional[SparseObservations], selection: SelectionMap,
                      config: PropagationConfig) -> np.ndarray:
    """Reference executor: explicit loops over steps, pixels and neighbours.

    At step ``s`` every pixel with ``t_star >= s`` applies its own kernel to
    the previous iterate, followed by hard replacement; all other pixels keep
    their value.
    """
    h0_arr, kernels = _prepare(h0, raw, obs, selection, config)
    H, W, C = h0_arr.shape
    cur = h0_arr.copy()
    n_steps = int(selection.t_star.max())
    for s in range(1, n_steps + 1):
        nxt = cur.copy()
        for y in range(H):
            for x in range(W):
                if selection.t_star[y, x] < s:
                    continue
                kern = kernels[int(selection.k_star[y, x])]
                val = kern.center[y, x] * h0_arr[y, x, :]
                for n, (dy, dx) in enumerate(kern.offsets):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < H and 0 <= xx < W:
                        val = val + kern.weights[y, x, n] * cur[yy, xx, :]
                if obs is not None and obs.mask[y, x]:
                    val = np.full(C, obs.values[y, x])
                nxt[y, x, :] = val
        cur = nxt
    return _like(cur, h0)


@dataclass
class Region:
    """Pixels that share one kernel size.

    ``full_weights`` is the ``(k*k, |R|)`` weight matrix over the whole window
    with the centre weight in the centre slot; ``n_valid`` counts in-image
    neighbours per member.
    """

    kernel_size: int
    rows: np.ndarray
    cols: np.ndarray
    t_star: np.ndarray
    full_weights: Optional[np.ndarray] = None
    n_valid: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(self.rows.size)

    def active(self, step: int) -> np.ndarray:
        """Boolean mask over members still propagating at ``step``."""
        return self.t_star >= step


@dataclass
class RegionBatch:
    regions: List[Region]
    shape: Tuple[int, int]

    @property
    def n_steps(self) -> int:
        return max((int(r.t_star.max()) for r in self.regions if r.size), default=0)

    def counts(self) -> Dict[int, int]:
        return {r.kernel_size: r.size for r in self.regions}


def build_regions(selection: SelectionMap) -> RegionBatch:
    """Partition pixels by selected kernel size (row-major member order)."""
    regions = []
    for k in np.unique(selection.k_star):
        rows, cols = np.nonzero(selection.k_star == k)
        regions.append(Region(int(k), rows, cols, selection.t_star[rows, cols]))
    return RegionBatch(regions, selection.shape)


def _window_offsets(k: int) -> np.ndarray:
    r = k // 2
    return np.array([(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)], dtype=np.intp)


def _attach_weights(region: Region, kernel, height: int, width: int) -> None:
    k = region.kernel_size
    centre = (k * k) // 2
    nw = kernel.weights[region.rows, region.cols, :]  # (|R|, k*k-1)
    full = np.empty((k * k, region.size))
    full[:centre] = nw[:, :centre].T
    full[centre] = kernel.center[region.rows, region.cols]
    full[centre + 1:] = nw[:, centre:].T
    region.full_weights = full
    region.n_valid = valid_neighbors(height, width, k)[region.rows, region.cols].sum(axis=1)


def run_ra_cspn_scheduled(h0, raw, obs: Optional[SparseObservations], selection: SelectionMap,
                          config: PropagationConfig,
                          counter: Optional[OpCounter] = None) -> np.ndarray:
    """Regional executor; same result as :func:`run_ra_cspn_naive`.

    Per step and region the active members' windows are gathered into a
    ``(k*k, C, |R|)`` matrix (``|f| = k*k*C`` features per column, the centre
    slot holding the anchor value), reduced against the per-pixel weights and
    scattered into the output buffer. Members past their ``t_star`` are
    copied through unchanged.
    """
    h0_arr, kernels = _prepare(h0, raw, obs, selection, config)
    H, W, C = h0_arr.shape
    batch = build_regions(selection)
    for region in batch.regions:
        _attach_weights(region, kernels[region.kernel_size], H, W)
    if counter is not None:
        counter.selection = selection
        counter.config = config
    r_max = config.k_max // 2
    cur = h0_arr.copy()
    for s in range(1, batch.n_steps + 1):
        pad = np.pad(cur, ((r_max, r_max), (r_max, r_max), (0, 0)))
        nxt = cur.copy()
        live = 0
        mult_adds = 0
        for region in batch.regions:
            act = region.active(s)
            n_act = int(act.sum())
            if n_act == 0:
                continue
            ys, xs = region.rows[act], region.cols[act]
            k = region.kernel_size
            offs = _window_offsets(k)
            # im2col: (k*k, |R|, C)
            gathered = pad[r_max + ys[None, :] + offs[:, 0:1], r_max + xs[None, :] + offs[:, 1:2], :]
            gathered[(k * k) // 2] = h0_arr[ys, xs, :]
            vals = np.einsum("fr,frc->rc", region.full_weights[:, act], gathered)
            if obs is not None:
                m = obs.mask[ys, xs]
                vals[m] = obs.values[ys, xs][m][:, None]
            nxt[ys, xs, :] = vals
            live += gathered.size
            mult_adds += C * int((region.n_valid[act] + 1).sum())
        if counter is not None:
            counter.add(mult_adds, live + 3 * H * W * C)
            counter.steps += 1
        cur = nxt
    return _like(cur, h0)


def configuration_costs(config: PropagationConfig) -> List[Tuple[int, int, float]]:
    """All ``(k, t, k^2 t / (N k_max^2))`` triples of the configuration."""
    denom = config.n_steps * config.k_max ** 2
    return [(k, t, k * k * t / denom)
            for k in config.kernel_sizes for t in config.iteration_checkpoints]


def pareto_frontier(config: PropagationConfig, budget: float) -> List[Tuple[int, int, float]]:
    """Feasible configurations not dominated in both kernel size and iterations.

    A configuration is dominated when another feasible one has at least its
    kernel size and iteration count and is larger in one of them.
    """
    feas = [c for c in configuration_costs(config) if c[2] <= budget]
    front = []
    for k, t, c in feas:
        dominated = any(k2 >= k and t2 >= t and (k2, t2) != (k, t) for k2, t2, _ in feas)
        if not dominated:
            front.append((k, t, c))
    return sorted(front, key=lambda x: (x[1], x[0]))


def budget_round(selection: SelectionMap, config: PropagationConfig, budget: float) -> SelectionMap:
    """Reassign pixels whose cost exceeds ``budget`` to a feasible configuration.

    A violating pixel moves to the frontier configuration with the most
    iterations (then the larger kernel). If nothing is feasible it gets the
    cheapest configuration overall.

    Raises
    ------
    ContractError
        If ``budget`` is not positive.
    """
    if not budget > 0:
        raise ContractError(f"latency budget must be positive, got {budget}")
    selection.validate(config)
    denom = config.n_steps * config.k_max ** 2
    front = pareto_frontier(config, budget)
    if front:
        k_new, t_new, _ = max(front, key=lambda x: (x[1], x[0]))
    else:
        k_new, t_new, _ = min(configuration_costs(config), key=lambda x: (x[2], -x[1]))
    cost = selection.k_star.astype(np.float64) ** 2 * selection.t_star / denom
    bad = cost > budget
    out = selection.copy()
    new_cost = k_new * k_new * t_new / denom
    # never raise a pixel's cost, even in the infeasible fallback
    move = bad & (cost > new_cost)
    out.k_star[move] = k_new
    out.t_star[move] = t_new
    return out
