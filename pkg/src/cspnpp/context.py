"""Context-aware propagation: soft assembly over kernel sizes and iteration checkpoints.

Every kernel branch runs its own recurrence from the shared anchor. After
each step the branch state goes through confidence-guided replacement, and
at every checkpoint the replaced state is added to the branch accumulator
with its lambda weight. The accumulators are mixed with alpha and the mix
goes through one last guided replacement.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .affinity import NormalizedKernel, normalize
from .cost import OpCounter
from .exceptions import ContractError, DimensionError
from .grid import (AssemblyWeights, PropagationConfig, SparseObservations, as_grid_array,
                   real_array)
from .propagation import _like, cspn_step

__all__ = [
    "BranchState",
    "CARecord",
    "guided_replace",
    "init_branch",
    "ca_accumulate",
    "ca_assemble",
    "ca_forward",
    "run_ca_cspn",
]


def guided_replace(grid, obs: Optional[SparseObservations]) -> np.ndarray:
    """Blend observed depths in with confidence ``g = mask * sigmoid(logit)``."""
    grid = as_grid_array(grid)
    if obs is None:
        return grid.copy()
    if obs.shape != grid.shape[:2]:
        raise DimensionError(f"observations {obs.shape} do not match grid {grid.shape[:2]}")
    g = obs.confidence[..., None]
    return (1.0 - g) * grid + g * obs.values[..., None]


@dataclass
class BranchState:
    """Recurrent state and accumulator of one kernel branch.

    ``states`` and ``pre_replace`` are filled only when recording (needed by
    the backward pass): ``states[t]`` is the branch iterate after step ``t``
    (``states[0]`` is the anchor) and ``pre_replace[t]`` the same iterate
    before guided replacement.
    """

    kernel_index: int
    h0: np.ndarray
    h: np.ndarray
    acc: np.ndarray
    lam_mass: np.ndarray
    step: int = 0
    states: Optional[List[np.ndarray]] = None
    pre_replace: Optional[List[np.ndarray]] = None


def init_branch(h0, kernel_index: int, record: bool = False) -> BranchState:
    h0 = as_grid_array(h0)
    h, w, _ = h0.shape
    return BranchState(
        kernel_index=kernel_index,
        h0=h0,
        h=h0.copy(),
        acc=np.zeros_like(h0),
        lam_mass=np.zeros((h, w), dtype=h0.dtype),
        states=[h0.copy()] if record else None,
        pre_replace=[h0.copy()] if record else None,
    )


def ca_accumulate(branch: BranchState, kernel: NormalizedKernel, weights: AssemblyWeights,
                  checkpoints, obs: Optional[SparseObservations] = None,
                  counter: Optional[OpCounter] = None) -> BranchState:
    """Advance ``branch`` one step, updating it in place.

    If the new step index is a checkpoint, its lambda-weighted state is added
    to the accumulator.

    Raises
    ------
    ContractError
        If the branch already reached the last checkpoint.
    """
    checkpoints = tuple(checkpoints)
    if branch.step >= checkpoints[-1]:
        raise ContractError(f"branch already ran {branch.step} of {checkpoints[-1]} steps")
    pre = cspn_step(branch.h, branch.h0, kernel, counter)
    nxt = guided_replace(pre, obs) if obs is not None else pre
    branch.step += 1
    branch.h = nxt
    if branch.states is not None:
        branch.states.append(nxt)
        branch.pre_replace.append(pre)
    if branch.step in checkpoints:
        ti = checkpoints.index(branch.step)
        lam = weights.lam()[:, :, branch.kernel_index, ti]
        branch.acc = branch.acc + lam[..., None] * nxt
        branch.lam_mass = branch.lam_mass + lam
    return branch


def ca_assemble(branches: List[BranchState], weights: AssemblyWeights, n_steps: int) -> np.ndarray:
    """Alpha-weighted sum of the branch accumulators.

    Raises
    ------
    ContractError
        If a branch has not completed ``n_steps`` steps.
    """
    alpha = weights.alpha()
    out = np.zeros_like(branches[0].acc)
    # fixed summation order keeps the result bitwise independent of list order
    for b in sorted(branches, key=lambda b: b.kernel_index):
        if b.step != n_steps:
            raise ContractError(f"branch {b.kernel_index} stopped at step {b.step} of {n_steps}")
        out += alpha[:, :, b.kernel_index, None] * b.acc
    return out


@dataclass
class CARecord:
    """Everything a forward pass produced; consumed by :func:`gradients.backward`."""

    config: PropagationConfig
    h0: np.ndarray
    raw: np.ndarray
    obs: Optional[SparseObservations]
    weights: AssemblyWeights
    kernels: List[NormalizedKernel]
    branches: List[BranchState]
    assembled: np.ndarray
    output: np.ndarray
    recorded: bool = True


def ca_forward(h0, raw, obs: Optional[SparseObservations], weights: AssemblyWeights,
               config: PropagationConfig, record: bool = True,
               counter: Optional[OpCounter] = None) -> CARecord:
    h0 = as_grid_array(h0)
    raw = real_array(raw)
    weights.check(config)
    if weights.shape != h0.shape[:2] or raw.shape[:2] != h0.shape[:2]:
        raise DimensionError("h0, raw affinity and weights must share H x W")
    kernels = [normalize(raw, k, config) for k in config.kernel_sizes]
    N = config.n_steps
    branches = []
    for i, kern in enumerate(kernels):
        b = init_branch(h0, i, record)
        for _ in range(N):
            ca_accumulate(b, kern, weights, config.iteration_checkpoints, obs, counter)
        branches.append(b)
    assembled = ca_assemble(branches, weights, N)
    output = guided_replace(assembled, obs) if obs is not None else assembled
    return CARecord(config, h0, raw, obs, weights, kernels, branches, assembled, output, record)


def run_ca_cspn(h0, raw, obs: Optional[SparseObservations], weights: AssemblyWeights,
                config: PropagationConfig, counter: Optional[OpCounter] = None) -> np.ndarray:
    """Context-aware propagation; returns the assembled, replaced depth."""
    rec = ca_forward(h0, raw, obs, weights, config, record=False, counter=counter)
    return _like(rec.output, h0)
