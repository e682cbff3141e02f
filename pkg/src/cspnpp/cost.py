"""Expected and measured computational cost.

All latency quantities are normalised multiply-add counts: a pixel that runs
``t`` steps with a ``k x k`` kernel costs ``t * k**2`` against a baseline of
``N * k_max**2``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .exceptions import ContractError
from .grid import AssemblyWeights, PropagationConfig

__all__ = [
    "OpCounter",
    "CostReport",
    "expected_cost",
    "expected_cost_per_pixel",
    "selected_cost",
    "per_pixel_selected_cost",
    "expected_memory",
    "soft_memory",
    "expected_kernel",
    "expected_iterations",
    "count_ops",
]


@dataclass
class OpCounter:
    """Instrumentation sink passed to the propagation routines.

    ``mult_adds`` counts one per weight applied per channel (the centre
    weight included); ``peak_elements`` is the largest number of float
    elements live at once in gathered matrices plus the grid buffers.
    """

    enabled: bool = True
    mult_adds: int = 0
    peak_elements: int = 0
    steps: int = 0
    selection: Optional[object] = None
    config: Optional[PropagationConfig] = None

    def add(self, mult_adds: int, live_elements: int = 0) -> None:
        if not self.enabled:
            return
        self.mult_adds += int(mult_adds)
        self.peak_elements = max(self.peak_elements, int(live_elements))

    def merge(self, other: "OpCounter") -> "OpCounter":
        return OpCounter(
            enabled=self.enabled,
            mult_adds=self.mult_adds + other.mult_adds,
            peak_elements=max(self.peak_elements, other.peak_elements),
            steps=max(self.steps, other.steps),
            selection=self.selection or other.selection,
            config=self.config or other.config,
        )


@dataclass
class CostReport:
    expected_latency: float = float("nan")
    expected_memory: float = float("nan")
    mean_kernel: float = float("nan")
    mean_iters: float = float("nan")
    actual_mult_adds: int = 0
    actual_peak_elements: int = 0
    wall_time_s: float = float("nan")

    COLUMNS = (
        "expected_latency", "expected_memory", "mean_kernel", "mean_iters",
        "actual_mult_adds", "actual_peak_elements", "wall_time_s",
    )

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in self.COLUMNS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerow(self.as_row())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CostReport":
        row = next(csv.DictReader(io.StringIO(text)))
        kw = {}
        for f in fields(cls):
            if f.name in row:
                kw[f.name] = int(row[f.name]) if f.type == "int" else float(row[f.name])
        return cls(**kw)


def _cost_table(config: PropagationConfig) -> np.ndarray:
    ks = np.array(config.kernel_sizes, dtype=np.float64)
    ts = np.array(config.iteration_checkpoints, dtype=np.float64)
    return (ks[:, None] ** 2) * ts[None, :] / (config.n_steps * config.k_max ** 2)


def expected_cost_per_pixel(weights: AssemblyWeights, config: PropagationConfig) -> np.ndarray:
    """``sum_{k,t} lambda(k,t) alpha(k) t k^2 / (N k_max^2)`` at each pixel."""
    weights.check(config)
    alpha = weights.alpha()
    lam = weights.lam()
    return np.einsum("hwk,hwkt,kt->hw", alpha, lam, _cost_table(config))


def expected_cost(weights: AssemblyWeights, config: PropagationConfig) -> float:
    """Mean expected latency over all pixels, in (0, 1]."""
    return float(expected_cost_per_pixel(weights, config).mean())


def per_pixel_selected_cost(selection, config: PropagationConfig) -> np.ndarray:
    k = np.asarray(selection.k_star, dtype=np.float64)
    t = np.asarray(selection.t_star, dtype=np.float64)
    return k * k * t / (config.n_steps * config.k_max ** 2)


def selected_cost(selection, config: PropagationConfig) -> float:
    """Mean of ``k*^2 t* / (N k_max^2)`` over pixels."""
    return float(per_pixel_selected_cost(selection, config).mean())


def expected_memory(weights_or_selection, config: PropagationConfig) -> float:
    """Mean ``(k*)^2 / k_max^2`` with ``k*`` the per-pixel argmax kernel.

    Accepts either assembly weights (the argmax is taken here) or a
    selection map.
    """
    if isinstance(weights_or_selection, AssemblyWeights):
        weights_or_selection.check(config)
        idx = np.argmax(weights_or_selection.alpha_logits, axis=-1)
        k = np.asarray(config.kernel_sizes, dtype=np.float64)[idx]
    else:
        k = np.asarray(weights_or_selection.k_star, dtype=np.float64)
    return float((k * k).mean() / config.k_max ** 2)


def soft_memory(weights: AssemblyWeights, config: PropagationConfig) -> float:
    """Differentiable stand-in for :func:`expected_memory`: ``mean sum_k alpha(k) k^2 / k_max^2``."""
    ks = np.asarray(config.kernel_sizes, dtype=np.float64)
    return float(np.einsum("hwk,k->hw", weights.alpha(), ks ** 2).mean() / config.k_max ** 2)


def expected_kernel(weights: AssemblyWeights, config: PropagationConfig) -> float:
    """Mixture-mean kernel size normalised by ``k_max``."""
    ks = np.asarray(config.kernel_sizes, dtype=np.float64)
    return float(np.einsum("hwk,k->hw", weights.alpha(), ks).mean() / config.k_max)


def expected_iterations(weights: AssemblyWeights, config: PropagationConfig) -> float:
    """Mixture-mean iteration count normalised by ``N``."""
    ts = np.asarray(config.iteration_checkpoints, dtype=np.float64)
    per_k = np.einsum("hwkt,t->hwk", weights.lam(), ts)
    return float((weights.alpha() * per_k).sum(-1).mean() / config.n_steps)


def count_ops(trace: Optional[OpCounter], config: Optional[PropagationConfig] = None) -> CostReport:
    """Summarise an instrumented run.

    When the trace carries a selection map the report also fills the
    selected latency, memory, E(k) and E(t).

    Raises
    ------
    ContractError
        If no trace was recorded or counting was disabled.
    """
    if trace is None or not trace.enabled:
        raise ContractError("operation counting was not enabled for this run")
    report = CostReport(actual_mult_adds=trace.mult_adds,
                        actual_peak_elements=trace.peak_elements)
    config = config or trace.config
    sel = trace.selection
    if sel is not None and config is not None:
        report.expected_latency = selected_cost(sel, config)
        report.expected_memory = expected_memory(sel, config)
        report.mean_kernel = float(np.mean(sel.k_star) / config.k_max)
        report.mean_iters = float(np.mean(sel.t_star) / config.n_steps)
    return report
