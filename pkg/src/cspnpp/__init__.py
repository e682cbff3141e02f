"""Convolutional spatial propagation for depth completion.

Sparse depth samples are diffused over an image grid with learned per-pixel
affinity kernels. Besides plain propagation the package provides a
context-aware variant that softly mixes kernel sizes and iteration counts,
a resource-aware variant that picks one configuration per pixel and skips
the remaining work, cost models, gradients for fitting, and a synthetic
benchmark harness.
"""

from .affinity import NormalizedKernel, effective_kernel, neighbor_offsets, normalize
from .context import guided_replace, run_ca_cspn
from .cost import (CostReport, OpCounter, count_ops, expected_cost, expected_memory,
                   selected_cost)
from .exceptions import (ConfigurationError, ContractError, CSPNError, DimensionError,
                         DivergenceError, FormatError, RangeError)
from .fitbench import SceneSpec, bench, fit, make_scene, metrics, sample_sparse
from .gradients import CSPNParams, finite_difference_check, objective_and_grad
from .grid import (AffinityField, AssemblyWeights, DepthGrid, ObjectiveConfig,
                   PropagationConfig, SparseObservations, make_grid)
from .propagation import cspn_step, replace, run_cspn
from .resource import (SelectionMap, budget_round, run_ra_cspn_naive, run_ra_cspn_scheduled,
                       select_configuration)

__version__ = "0.1.0"

__all__ = [
    "AffinityField",
    "AssemblyWeights",
    "CSPNError",
    "CSPNParams",
    "ConfigurationError",
    "ContractError",
    "CostReport",
    "DepthGrid",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "NormalizedKernel",
    "ObjectiveConfig",
    "OpCounter",
    "PropagationConfig",
    "RangeError",
    "SceneSpec",
    "SelectionMap",
    "SparseObservations",
    "bench",
    "budget_round",
    "count_ops",
    "cspn_step",
    "effective_kernel",
    "expected_cost",
    "expected_memory",
    "finite_difference_check",
    "fit",
    "guided_replace",
    "make_grid",
    "make_scene",
    "metrics",
    "neighbor_offsets",
    "normalize",
    "objective_and_grad",
    "replace",
    "run_ca_cspn",
    "run_cspn",
    "run_ra_cspn_naive",
    "run_ra_cspn_scheduled",
    "sample_sparse",
    "select_configuration",
    "selected_cost",
]
