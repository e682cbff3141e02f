"""
Per-pixel kernel and iteration budgets
======================================

Every pixel picks one (kernel size, iteration count) pair. The normalised
latency of a pair is k^2 t / (k_max^2 N). A budget caps that number per pixel;
pixels above it move to the affordable pair with the most iterations.
"""

import numpy as np

from cspnpp import OpCounter, PropagationConfig, SelectionMap
from cspnpp.cost import per_pixel_selected_cost, selected_cost
from cspnpp.propagation import run_cspn
from cspnpp.resource import budget_round, pareto_frontier, run_ra_cspn_scheduled

config = PropagationConfig()  # kernels 3, 5, 7 and checkpoints 3, 6, 9, 12

# the affordable pairs at 100/588 of the full cost
for k, t, cost in pareto_frontier(config, 100 / 588):
    print(f"k={k} t={t:2d} cost={cost:.4f}")
one = budget_round(SelectionMap.uniform(1, 1, 7, 12), config, 100 / 588)
print("(7, 12) becomes", (int(one.k_star[0, 0]), int(one.t_star[0, 0])))

# a random selection map squeezed to a few budgets
rng = np.random.default_rng(0)
sel = SelectionMap(rng.choice(config.kernel_sizes, (48, 48)),
                   rng.choice(config.iteration_checkpoints, (48, 48)))
raw = rng.normal(size=(48, 48, config.n_neighbors))
h0 = rng.uniform(2000, 8000, (48, 48))

full = OpCounter()
run_cspn(h0, raw, None, config.k_max, config.n_steps, full)
print(f"\n{'budget':>8s}{'max cost':>10s}{'mean cost':>11s}{'measured ratio':>16s}")
for budget in (1.0, 0.35, 0.1, 27 / 588):
    capped = budget_round(sel, config, budget)
    counter = OpCounter()
    run_ra_cspn_scheduled(h0, raw, None, capped, config, counter)
    print(f"{budget:8.4f}{per_pixel_selected_cost(capped, config).max():10.4f}"
          f"{selected_cost(capped, config):11.4f}{counter.mult_adds / full.mult_adds:16.4f}")
