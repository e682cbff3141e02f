"""
Checking the hand-written gradients
===================================

The backward pass through every propagation step, the replacement blend and
the mixture normalisations is written by hand. Central differences on a small
problem, evaluated in extended precision, keep it honest.
"""

from cspnpp.gradients import gradcheck_instance

for seed in range(3):
    inst = gradcheck_instance(seed)
    details = {}
    worst = inst.check(epsilon=1e-5, samples=30, details=details)
    per_family = "  ".join(f"{k} {v:.1e}" for k, v in details.items())
    print(f"seed {seed}: worst {worst:.2e}  ({per_family})")
