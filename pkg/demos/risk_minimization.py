"""Selecting a nonparametric bridge by cross-fold risk.

The empirical cross-fold risk pairs one fold's outcomes with the other
folds' bridge values, so unit-level noise shared by S and Y cancels. Over a
finite class of tabular bridges, the selected bridge's population risk
approaches the best in class as the number of cells grows.
"""
import itertools

import numpy as np

from surrojive import (TabularBridge, build_finite_dgp, minimize_risk_finite_class,
                       population_risk, solve_bridge)

dgp = build_finite_dgp(seed=7)
h_star = solve_bridge(dgp).h
keys = h_star.support
# h* plus every combination of offsets {-0.5, 0, 0.5} on the support points
offsets = itertools.product((-0.5, 0.0, 0.5), repeat=len(keys))
candidates = [h_star] + [TabularBridge({k: h_star.table[k] + o for k, o in zip(keys, off)})
                         for off in offsets if any(off)]
risks = np.array([population_risk(h, dgp) for h in candidates])
print(f"population risk of h*: {risks[0]:.4f}, best among candidates: {risks.min():.4f}")

for K in (50, 200, 800, 3200):
    excess = []
    for r in range(30):
        ds, _ = dgp.sample(K, 10, 2, np.random.default_rng([K, r]))
        idx, _ = minimize_risk_finite_class(ds, candidates)
        excess.append(risks[idx] - risks.min())
    print(f"K={K:>5}: median excess risk {np.median(excess):.5f}")

# The runner-up candidates shift h* along a direction the training arms
# barely move, so their population risk is only about 2e-4 above h*.
# Telling them apart takes far more cells than the excess risk needs.
