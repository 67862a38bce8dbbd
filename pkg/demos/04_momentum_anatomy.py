"""Anatomy of the history-weighted prompt momentum.

Each decoupling round produces a fresh per-domain aggregate. Instead of
installing it directly, the server blends the whole history of past
aggregates, weighted by a Beta density evaluated on an evenly spaced grid
inside (0, 1). Shape a=b=2 humps in the middle: early and recent history
count less than the middle of the run.
"""

import numpy as np

from feddcg import BetaSchedule, beta_alphas, beta_momentum_average

# weights over a growing history, a = b = 2
schedule = BetaSchedule(a=2.0, b=2.0)
for s in (0, 1, 4, 9):
    alphas = beta_alphas(schedule, s)
    shown = "  ".join(f"{a:.3f}" for a in alphas)
    print(f"history of {s + 1}: weights {shown}")

print()

# skewed shapes tilt the emphasis: b > a favors older entries, a > b newer
for a, b in ((2.0, 2.0), (1.0, 3.0), (3.0, 1.0)):
    alphas = beta_alphas(BetaSchedule(a=a, b=b), 4)
    shown = "  ".join(f"{w:.3f}" for w in alphas)
    print(f"a={a} b={b}: {shown}")

print()

# follow one scalar prompt coordinate through ten rounds of drifting
# aggregates, default blend vs the normalized convex variant
rng = np.random.default_rng(3)
target = 1.0
history = [np.array([0.0])]
history_norm = [np.array([0.0])]
print("round  aggregate  blended  blended(normalized)")
for r in range(10):
    v_new = np.array([target + rng.normal(0, 0.15)])
    alphas = beta_alphas(schedule, len(history) - 1)
    blended = beta_momentum_average(history, alphas, v_new)
    blended_norm = beta_momentum_average(history_norm, alphas, v_new, normalized=True)
    history.append(v_new.copy())
    history_norm.append(v_new.copy())
    print(f"{r:5d}  {v_new[0]:9.3f}  {blended[0]:7.3f}  {blended_norm[0]:19.3f}")

# the default form adds the newest term outside the normalizer, so its
# output can overshoot the inputs; the normalized form is a convex
# combination and stays inside their hull
