"""
Checking the bounds against simulation
======================================

The simulator produces exact piecewise-linear paths.  We estimate the tail
of the feedback model along the diagonal, then test two identities that
hold for every model: the stationary balance relation and the exponential
martingale.
"""
import numpy as np

from mmfn.geometry import decay_report, fixed_point_iteration
from mmfn.reference import feedback
from mmfn.simulator import (default_levels, estimate_tails, martingale_check, relaxation_time,
                            simulate)

model = feedback()

# a single path: conservation and complementarity are tracked at every event
path = simulate(model, 2000.0, seed=1)
print(f"{len(path)} segments, {path.stats.violations} invariant violations, "
      f"empty fractions {path.time_empty_fraction().round(3)}")

grid = fixed_point_iteration(model)
c = np.array([1.0, 1.0]) / np.sqrt(2)
report = decay_report(model, c, grid)

# tail levels are chosen so the deepest one is still observed often enough
reps, horizon = 100, 2.0e4
tau = relaxation_time(model)
burn = min(20 * tau, 0.5 * horizon)
levels = default_levels(report.upper_end, reps, horizon, burn, tau)
theta = 0.3 * report.lower_end * c
(est,), (bar,), stats = estimate_tails(model, [c], [levels], reps, horizon, burn, seed=2,
                                       bar_thetas=[theta])
print(f"bracket [{report.lower_end:.4f}, {report.upper_end:.4f}], "
      f"simulated {est.decay_rate:.4f} +- {est.slope_stderr:.4f}")

# gamma psi + sum_k gamma_k psi_k should vanish inside D^(max)
print(f"balance residual at {theta.round(3)}: {bar.normalized:.2e} +- {bar.normalized_stderr:.2e}")

# E^theta(t) has mean one, also under the twisted measure
for twisted in (False, True):
    mart = martingale_check(model, theta, 10.0, 4000, seed=3, twisted=twisted)
    print(f"martingale{' (twisted)' if twisted else ''}: {mart.mean:.4f} +- {mart.stderr:.4f}")
