"""
Decay-rate bounds for a two-station tandem
==========================================

Station 1 receives bursty input and feeds station 2.  We check stability,
look at the cumulant gamma, run the domain fixed point and print the
bracket for the tail decay rate in a few directions.
"""
import numpy as np

from mmfn.geometry import auto_box, decay_report, fixed_point_iteration, two_d_exact
from mmfn.reference import tandem
from mmfn.spectral import perron
from mmfn.traffic import is_stable

model = tandem()

# the network is stable when R^-1 v_bar is negative in every coordinate
rep = is_stable(model)
print("drift R^-1 v_bar:", rep.drift, "stable:", rep.stable)

# gamma vanishes at the origin and its gradient there is the mean net input
sp = perron(model, np.zeros(2))
print("gamma(0) =", sp.gamma, " grad gamma(0) =", sp.grad)

# the domain fixed point on an automatically sized lattice
box = auto_box(model)
grid = fixed_point_iteration(model, box)
print(f"lattice {box.steps.tolist()} cells, {grid.iterations} sweeps, "
      f"D^(max) holds {int(grid.Dmax.sum())} points")

# in two dimensions the exact corner of the domain is available directly
print("exact corner:", two_d_exact(model).alpha)
print("grid sup along each axis:", [round(grid.sup_along(k), 4) for k in range(2)])

for c in ([1, 0], [0, 1], [1, 1]):
    r = decay_report(model, c, grid)
    print(f"direction {c}: decay rate in [{r.lower_end:.4f}, {r.upper_end:.4f}]"
          f"{'' if r.in_corn else ' (outside Corn, upper end not exact)'}")
