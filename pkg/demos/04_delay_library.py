# # Time-delay and derivative columns
#
# Library columns are not limited to pointwise functions of the state.
# Delayed copies (a fraction of a period back) and smoothed derivatives are
# also available.  Rows without a full history are dropped, and the design
# reports how many.

# %%
import numpy as np

from bsindy import dynamics as dyn
from bsindy import library as lib
from bsindy.sindy import stls

# %%
sys_ = dyn.pendulum()
t = np.arange(0.0, 10.0, 0.01)
traj = dyn.integrate(sys_, [0.5, 0.0], t)
period = 2 * np.pi * np.sqrt(sys_.params["L"] / sys_.params["g"])
print(f"small-angle period {period:.3f}")

terms = [
    lib.monomial(1, 0),
    lib.monomial(0, 1),
    lib.BasisTerm("sine", var=0),
    lib.BasisTerm("delay", var=0, fraction=0.25),
    lib.BasisTerm("delay", var=0, fraction=0.5),
    lib.BasisTerm("derivative", var=0, window=5),
]
dm = lib.build_design(traj.X, terms, t=t, period=period)
print(dm.labels)
print("rows dropped at the start:", dm.row_offset, "of", len(t))

# %% [markdown]
# Regress the angular acceleration.  For this linear oscillator the angle half
# a period back is the negated current angle, so that delay column is almost
# collinear with x1.  Least squares splits the weight between them; the
# threshold settles on a single column.

# %%
z = dyn.analytic_derivative(sys_, traj).z[dm.row_offset:, 1]
res = stls(dm.D, z, lam=0.05)
for lab, c in zip(dm.labels, res.xi):
    print(f"{lab:16s} {c:9.4f}")
