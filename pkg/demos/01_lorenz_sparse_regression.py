# # Recovering the Lorenz equations
#
# Simulate a noisy Lorenz trajectory, regress each derivative on six
# candidate terms, and compare thresholded least squares with the
# spike-and-slab (ReLU) posterior.

# %%
import numpy as np

from bsindy import dynamics as dyn
from bsindy import library as lib
from bsindy.diagnostics import summarize
from bsindy.mcmc import ChainConfig, run_chain
from bsindy.neuronized import Activation, PriorConfig, select_tau_w
from bsindy.sindy import least_squares, stls

# %% [markdown]
# ## Data
# 1000 samples at dt = 0.1.  Derivatives are the exact right-hand side plus
# unit-variance noise, which keeps the regression problem honest.

# %%
sys_ = dyn.lorenz()
t = np.arange(0.0, 100.0, 0.1)
traj = dyn.integrate(sys_, [-8.0, 8.0, 27.0], t)
dd = dyn.analytic_derivative(sys_, traj)
Z = dyn.add_gaussian_noise(dd.z, 1.0, seed=1)
print("states", traj.X.shape, "derivatives", Z.shape)

# %%
terms = lib.lorenz_library()
dm = lib.build_design(traj.X, terms)
print(dm.labels)

# %% [markdown]
# ## Thresholded least squares

# %%
for k in range(3):
    res = stls(dm.D, Z[:, k], lam=0.1)
    print(f"eq{k + 1}", np.round(res.xi, 3), "passes", res.iterations)

# %% [markdown]
# ## Spike-and-slab posterior
# The slab scale comes from the least-squares fit; the spike threshold
# alpha0 = 0.5 gives each coefficient a prior zero probability of about 0.69.
# A short chain is enough for a demo.

# %%
act = Activation("relu")
for k in range(3):
    z = Z[:, k]
    tau = select_tau_w(least_squares(dm.D, z), act=act, alpha0=0.5)
    cfg = ChainConfig(prior=PriorConfig(act, alpha0=0.5, tau_w=tau), iterations=3000, seed=10 + k)
    rep = summarize(run_chain(dm.D, z, cfg, labels=dm.labels))
    print(f"eq{k + 1}  tau_w={tau:.2f}")
    for lab, m, lo, hi, inc in zip(rep.labels, rep.mean, rep.lower, rep.upper, rep.inclusion):
        print(f"   {lab:6s} {m:9.4f}  [{lo:8.4f}, {hi:8.4f}]  P(incl)={inc:.2f}")
