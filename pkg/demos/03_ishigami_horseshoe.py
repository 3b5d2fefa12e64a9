# # Ishigami regression with a horseshoe-like prior
#
# A static regression problem: y = sin x1 + 7 sin^2 x2 + 0.1 x3^4 sin x1 plus
# noise, with nine candidate columns.  The horseshoe activation has no exact
# zeros, so inclusion is judged against a small magnitude threshold.

# %%
import numpy as np

from bsindy import library as lib
from bsindy.diagnostics import summarize
from bsindy.mcmc import ChainConfig, run_chain
from bsindy.neuronized import Activation, PriorConfig, tau_w_horseshoe_calibration

# %%
X, y = lib.ishigami_regression(500, seed=5)
terms = lib.ishigami_library()
dm = lib.build_design(X, terms)
print(dm.labels)

# %% [markdown]
# Pick the slab scale so that about 20% of prior draws fall below the
# inclusion threshold.

# %%
act = Activation.from_name("horseshoe")
tau = tau_w_horseshoe_calibration(0.2, act=act)
print(f"tau_w = {tau:.4f}")

# %%
cfg = ChainConfig(prior=PriorConfig(act, tau_w=tau), iterations=4000, seed=6, alpha_update="metropolis")
rep = summarize(run_chain(dm.D, y, cfg, labels=dm.labels))
for lab, m, inc in zip(rep.labels, rep.mean, rep.inclusion):
    print(f"{lab:14s} {m:8.4f}  P(incl)={inc:.3f}")
