# # Pendulum with a Laplace-like prior
#
# The identity activation turns the neuronized prior into a continuous
# shrinkage prior.  Here it is fitted to the linearised pendulum with all
# monomials up to degree two, then the posterior is pushed forward through
# the integrator to get a predictive band.

# %%
import numpy as np

from bsindy import dynamics as dyn
from bsindy import library as lib
from bsindy.diagnostics import posterior_predictive, summarize
from bsindy.mcmc import ChainConfig, run_chain
from bsindy.neuronized import Activation, PriorConfig, select_tau_w
from bsindy.sindy import least_squares

# %%
sys_ = dyn.pendulum()
t = np.linspace(0.0, 4.0, 50)
traj = dyn.integrate(sys_, [1.0, 0.0], t)
noise = 0.1
Z = dyn.add_gaussian_noise(dyn.analytic_derivative(sys_, traj).z, noise, seed=3)

terms = lib.polynomial_terms(2, 2)
dm = lib.build_design(traj.X, terms)
print(dm.labels)

# %% [markdown]
# The noise variance is known here, so it is held fixed.

# %%
act = Activation("identity")
chains = []
for k in range(2):
    z = Z[:, k]
    tau = select_tau_w(least_squares(dm.D, z), act=act)
    cfg = ChainConfig(
        prior=PriorConfig(act, tau_w=tau), iterations=10000, sigma2=noise**2,
        learn_sigma2=False, alpha_update="metropolis", seed=20 + k,
    )
    chain = run_chain(dm.D, z, cfg, labels=dm.labels)
    chains.append(chain)
    rep = summarize(chain)
    print(f"eq{k + 1}", "  ".join(f"{lab}={m:.3f}" for lab, m in zip(rep.labels, rep.mean)))
    print("   Geweke", np.round(rep.geweke, 2))

# %% [markdown]
# ## Predictive band
# Each draw picks a coefficient vector from the pooled chains and integrates
# it from the initial state.  The true trajectory should sit inside the band
# most of the time.

# %%
ens = posterior_predictive(chains, terms, traj.X[0], t, n_draws=50, seed=4)
inside = (traj.X >= ens.lower) & (traj.X <= ens.upper)
print("fraction of truth inside the 90% band:", inside.mean(axis=0).round(3))
print("mean band width:", (ens.upper - ens.lower).mean(axis=0).round(4))
