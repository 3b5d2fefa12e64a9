"""Neuronized shrinkage priors ``xi_j = T(alpha_j - alpha0) * w_j``.

``alpha_j ~ N(0, 1)`` and ``w_j ~ N(0, tau_w^2)``; the activation ``T`` picks
the prior family:

* ``identity``  Lasso-like prior,
* ``horseshoe`` ``T(x) = exp(a sign(x) x^2 + b x + c)``, an approximate horseshoe,
* ``relu``      discrete spike and slab, exact zeros whenever ``alpha_j <= alpha0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .dynamics import as_generator

DEFAULT_MC_DRAWS = 100_000
DEFAULT_MC_SEED = 20210601

HORSESHOE_PRESETS = {
    "horseshoe-fig1": (0.37, 0.89, 0.08),
    "horseshoe-appendix": (0.5, 0.733, 0.0),
}


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "relu", "horseshoe"):
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "horseshoe" and (self.a < 0 or self.b <= 0):
            raise ValueError("horseshoe activation needs a >= 0 and b > 0 to be increasing")

    @classmethod
    def from_name(cls, name: str) -> "Activation":
        """``identity``/``lasso``, ``relu``, ``horseshoe`` (= ``horseshoe-fig1``) or ``horseshoe-appendix``."""
        key = name.lower()
        if key in ("identity", "lasso"):
            return cls("identity")
        if key == "relu":
            return cls("relu")
        if key == "horseshoe":
            key = "horseshoe-fig1"
        if key in HORSESHOE_PRESETS:
            return cls("horseshoe", *HORSESHOE_PRESETS[key])
        raise ValueError(f"unknown activation name {name!r}")

    @property
    def name(self) -> str:
        if self.kind != "horseshoe":
            return self.kind
        for k, v in HORSESHOE_PRESETS.items():
            if v == (self.a, self.b, self.c):
                return k
        return "horseshoe"

    def __call__(self, x):
        return activation_eval(self, x)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "horseshoe":
            d.update(a=self.a, b=self.b, c=self.c)
        return d

    @classmethod
    def from_dict(cls, d) -> "Activation":
        if isinstance(d, str):
            return cls.from_name(d)
        return cls(**d)


def activation_eval(act: Activation, x):
    x = np.asarray(x, dtype=float)
    if act.kind == "identity":
        return x.copy() if x.ndim else float(x)
    if act.kind == "relu":
        out = np.maximum(x, 0.0)
        return out if out.ndim else float(out)
    out = np.exp(act.a * np.sign(x) * x * x + act.b * x + act.c)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class PriorConfig:
    activation: Activation
    alpha0: float = 0.0
    tau_w: float = 1.0

    def __post_init__(self):
        if not self.tau_w > 0:
            raise ValueError("tau_w must be positive")
        if not np.isfinite(self.alpha0):
            raise ValueError("alpha0 must be finite")

    def scale(self, alpha):
        """``T(alpha - alpha0)``, the per-coefficient multiplier of ``w``."""
        return activation_eval(self.activation, np.asarray(alpha, dtype=float) - self.alpha0)

    def to_dict(self) -> dict:
        return {"activation": self.activation.to_dict(), "alpha0": self.alpha0, "tau_w": self.tau_w}

    @classmethod
    def from_dict(cls, d) -> "PriorConfig":
        return cls(Activation.from_dict(d["activation"]), float(d["alpha0"]), float(d["tau_w"]))


def prior_sample(cfg: PriorConfig, seed=None, count: int = 1) -> np.ndarray:
    """Draw ``count`` independent prior coefficients ``T(alpha - alpha0) * w``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = as_generator(seed)
    alpha = rng.standard_normal(count)
    w = cfg.tau_w * rng.standard_normal(count)
    return cfg.scale(alpha) * w


def expected_t2(act: Activation, alpha0: float = 0.0, mc_draws: int = DEFAULT_MC_DRAWS, seed=DEFAULT_MC_SEED) -> float:
    """Monte Carlo estimate of ``E[T(alpha - alpha0)^2]``, ``alpha ~ N(0, 1)``."""
    rng = as_generator(seed)
    alpha = rng.standard_normal(int(mc_draws))
    return float(np.mean(activation_eval(act, alpha - alpha0) ** 2))


def select_tau_w(xi_ref, p: int | None = None, act: Activation | None = None, alpha0: float = 0.0,
                 mc_draws: int = DEFAULT_MC_DRAWS, seed=DEFAULT_MC_SEED) -> float:
    """Signal-to-noise rule ``tau_w = ||xi_ref|| / sqrt(p * E[T(alpha - alpha0)^2])``.

    ``xi_ref`` is typically the least-squares estimate.  The expectation is
    estimated with ``mc_draws`` standard normal draws under ``seed``.
    """
    xi_ref = np.asarray(xi_ref, dtype=float).reshape(-1)
    p = xi_ref.size if p is None else int(p)
    act = act or Activation("relu")
    if p < 1:
        raise ValueError("p must be >= 1")
    if mc_draws < 10_000:
        raise ValueError("mc_draws must be at least 1e4")
    norm = float(np.linalg.norm(xi_ref))
    if norm == 0.0:
        raise ValueError("reference coefficients are all zero; tau_w would be zero")
    et2 = expected_t2(act, alpha0, mc_draws, seed)
    if not et2 > 0:
        raise ValueError(f"E[T^2] is zero for alpha0={alpha0}; the prior is a point mass")
    return norm / np.sqrt(p * et2)


def alpha0_from_sparsity(eta: float) -> float:
    """Shift giving an expected non-zero fraction ``eta`` under the ReLU prior.

    ``P(xi != 0) = P(alpha > alpha0) = eta``, hence ``alpha0 = Phi^{-1}(1 - eta)``.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    return float(ndtri(1.0 - eta))


def expected_zero_portion(tau_w: float, t_values) -> float:
    """``1 - E[1 / (1 + T^2 tau_w^2)]`` over precomputed activation samples."""
    return float(1.0 - np.mean(1.0 / (1.0 + (t_values * tau_w) ** 2)))


def tau_w_horseshoe_calibration(target_zero_fraction: float, act: Activation | None = None,
                                alpha0: float = 0.0, mc_draws: int = DEFAULT_MC_DRAWS,
                                seed=DEFAULT_MC_SEED, tol: float = 1e-3,
                                bracket=(1e-6, 1e6)) -> float:
    """Find ``tau_w`` with ``1 - E[1/(1 + T(alpha)^2 tau_w^2)]`` equal to the target.

    Bisection in ``log(tau_w)`` over ``bracket``; a single alpha sample is
    reused so the map is monotone in ``tau_w``.

    Raises:
        ValueError: if the target is outside (0, 1) or outside the range the
            bracket can reach.
    """
    if not 0.0 < target_zero_fraction < 1.0:
        raise ValueError("target must lie in (0, 1)")
    act = act or Activation.from_name("horseshoe")
    rng = as_generator(seed)
    tv = activation_eval(act, rng.standard_normal(int(mc_draws)) - alpha0)
    lo, hi = np.log(bracket[0]), np.log(bracket[1])
    f_lo = expected_zero_portion(np.exp(lo), tv) - target_zero_fraction
    f_hi = expected_zero_portion(np.exp(hi), tv) - target_zero_fraction
    if f_lo > tol or f_hi < -tol:
        raise ValueError(f"target {target_zero_fraction} not reachable for tau_w in {bracket}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = expected_zero_portion(np.exp(mid), tv) - target_zero_fraction
        if abs(f_mid) <= tol * 1e-3 or hi - lo < 1e-12:
            break
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
    return float(np.exp(mid))
