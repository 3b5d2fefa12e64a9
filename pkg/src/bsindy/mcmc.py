"""Posterior sampling for the neuronized-prior linear model ``z = D xi + eta``.

One iteration updates, in order,

1. ``w | alpha``   exact Gaussian draw (the model is linear in ``w``),
2. ``alpha | w``   coordinate-wise random-walk Metropolis, or for the ReLU
   activation an exact draw from a two-piece truncated-normal mixture,
   followed by a ridge move that shifts ``alpha_j`` and rescales ``w_j`` so
   that ``xi_j`` is unchanged (see :func:`rescale_step`),
3. ``sigma^2``     inverse-gamma conjugate draw, if it is being learned.

Only the simplified likelihood ``exp(-||D xi - z||^2 / (2 sigma^2))`` is
used; observation noise on the state itself is not modelled.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.special import expit, log_ndtr, ndtr, ndtri

from .dynamics import as_generator
from .neuronized import Activation, PriorConfig

log = logging.getLogger(__name__)

CHAIN_FORMAT_VERSION = 1
ALPHA_UPDATES = ("metropolis", "relu-exact")


class ChainError(RuntimeError):
    """Numerical failure inside a chain; ``iteration`` says where."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class ChainConfig:
    prior: PriorConfig
    iterations: int = 10_000
    burn_in: float = 0.2
    rw_step: float = 0.5
    sigma2: float = 1.0
    learn_sigma2: bool = False
    a0: float = 1.0
    b0: float = 1.0
    sigma_init: float = 1.0
    seed: Optional[int] = None
    alpha_update: str = "metropolis"
    rescale: bool = True

    def __post_init__(self):
        if self.iterations < 10:
            raise ValueError("iterations must be >= 10")
        if not 0.0 <= self.burn_in < 1.0:
            raise ValueError("burn_in must lie in [0, 1)")
        if not self.rw_step > 0:
            raise ValueError("rw_step must be positive")
        if self.alpha_update not in ALPHA_UPDATES:
            raise ValueError(f"alpha_update must be one of {ALPHA_UPDATES}")
        if self.alpha_update == "relu-exact" and self.prior.activation.kind != "relu":
            raise ValueError("relu-exact alpha update requires the relu activation")
        if self.learn_sigma2:
            if not (self.a0 > 0 and self.b0 > 0 and self.sigma_init > 0):
                raise ValueError("a0, b0 and sigma_init must be positive when learning sigma^2")
        elif not self.sigma2 > 0:
            raise ValueError("fixed sigma2 must be positive")

    @property
    def burn_in_index(self) -> int:
        return int(self.burn_in * self.iterations)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prior"] = self.prior.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "ChainConfig":
        d = dict(d)
        d["prior"] = PriorConfig.from_dict(d["prior"])
        return cls(**d)


@dataclass
class Chain:
    """Raw sampler output; nothing is discarded, ``burn_in`` marks the cut."""

    alpha: np.ndarray
    w: np.ndarray
    sigma2: np.ndarray
    prior: PriorConfig
    burn_in: int
    accepted: np.ndarray
    attempted: np.ndarray
    seed: Optional[int] = None
    config: dict = field(default_factory=dict)
    labels: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def xi(self) -> np.ndarray:
        return self.prior.scale(self.alpha) * self.w

    @property
    def n_iter(self) -> int:
        return self.alpha.shape[0]

    @property
    def p(self) -> int:
        return self.alpha.shape[1]

    def post(self, arr=None) -> np.ndarray:
        """Samples after burn-in (``xi`` by default)."""
        arr = self.xi if arr is None else arr
        return arr[self.burn_in:]

    @property
    def acceptance_rate(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.attempted > 0, self.accepted / np.maximum(self.attempted, 1), np.nan)


# ---------------------------------------------------------------------------
# w | alpha


def _precision(DtD, scale, sigma2, tau_w):
    Q = DtD * np.outer(scale, scale)
    Q[np.diag_indices_from(Q)] += sigma2 / tau_w ** 2
    return Q


def _cholesky(Q):
    try:
        return np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(Q) / Q.shape[0]
        return np.linalg.cholesky(Q + jitter * np.eye(Q.shape[0]))


def w_conditional_moments(D, z, alpha, prior: PriorConfig, sigma2: float):
    """Mean and covariance of ``w | alpha, z``.

    With ``A = D diag(T(alpha - alpha0))``::

        Sigma = sigma2 * (A^T A + sigma2 / tau_w^2 I)^{-1}
        mu    = Sigma A^T z / sigma2
    """
    D = np.asarray(D, dtype=float)
    scale = np.atleast_1d(prior.scale(alpha))
    Q = _precision(D.T @ D, scale, sigma2, prior.tau_w)
    L = _cholesky(Q)
    Qinv = scipy.linalg.cho_solve((L, True), np.eye(len(scale)))
    Sigma = sigma2 * 0.5 * (Qinv + Qinv.T)
    mu = scipy.linalg.cho_solve((L, True), scale * (D.T @ np.asarray(z, dtype=float)))
    return mu, Sigma


def _draw_w(DtD, Dtz, scale, sigma2, tau_w, rng):
    Q = _precision(DtD, scale, sigma2, tau_w)
    L = _cholesky(Q)
    mu = scipy.linalg.cho_solve((L, True), scale * Dtz)
    eps = rng.standard_normal(len(scale))
    # L^T v = eps gives v ~ N(0, Q^{-1})
    v = scipy.linalg.solve_triangular(L, eps, lower=True, trans="T")
    return mu + math.sqrt(sigma2) * v


def sample_w_conditional(D, z, alpha, prior: PriorConfig, sigma2: float, seed=None) -> np.ndarray:
    """One exact draw of ``w`` from its Gaussian full conditional."""
    D = np.asarray(D, dtype=float)
    z = np.asarray(z, dtype=float)
    scale = np.atleast_1d(prior.scale(alpha))
    return _draw_w(D.T @ D, D.T @ z, scale, sigma2, prior.tau_w, as_generator(seed))


# ---------------------------------------------------------------------------
# likelihood and alpha | w


def log_likelihood(D, z, alpha, w, prior: PriorConfig, sigma2: float) -> float:
    """``-||D xi - z||^2 / (2 sigma2)`` with ``xi = T(alpha - alpha0) w``; constants dropped."""
    xi = prior.scale(alpha) * np.asarray(w, dtype=float)
    r = np.asarray(D, dtype=float) @ xi - np.asarray(z, dtype=float)
    return -float(r @ r) / (2.0 * sigma2)


def _coords(coords, p):
    return range(p) if coords is None else coords


def _mh_sweep(DT, colsq, r, alpha, w, prior, sigma2, step, rng, coords=None):
    """Random-walk Metropolis on each alpha_j in turn; updates ``r = z - D xi`` in place."""
    act, a0 = prior.activation, prior.alpha0
    idx = list(_coords(coords, len(alpha)))
    jumps = step * rng.standard_normal(len(idx))
    logu = np.log(rng.random(len(idx)))
    acc = np.zeros(len(alpha), dtype=bool)
    for k, j in enumerate(idx):
        a_old = alpha[j]
        a_new = a_old + jumps[k]
        delta = (act(a_new - a0) - act(a_old - a0)) * w[j]
        if delta != 0.0:
            dssr = -2.0 * delta * (DT[j] @ r) + delta * delta * colsq[j]
            log_ratio = -dssr / (2.0 * sigma2)
        else:
            log_ratio = 0.0
        log_ratio += 0.5 * (a_old * a_old - a_new * a_new)
        if logu[k] < log_ratio:
            alpha[j] = a_new
            if delta != 0.0:
                r -= delta * DT[j]
            acc[j] = True
    return acc


def mh_alpha_step(D, z, alpha, w, prior: PriorConfig, sigma2: float, rw_step: float = 0.5,
                  seed=None, coords=None):
    """One Metropolis sweep over ``alpha`` targeting ``p(alpha | w, z)``.

    Each coordinate proposes ``alpha_j + rw_step * N(0, 1)`` and accepts with
    probability ``min(1, exp(delta log-likelihood + delta log N(alpha_j; 0, 1)))``.

    Returns:
        ``(alpha_new, accepted)`` with a boolean flag per coordinate.
    """
    if not rw_step > 0:
        raise ValueError("rw_step must be positive")
    D = np.asarray(D, dtype=float)
    alpha = np.array(alpha, dtype=float)
    w = np.asarray(w, dtype=float)
    r = np.asarray(z, dtype=float) - D @ (prior.scale(alpha) * w)
    DT = np.ascontiguousarray(D.T)
    acc = _mh_sweep(DT, np.einsum("ij,ij->i", DT, DT), r, alpha, w, prior, sigma2, rw_step,
                    as_generator(seed), coords)
    return alpha, acc


_TAIL_SWITCH = 30.0


def _normal_tail(a: float, rng) -> float:
    """Standard normal conditioned on ``Z >= a``."""
    if a < _TAIL_SWITCH:
        u = 1.0 - rng.random()  # (0, 1]
        return float(-ndtri(u * ndtr(-a)))
    # exponential proposal, Robert (1995)
    lam = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        zz = a + rng.exponential(1.0 / lam)
        if rng.random() <= math.exp(-0.5 * (zz - lam) ** 2):
            return zz


def relu_conditional(dr: float, colsq: float, w_j: float, alpha0: float, sigma2: float):
    """Two-branch full conditional of ``alpha_j`` under the ReLU activation.

    ``dr = D_j . r_j`` where ``r_j`` is the residual with term j removed.  On
    ``alpha_j > alpha0`` the coefficient ``(alpha_j - alpha0) w_j`` is affine in
    ``alpha_j``, so with ``s = alpha_j - alpha0`` the log density is
    ``-(1 + a) s^2 / 2 + (b - alpha0) s + const`` where
    ``a = w_j^2 ||D_j||^2 / sigma2`` and ``b = w_j dr / sigma2``.

    Returns:
        ``(prob_slab, mean, precision)``: the probability of the
        ``alpha_j > alpha0`` branch and the Gaussian parameters of ``s`` there.
    """
    a = w_j * w_j * colsq / sigma2
    b = w_j * dr / sigma2
    prec = 1.0 + a
    mean = (b - alpha0) / prec
    log_ratio = (0.5 * prec * mean * mean - 0.5 * alpha0 * alpha0 - 0.5 * math.log(prec)
                 + log_ndtr(mean * math.sqrt(prec)) - log_ndtr(alpha0))
    return float(expit(log_ratio)), mean, prec


def _relu_sweep(DT, colsq, r, alpha, w, prior, sigma2, rng, coords=None):
    a0 = prior.alpha0
    for j in _coords(coords, len(alpha)):
        xi_old = max(alpha[j] - a0, 0.0) * w[j]
        dr = DT[j] @ r + colsq[j] * xi_old
        p_slab, mean, prec = relu_conditional(dr, colsq[j], w[j], a0, sigma2)
        if rng.random() < p_slab:
            sd = 1.0 / math.sqrt(prec)
            s = mean + sd * _normal_tail(-mean / sd, rng)
            alpha[j] = a0 + s
            xi_new = s * w[j]
        else:
            alpha[j] = -_normal_tail(-a0, rng)
            xi_new = 0.0
        if xi_new != xi_old:
            r -= (xi_new - xi_old) * DT[j]


def relu_exact_alpha_step(D, z, alpha, w, prior: PriorConfig, sigma2: float, seed=None, coords=None):
    """Exact Gibbs sweep over ``alpha`` for the ReLU activation.

    Below ``alpha0`` the likelihood does not depend on ``alpha_j``, leaving a
    standard normal truncated to ``(-inf, alpha0]``; above it the conditional
    is a Gaussian in ``alpha_j`` truncated to ``(alpha0, inf)``.  The branch is
    chosen by the ratio of the two normalising constants.
    """
    if prior.activation.kind != "relu":
        raise ValueError("relu_exact_alpha_step requires the relu activation")
    D = np.asarray(D, dtype=float)
    alpha = np.array(alpha, dtype=float)
    w = np.asarray(w, dtype=float)
    r = np.asarray(z, dtype=float) - D @ (prior.scale(alpha) * w)
    DT = np.ascontiguousarray(D.T)
    _relu_sweep(DT, np.einsum("ij,ij->i", DT, DT), r, alpha, w, prior, sigma2, as_generator(seed), coords)
    return alpha


def _rescale_sweep(alpha, w, prior, step, rng):
    act, a0, tau2 = prior.activation, prior.alpha0, prior.tau_w ** 2
    p = len(alpha)
    jumps = step * rng.standard_normal(p)
    logu = np.log(rng.random(p))
    acc = np.zeros(p, dtype=bool)
    for j in range(p):
        t_old = act(alpha[j] - a0)
        a_new = alpha[j] + jumps[j]
        t_new = act(a_new - a0)
        if t_old == 0.0 or t_new == 0.0:
            continue
        w_new = w[j] * t_old / t_new
        log_ratio = (0.5 * (alpha[j] ** 2 - a_new ** 2) + 0.5 * (w[j] ** 2 - w_new ** 2) / tau2
                     + math.log(abs(t_old / t_new)))
        if logu[j] < log_ratio:
            alpha[j] = a_new
            w[j] = w_new
            acc[j] = True
    return acc


def rescale_step(alpha, w, prior: PriorConfig, step: float = 0.5, seed=None):
    """Move along the ridge ``T(alpha_j - alpha0) w_j = const``.

    Proposes ``alpha_j' = alpha_j + step * N(0, 1)`` and
    ``w_j' = w_j T(alpha_j - alpha0) / T(alpha_j' - alpha0)``.  The coefficient
    ``xi_j`` and hence the likelihood are unchanged, so the acceptance ratio is
    the prior ratio times the Jacobian ``|T(alpha_j - alpha0) / T(alpha_j' - alpha0)|``.
    Coordinates where either activation value is zero are left alone.

    Without this move the Gibbs pair (w | alpha, alpha | w) only creeps along
    the ridge when the data pin ``xi_j`` tightly, and the prior scale of an
    included coefficient stays wherever it entered the slab.

    Returns:
        ``(alpha_new, w_new, accepted)``.
    """
    alpha = np.array(alpha, dtype=float)
    w = np.array(w, dtype=float)
    acc = _rescale_sweep(alpha, w, prior, step, as_generator(seed))
    return alpha, w, acc


def sample_sigma2(residual_ss: float, m: int, a0: float = 1.0, b0: float = 1.0, seed=None) -> float:
    """Draw from ``Inv-Gamma(a0 + m/2, b0 + residual_ss/2)``."""
    if residual_ss < 0:
        raise ValueError("residual sum of squares must be non-negative")
    if not (a0 > 0 and b0 > 0):
        raise ValueError("a0 and b0 must be positive")
    rng = as_generator(seed)
    return float((b0 + 0.5 * residual_ss) / rng.gamma(a0 + 0.5 * m))


# ---------------------------------------------------------------------------
# driver


def initial_state(D, z, prior: PriorConfig):
    """``alpha = 0`` and ``w`` = least-squares coefficients divided by ``T(-alpha0)``.

    The first iteration redraws ``w`` given ``alpha``, so ``w0`` only matters
    for record keeping.
    """
    from .sindy import least_squares

    p = np.asarray(D).shape[1]
    alpha = np.zeros(p)
    denom = max(float(prior.scale(0.0)), 1e-3)
    return alpha, least_squares(D, z) / denom


def run_chain(D, z, cfg: ChainConfig, labels=(), meta=None) -> Chain:
    """Run the sampler for ``cfg.iterations`` iterations; fully reproducible under ``cfg.seed``."""
    D = np.asarray(D, dtype=float)
    z = np.asarray(z, dtype=float).reshape(-1)
    m, p = D.shape
    if z.size != m:
        raise ValueError(f"D has {m} rows but z has {z.size} entries")
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(z))):
        raise ValueError("D and z must be finite")
    prior = cfg.prior
    rng = as_generator(cfg.seed)
    DT = np.ascontiguousarray(D.T)
    DtD = DT @ D
    Dtz = DT @ z
    colsq = np.diag(DtD).copy()

    alpha, w0 = initial_state(D, z, prior)
    w = w0.copy()
    sigma2 = cfg.sigma_init ** 2 if cfg.learn_sigma2 else cfg.sigma2

    M = cfg.iterations
    A = np.empty((M, p))
    W = np.empty((M, p))
    S2 = np.empty(M)
    accepted = np.zeros(p, dtype=np.int64)
    rescaled = np.zeros(p, dtype=np.int64)
    use_mh = cfg.alpha_update == "metropolis"

    for i in range(M):
        try:
            w = _draw_w(DtD, Dtz, prior.scale(alpha), sigma2, prior.tau_w, rng)
            r = z - D @ (prior.scale(alpha) * w)
            if use_mh:
                accepted += _mh_sweep(DT, colsq, r, alpha, w, prior, sigma2, cfg.rw_step, rng)
            else:
                _relu_sweep(DT, colsq, r, alpha, w, prior, sigma2, rng)
            if cfg.rescale:
                rescaled += _rescale_sweep(alpha, w, prior, cfg.rw_step, rng)
            if cfg.learn_sigma2:
                sigma2 = sample_sigma2(float(r @ r), m, cfg.a0, cfg.b0, rng)
        except (np.linalg.LinAlgError, ArithmeticError, ValueError) as exc:
            raise ChainError(str(exc), i) from exc
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(w)) and np.isfinite(sigma2)):
            raise ChainError("non-finite state", i)
        A[i] = alpha
        W[i] = w
        S2[i] = sigma2

    attempted = np.full(p, M if use_mh else 0, dtype=np.int64)
    chain = Chain(A, W, S2, prior, cfg.burn_in_index, accepted, attempted, cfg.seed,
                  cfg.to_dict(), tuple(labels), dict(meta or {}))
    chain.meta.setdefault("w0", w0.tolist())
    if cfg.rescale:
        chain.meta["rescale_acceptance"] = (rescaled / M).tolist()
    if use_mh:
        log.info("MH acceptance per coordinate: %s", np.round(chain.acceptance_rate, 3).tolist())
    return chain


# ---------------------------------------------------------------------------
# persistence


def save_chain(chain: Chain, path, extra: dict | None = None) -> tuple:
    """Write ``<path>.npz`` (samples) and ``<path>.json`` (sidecar).  Returns both paths."""
    from .io import atomic_write_bytes, atomic_write_text, canonical_json

    base = Path(path)
    if base.suffix in (".npz", ".json"):
        base = base.with_suffix("")
    import io as _io

    buf = _io.BytesIO()
    np.savez(buf, alpha=chain.alpha, w=chain.w, sigma2=chain.sigma2)
    npz = base.with_name(base.name + ".npz")
    sidecar = base.with_name(base.name + ".json")
    atomic_write_bytes(npz, buf.getvalue())
    doc = {
        "format": "bsindy-chain",
        "format_version": CHAIN_FORMAT_VERSION,
        "prior": chain.prior.to_dict(),
        "burn_in": chain.burn_in,
        "seed": chain.seed,
        "config": chain.config,
        "labels": list(chain.labels),
        "accepted": chain.accepted.tolist(),
        "attempted": chain.attempted.tolist(),
        "meta": chain.meta,
    }
    if extra:
        doc.update(extra)
    atomic_write_text(sidecar, canonical_json(doc))
    return npz, sidecar


def load_chain(path) -> Chain:
    base = Path(path)
    if base.suffix in (".npz", ".json"):
        base = base.with_suffix("")
    sidecar = base.with_name(base.name + ".json")
    npz = base.with_name(base.name + ".npz")
    try:
        doc = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt chain sidecar {sidecar}: {exc}") from exc
    if doc.get("format") != "bsindy-chain":
        raise ValueError(f"{sidecar} is not a chain sidecar")
    if doc.get("format_version") != CHAIN_FORMAT_VERSION:
        raise ValueError(f"unsupported chain format version {doc.get('format_version')}")
    try:
        with np.load(npz) as data:
            alpha, w, s2 = data["alpha"], data["w"], data["sigma2"]
    except (OSError, KeyError, ValueError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ValueError(f"corrupt chain file {npz}: {exc}") from exc
    if alpha.shape != w.shape or alpha.shape[0] != s2.shape[0]:
        raise ValueError(f"chain arrays in {npz} have inconsistent shapes")
    prior = PriorConfig.from_dict(doc["prior"])
    if len(doc["accepted"]) != alpha.shape[1]:
        raise ValueError("sidecar does not match the stored chain width")
    return Chain(alpha, w, s2, prior, int(doc["burn_in"]), np.asarray(doc["accepted"], dtype=np.int64),
                 np.asarray(doc["attempted"], dtype=np.int64), doc.get("seed"), doc.get("config", {}),
                 tuple(doc.get("labels", ())), doc.get("meta", {}))


def truncated(chain: Chain, n: int) -> Chain:
    """First ``n`` iterations of a chain (burn-in marker clipped)."""
    return replace(chain, alpha=chain.alpha[:n], w=chain.w[:n], sigma2=chain.sigma2[:n],
                   burn_in=min(chain.burn_in, n))


__all__ = [
    "Activation", "Chain", "ChainConfig", "ChainError", "PriorConfig", "load_chain", "log_likelihood",
    "mh_alpha_step", "relu_conditional", "relu_exact_alpha_step", "rescale_step", "run_chain", "sample_sigma2",
    "sample_w_conditional", "save_chain", "w_conditional_moments",
]
