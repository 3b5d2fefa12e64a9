"""Chain diagnostics, posterior summaries and posterior-predictive ensembles."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import DivergenceError, as_generator, integrate_ensemble
from .library import BasisTerm, evaluate_terms
from .mcmc import Chain

QUANTILE_METHOD = "linear"


class GewekeUndefinedError(ValueError):
    """Both sub-chains have zero variance, so the score is 0/0."""


def geweke_score(samples, frac_a: float = 0.1, frac_b: float = 0.5) -> float:
    """Two-sample Z score between the start and the end of a chain.

    ``Z = (mean_A - mean_B) / sqrt(var_A / n_A + var_B / n_B)`` with ``A`` the
    first ``floor(frac_a * M)`` samples and ``B`` the last
    ``floor(frac_b * M)``.  Variances are plain sample variances (ddof=1); no
    spectral correction for autocorrelation is applied.
    """
    x = np.asarray(samples, dtype=float).reshape(-1)
    M = x.size
    if M < 20:
        raise ValueError(f"chain of length {M} is too short for a Geweke score (need >= 20)")
    if not (frac_a > 0 and frac_b > 0 and frac_a + frac_b <= 1):
        raise ValueError("fractions must be positive with frac_a + frac_b <= 1")
    n_a = max(int(np.floor(frac_a * M)), 1)
    n_b = max(int(np.floor(frac_b * M)), 1)
    A, B = x[:n_a], x[M - n_b:]
    var_a = A.var(ddof=1) if n_a > 1 else 0.0
    var_b = B.var(ddof=1) if n_b > 1 else 0.0
    denom = var_a / n_a + var_b / n_b
    if denom == 0.0:
        raise GewekeUndefinedError("both sub-chains are constant; Geweke score undefined")
    return float((A.mean() - B.mean()) / np.sqrt(denom))


def geweke_scores(samples, frac_a: float = 0.1, frac_b: float = 0.5) -> np.ndarray:
    """Column-wise Geweke scores; NaN where undefined."""
    S = np.asarray(samples, dtype=float)
    out = np.full(S.shape[1], np.nan)
    for j in range(S.shape[1]):
        try:
            out[j] = geweke_score(S[:, j], frac_a, frac_b)
        except GewekeUndefinedError:
            pass
    return out


def mc_standard_error(samples, n_batches: int = 50) -> np.ndarray:
    """Batch-means Monte Carlo standard error of the mean, column-wise."""
    S = np.asarray(samples, dtype=float)
    squeeze = S.ndim == 1
    if squeeze:
        S = S[:, None]
    b = S.shape[0] // n_batches
    if b < 1:
        raise ValueError("not enough samples for the requested number of batches")
    means = S[: b * n_batches].reshape(n_batches, b, -1).mean(axis=1)
    se = means.std(axis=0, ddof=1) / np.sqrt(n_batches)
    return se[0] if squeeze else se


def _post_xi(chain_or_samples) -> tuple:
    if isinstance(chain_or_samples, Chain):
        return chain_or_samples.post(), chain_or_samples.prior.activation.kind
    return np.asarray(chain_or_samples, dtype=float), None


def default_zero_tol(xi_post, activation_kind: Optional[str]) -> float:
    """0 for ReLU chains (exact zeros exist), else 1e-3 times the largest |posterior mean|."""
    if activation_kind == "relu":
        return 0.0
    return 1e-3 * float(np.max(np.abs(np.mean(xi_post, axis=0)))) if xi_post.size else 0.0


def inclusion_probabilities(chain, zero_tol: Optional[float] = None) -> np.ndarray:
    """Fraction of post-burn-in samples with ``|xi_j| > zero_tol``."""
    xi, kind = _post_xi(chain)
    if xi.shape[0] == 0:
        raise ValueError("no post-burn-in samples")
    if zero_tol is None:
        zero_tol = default_zero_tol(xi, kind)
    return np.mean(np.abs(xi) > zero_tol, axis=0)


@dataclass
class FitReport:
    labels: tuple
    mean: np.ndarray
    std: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    inclusion: np.ndarray
    median_model: np.ndarray
    geweke: np.ndarray
    zero_tol: float
    meta: dict = field(default_factory=dict)

    @property
    def median_model_means(self) -> np.ndarray:
        """Posterior means on the median model, zero elsewhere."""
        out = np.zeros_like(self.mean)
        out[self.median_model] = self.mean[self.median_model]
        return out

    def geweke_ok(self, threshold: float = 2.0, coords=None) -> bool:
        idx = self.median_model if coords is None else np.asarray(coords, dtype=int)
        z = self.geweke[idx]
        z = z[np.isfinite(z)]
        return bool(np.all(np.abs(z) < threshold))

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]

        return {
            "labels": list(self.labels),
            "mean": clean(self.mean),
            "std": clean(self.std),
            "lower": clean(self.lower),
            "upper": clean(self.upper),
            "level": self.level,
            "inclusion": clean(self.inclusion),
            "median_model": [int(j) for j in self.median_model],
            "median_model_labels": [self.labels[j] for j in self.median_model] if self.labels else [],
            "geweke": clean(self.geweke),
            "zero_tol": self.zero_tol,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d) -> "FitReport":
        def arr(key):
            return np.array([np.nan if v is None else v for v in d[key]], dtype=float)

        return cls(tuple(d["labels"]), arr("mean"), arr("std"), arr("lower"), arr("upper"),
                   float(d["level"]), arr("inclusion"), np.asarray(d["median_model"], dtype=int),
                   arr("geweke"), float(d["zero_tol"]), d.get("meta", {}))


def credible_interval(samples, level: float = 0.9):
    """Equal-tailed interval from empirical quantiles (linear interpolation)."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    # rounding keeps decimal levels exact, e.g. 0.9 -> (0.05, 0.95) rather than 0.04999...
    probs = [round((1 - level) / 2, 12), round((1 + level) / 2, 12)]
    q = np.quantile(samples, probs, axis=0, method=QUANTILE_METHOD)
    return q[0], q[1]


def summarize(chain: Chain, level: float = 0.9, zero_tol: Optional[float] = None) -> FitReport:
    """Posterior summary over the post-burn-in part of ``chain``."""
    xi = chain.post()
    if xi.shape[0] == 0:
        raise ValueError("chain has no post-burn-in samples")
    kind = chain.prior.activation.kind
    if zero_tol is None:
        zero_tol = default_zero_tol(xi, kind)
    lower, upper = credible_interval(xi, level)
    incl = inclusion_probabilities(xi, zero_tol)
    geweke = geweke_scores(xi) if xi.shape[0] >= 20 else np.full(xi.shape[1], np.nan)
    meta = {
        "config": chain.config,
        "seed": chain.seed,
        "burn_in": chain.burn_in,
        "iterations": chain.n_iter,
        "acceptance_rate": [None if not np.isfinite(v) else float(v) for v in chain.acceptance_rate],
        "sigma2_mean": float(np.mean(chain.post(chain.sigma2))),
    }
    return FitReport(tuple(chain.labels), xi.mean(axis=0), xi.std(axis=0, ddof=1) if xi.shape[0] > 1
                     else np.zeros(xi.shape[1]), lower, upper, level, incl, np.flatnonzero(incl > 0.5),
                     geweke, float(zero_tol), meta)


def histogram_bins(samples, bins: int = 50):
    """Per-coefficient histogram counts and edges (raw bins, no smoothing)."""
    S = np.asarray(samples, dtype=float)
    out = []
    for j in range(S.shape[1]):
        counts, edges = np.histogram(S[:, j], bins=bins)
        out.append((counts, edges))
    return out


# ---------------------------------------------------------------------------
# posterior predictive


@dataclass
class PredictiveEnsemble:
    t: np.ndarray
    trajectories: np.ndarray  # retained draws, (k, m, n)
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    n_draws: int
    n_diverged: int

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_csv(self) -> str:
        n = self.mean.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["t"]
        for i in range(n):
            header += [f"x{i + 1}_mean", f"x{i + 1}_lower", f"x{i + 1}_upper"]
        w.writerow(header)
        for k, tk in enumerate(self.t):
            row = [repr(float(tk))]
            for i in range(n):
                row += [repr(float(self.mean[k, i])), repr(float(self.lower[k, i])), repr(float(self.upper[k, i]))]
            w.writerow(row)
        return buf.getvalue()


def coefficient_draws(chains: Sequence[Chain], n_draws: int, rng) -> np.ndarray:
    """``(n_draws, p, n)`` coefficient matrices, one post-burn-in draw per chain/equation.

    Draws without replacement when a chain has at least ``n_draws`` samples.
    """
    cols = []
    for ch in chains:
        xi = ch.post()
        avail = xi.shape[0]
        if avail == 0:
            raise ValueError("chain has no post-burn-in samples")
        idx = rng.choice(avail, size=n_draws, replace=n_draws > avail)
        cols.append(xi[idx])
    return np.stack(cols, axis=-1)


def posterior_predictive(chains, terms: Sequence[BasisTerm], x0, t, n_draws: int = 100,
                         level: float = 0.9, seed=None, substeps: int = 10) -> PredictiveEnsemble:
    """Integrate ``dx/dt = Theta(x) xi`` for posterior draws of ``xi``.

    Args:
        chains: one chain per state equation (same library), or an array of
            coefficient samples with shape ``(S, p, n)``.
        terms: the library the chains were fitted with.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    rng = as_generator(seed)
    if isinstance(chains, np.ndarray):
        S = chains
        idx = rng.choice(S.shape[0], size=n_draws, replace=n_draws > S.shape[0])
        Xi = S[idx]
    else:
        Xi = coefficient_draws(list(chains), n_draws, rng)
    p, n = Xi.shape[1:]
    if p != len(terms):
        raise ValueError(f"chains carry {p} coefficients but the library has {len(terms)} terms")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != n:
        raise ValueError(f"x0 has {x0.size} entries for a {n}-state model")
    terms = list(terms)

    def rhs(x):
        return np.einsum("bp,bpn->bn", evaluate_terms(terms, x), Xi)

    X, dead = integrate_ensemble(rhs, np.broadcast_to(x0, (n_draws, n)), t, substeps)
    keep = X[~dead]
    if keep.shape[0] == 0:
        raise DivergenceError("every posterior draw diverged", float(np.asarray(t)[0]))
    lower, upper = credible_interval(keep, level) if keep.shape[0] > 1 else (keep[0], keep[0])
    return PredictiveEnsemble(np.asarray(t, dtype=float), keep, keep.mean(axis=0), lower, upper,
                              level, n_draws, int(dead.sum()))


# ---------------------------------------------------------------------------
# autocorrelation


@dataclass
class Autocorrelation:
    lags: np.ndarray  # in samples
    curves: np.ndarray  # (n_windows, window_len)
    mean: np.ndarray
    std: np.ndarray


def windowed_autocorrelation(series, window_len: int, n_windows: int) -> Autocorrelation:
    """Uncentred lag-product autocorrelation averaged over consecutive windows.

    Within a window of ``N = window_len`` samples,
    ``R(tau) = mean_t x[t] x[t + tau]`` over the ``N - tau`` available pairs,
    for ``tau = 0 .. N-1``.  Windows do not overlap and start at sample 0.
    """
    x = np.asarray(series, dtype=float).reshape(-1)
    if window_len < 1 or n_windows < 1:
        raise ValueError("window_len and n_windows must be positive")
    if window_len * n_windows > x.size:
        raise ValueError(
            f"series of length {x.size} is too short for {n_windows} windows of {window_len} samples")
    W = x[: window_len * n_windows].reshape(n_windows, window_len)
    curves = np.empty((n_windows, window_len))
    for tau in range(window_len):
        curves[:, tau] = np.mean(W[:, : window_len - tau] * W[:, tau:], axis=1)
    std = curves.std(axis=0, ddof=1) if n_windows > 1 else np.zeros(window_len)
    return Autocorrelation(np.arange(window_len), curves, curves.mean(axis=0), std)


def ensemble_autocorrelation(ens: PredictiveEnsemble, state: int, window_len: int, n_windows: int,
                             level: float = 0.9):
    """Window-averaged autocorrelation for every retained trajectory.

    Returns ``(curves, mean, lower, upper)`` across the ensemble.
    """
    curves = np.stack([windowed_autocorrelation(tr[:, state], window_len, n_windows).mean
                       for tr in ens.trajectories])
    lower, upper = credible_interval(curves, level)
    return curves, curves.mean(axis=0), lower, upper
