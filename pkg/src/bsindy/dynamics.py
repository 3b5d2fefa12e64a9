"""Dynamical systems: integration, numerical derivatives and noise.

Every right-hand side in this module is vectorised over leading axes, so a
state array of shape ``(..., n)`` maps to derivatives of the same shape.  That
lets the same integrator propagate one trajectory or a whole ensemble.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

DIVERGENCE_LIMIT = 1e12
DEFAULT_SUBSTEPS = 10

DERIVATIVE_METHODS = ("analytic", "forward-euler", "central", "smoothed-central")


class DivergenceError(FloatingPointError):
    """Raised when an integrated state leaves the finite, bounded region."""

    def __init__(self, message: str, last_valid_time: float):
        super().__init__(message)
        self.last_valid_time = last_valid_time


@dataclass(frozen=True)
class SystemDef:
    """Autonomous system ``dx/dt = rhs(x)`` with ``n`` states."""

    n: int
    rhs: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.rhs(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    X: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if t.ndim != 1 or len(t) != X.shape[0]:
            raise ValueError(f"time grid of length {t.size} does not match {X.shape[0]} state rows")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(X))):
            raise ValueError("trajectory contains non-finite entries")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "X", X)

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class DerivativeData:
    """Regression targets, one column per state equation.

    ``t`` holds the times the targets refer to; for forward Euler these are
    the left endpoints, so rows line up with ``X[:-1]``.
    """

    t: np.ndarray
    z: np.ndarray
    method: str
    sigma_eta: float = 0.0

    def __post_init__(self):
        if self.method not in DERIVATIVE_METHODS:
            raise ValueError(f"unknown derivative method {self.method!r}")
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))


# ---------------------------------------------------------------------------
# presets


def pendulum(g: float = 9.81, L: float = 1.0) -> SystemDef:
    """Linearised pendulum: x1' = x2, x2' = -(g/L) x1."""
    w2 = g / L

    def rhs(x):
        return np.stack([x[..., 1], -w2 * x[..., 0]], axis=-1)

    return SystemDef(2, rhs, "pendulum", {"g": g, "L": L})


def lorenz(c1: float = 10.0, c2: float = 28.0, c3: float = 2.667) -> SystemDef:
    def rhs(x):
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([c1 * (x2 - x1), x1 * (c2 - x3) - x2, x1 * x2 - c3 * x3], axis=-1)

    return SystemDef(3, rhs, "lorenz", {"c1": c1, "c2": c2, "c3": c3})


PRESETS = {"pendulum": pendulum, "lorenz": lorenz}


def get_preset(name: str, **params) -> SystemDef:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**params)


# ---------------------------------------------------------------------------
# integration


def _rk4_grid(rhs, x0, t, substeps, on_divergence="raise"):
    """Classical RK4 with ``substeps`` equal steps per output interval.

    ``x0`` may carry leading batch axes.  With ``on_divergence="mask"`` a
    diverged batch member is set to NaN and frozen instead of raising; the
    boolean mask of diverged members is returned alongside the states.
    """
    x = np.array(x0, dtype=float)
    batch_shape = x.shape[:-1]
    out = np.empty((len(t),) + x.shape)
    out[0] = x
    dead = np.zeros(batch_shape, dtype=bool)
    for i in range(1, len(t)):
        h = (t[i] - t[i - 1]) / substeps
        for _ in range(substeps):
            with np.errstate(over="ignore", invalid="ignore"):
                k1 = rhs(x)
                k2 = rhs(x + 0.5 * h * k1)
                k3 = rhs(x + 0.5 * h * k2)
                k4 = rhs(x + h * k3)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            bad = ~np.all(np.isfinite(x) & (np.abs(x) <= DIVERGENCE_LIMIT), axis=-1)
            if np.any(bad & ~dead):
                if on_divergence == "raise":
                    raise DivergenceError(
                        f"state diverged between t={t[i - 1]:g} and t={t[i]:g}", float(t[i - 1])
                    )
                dead |= bad
            if np.any(dead):
                x[dead] = 0.0
        out[i] = x
        if np.any(dead):
            out[i][dead] = np.nan
    return out, dead


def integrate(sys: SystemDef, x0, t, substeps: int = DEFAULT_SUBSTEPS) -> Trajectory:
    """Integrate ``sys`` from ``x0`` and return states at exactly the times ``t``.

    Fixed-step RK4, ``substeps`` internal steps per output interval.

    Raises:
        DivergenceError: if any state becomes non-finite or exceeds 1e12 in
            magnitude.  ``last_valid_time`` is the last grid time reached.
    """
    t = np.asarray(t, dtype=float)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != sys.n:
        raise ValueError(f"x0 has {x0.size} entries, system {sys.name!r} has {sys.n} states")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    if t.ndim != 1 or t.size < 1 or np.any(np.diff(t) <= 0):
        raise ValueError("t must be a strictly increasing 1-D grid")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    X, _ = _rk4_grid(sys.rhs, x0, t, substeps)
    return Trajectory(t, X)


def integrate_ensemble(rhs, x0, t, substeps: int = DEFAULT_SUBSTEPS):
    """Integrate a batch of systems sharing one grid.

    ``rhs`` maps ``(k, n)`` states to ``(k, n)`` derivatives, member ``i``
    using its own vector field.  Returns ``(X, diverged)`` with ``X`` of shape
    ``(k, len(t), n)``; diverged members are NaN from the point of failure.
    """
    t = np.asarray(t, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    X, dead = _rk4_grid(rhs, x0, t, substeps, on_divergence="mask")
    return np.moveaxis(X, 0, -2), dead


# ---------------------------------------------------------------------------
# derivatives


def uniform_step(t, rtol: float = 1e-12) -> float:
    t = np.asarray(t, dtype=float)
    if t.size < 2:
        raise ValueError("need at least two time points")
    dt = np.diff(t)
    h = (t[-1] - t[0]) / (t.size - 1)
    if np.max(np.abs(dt - h)) > rtol * abs(h) + 8 * np.finfo(float).eps * np.max(np.abs(t)):
        raise ValueError("time grid is not uniform; use the central method for non-uniform grids")
    return float(h)


def analytic_derivative(sys: SystemDef, traj: Trajectory) -> DerivativeData:
    return DerivativeData(traj.t.copy(), sys(traj.X), "analytic")


def forward_euler_derivative(traj: Trajectory) -> DerivativeData:
    """Forward differences ``(X[l] - X[l-1]) / dt`` on a uniform grid (m - 1 rows)."""
    if traj.m < 2:
        raise ValueError("forward differences need at least two samples")
    h = uniform_step(traj.t)
    z = np.diff(traj.X, axis=0) / h
    return DerivativeData(traj.t[:-1].copy(), z, "forward-euler")


def central_derivative(traj: Trajectory) -> DerivativeData:
    """Second-order differences, one-sided at the ends; non-uniform grids allowed."""
    if traj.m < 2:
        raise ValueError("need at least two samples")
    z = np.gradient(traj.X, traj.t, axis=0, edge_order=2 if traj.m > 2 else 1)
    return DerivativeData(traj.t.copy(), z, "central")


def moving_average(series, window: int):
    """Centred moving average; the window shrinks symmetrically near the ends."""
    y = np.asarray(series, dtype=float)
    if window == 1:
        return y.copy()
    half = window // 2
    csum = np.concatenate([np.zeros((1,) + y.shape[1:]), np.cumsum(y, axis=0)])
    idx = np.arange(len(y))
    k = np.minimum(np.minimum(idx, len(y) - 1 - idx), half)
    lo, hi = idx - k, idx + k + 1
    width = (hi - lo).reshape((-1,) + (1,) * (y.ndim - 1))
    return (csum[hi] - csum[lo]) / width


def smoothed_gradient(series, t=None, window: int = 1, dt: float = 1.0):
    """Moving-average smoothing followed by second-order central differences.

    Args:
        series: samples along axis 0 (1-D or 2-D).
        t: sample times; if omitted, a uniform spacing ``dt`` is assumed.
        window: odd smoothing length, 1 disables smoothing.
    """
    y = np.asarray(series, dtype=float)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if window > len(y):
        raise ValueError(f"window {window} exceeds series length {len(y)}")
    if len(y) < 2:
        raise ValueError("need at least two samples")
    ys = moving_average(y, window)
    spacing = np.asarray(t, dtype=float) if t is not None else dt
    return np.gradient(ys, spacing, axis=0, edge_order=2 if len(y) > 2 else 1)


def smoothed_central_derivative(traj: Trajectory, window: int = 5) -> DerivativeData:
    z = smoothed_gradient(traj.X, traj.t, window)
    return DerivativeData(traj.t.copy(), z, "smoothed-central")


def compute_derivatives(traj: Trajectory, method: str, sys: SystemDef | None = None, window: int = 5):
    if method == "analytic":
        if sys is None:
            raise ValueError("analytic derivatives need the system definition")
        return analytic_derivative(sys, traj)
    if method == "forward-euler":
        return forward_euler_derivative(traj)
    if method == "central":
        return central_derivative(traj)
    if method == "smoothed-central":
        return smoothed_central_derivative(traj, window)
    raise ValueError(f"unknown derivative method {method!r}; choose from {DERIVATIVE_METHODS}")


# ---------------------------------------------------------------------------
# noise


def as_generator(seed) -> np.random.Generator:
    """PCG64 generator from an int seed, a SeedSequence, or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def add_gaussian_noise(data, sigma: float, seed=None):
    """Add i.i.d. ``N(0, sigma^2)`` noise element-wise.

    Accepts a plain array or a :class:`DerivativeData`; the latter comes back
    with ``sigma_eta`` recorded.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if isinstance(data, DerivativeData):
        z = add_gaussian_noise(data.z, sigma, seed)
        return DerivativeData(data.t, z, data.method, float(np.hypot(data.sigma_eta, sigma)))
    arr = np.asarray(data, dtype=float)
    if sigma == 0:
        return arr.copy()
    rng = as_generator(seed)
    return arr + sigma * rng.standard_normal(arr.shape)


# ---------------------------------------------------------------------------
# CSV


def _fmt(v: float) -> str:
    return repr(float(v))


def write_table_csv(path_or_buf, t, values, names):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    own = isinstance(path_or_buf, str) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *names])
        for ti, row in zip(t, values):
            w.writerow([_fmt(ti), *(_fmt(v) for v in row)])
    finally:
        if own:
            fh.close()


def read_table_csv(path_or_buf):
    """Return ``(t, values, names)`` from a ``t,c1,...`` CSV."""
    own = isinstance(path_or_buf, str) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, newline="") if own else path_or_buf
    try:
        rows = list(csv.reader(fh))
    finally:
        if own:
            fh.close()
    if not rows or not rows[0] or rows[0][0] != "t":
        raise ValueError("CSV must start with a header row beginning with 't'")
    names = rows[0][1:]
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    if data.size == 0:
        data = np.empty((0, len(names) + 1))
    return data[:, 0], data[:, 1:], names


def trajectory_to_csv(traj: Trajectory, path_or_buf=None):
    names = [f"x{i + 1}" for i in range(traj.n)]
    if path_or_buf is None:
        buf = io.StringIO()
        write_table_csv(buf, traj.t, traj.X, names)
        return buf.getvalue()
    write_table_csv(path_or_buf, traj.t, traj.X, names)


def trajectory_from_csv(path_or_buf) -> Trajectory:
    t, X, _ = read_table_csv(path_or_buf)
    return Trajectory(t, X)


def derivatives_to_csv(dd: DerivativeData, path_or_buf=None):
    names = [f"x{i + 1}" for i in range(dd.z.shape[1])]
    if path_or_buf is None:
        buf = io.StringIO()
        write_table_csv(buf, dd.t, dd.z, names)
        return buf.getvalue()
    write_table_csv(path_or_buf, dd.t, dd.z, names)


def derivatives_from_csv(path_or_buf, method: str = "analytic", sigma_eta: float = 0.0) -> DerivativeData:
    t, z, _ = read_table_csv(path_or_buf)
    return DerivativeData(t, z, method, sigma_eta)
