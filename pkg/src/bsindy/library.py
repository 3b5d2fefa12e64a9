"""Candidate basis terms and the design matrix built from them.

The grammar is a closed set of term kinds; each term is a small frozen
record that knows how to evaluate itself on a state array.  Terms serialise to
plain dicts such as ``{"kind": "monomial", "powers": [1, 0, 1]}``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import SystemDef, as_generator, smoothed_gradient, uniform_step

TERM_KINDS = (
    "constant",
    "monomial",
    "crossproduct",
    "sine",
    "sinesq",
    "quartic-sine",
    "delay",
    "derivative",
)


@dataclass(frozen=True)
class BasisTerm:
    """One library column.

    Which fields matter depends on ``kind``:

    ``constant``        none
    ``monomial``        ``powers`` (one exponent per state, trailing zeros optional)
    ``crossproduct``    ``var``, ``var2``
    ``sine``/``sinesq`` ``var``
    ``quartic-sine``    ``var`` (raised to the 4th power) times ``sin`` of ``var2``
    ``delay``           ``var``, ``fraction`` of ``period``; ``derivative`` delays d/dt instead
    ``derivative``      ``var``, smoothing ``window``
    """

    kind: str
    powers: tuple = ()
    var: int = 0
    var2: int = 0
    fraction: float = 0.0
    derivative: bool = False
    window: int = 1
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ValueError(f"unknown term kind {self.kind!r}; choose from {TERM_KINDS}")
        object.__setattr__(self, "powers", tuple(int(p) for p in self.powers))
        if self.kind == "monomial":
            if not self.powers or any(p < 0 for p in self.powers):
                raise ValueError("monomial needs non-negative powers")
        if self.kind == "delay" and not 0.0 < self.fraction < 1.0:
            raise ValueError(f"delay fraction must lie in (0, 1), got {self.fraction}")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("smoothing window must be a positive odd integer")
        if self.var < 0 or self.var2 < 0:
            raise ValueError("variable indices must be non-negative")

    @property
    def pointwise(self) -> bool:
        """True if the column at row i depends on X[i] only."""
        return self.kind not in ("delay", "derivative")

    def max_index(self) -> int:
        if self.kind == "constant":
            return -1
        if self.kind == "monomial":
            nz = [i for i, p in enumerate(self.powers) if p]
            return max(nz) if nz else -1
        if self.kind in ("crossproduct", "quartic-sine"):
            return max(self.var, self.var2)
        return self.var

    def label(self, names: Sequence[str] | None = None) -> str:
        if self.name:
            return self.name

        def nm(i):
            return names[i] if names is not None else f"x{i + 1}"

        k = self.kind
        if k == "constant":
            return "1"
        if k == "monomial":
            parts = []
            for i, p in enumerate(self.powers):
                if p == 1:
                    parts.append(nm(i))
                elif p > 1:
                    parts.append(f"{nm(i)}^{p}")
            return "".join(parts) if parts else "1"
        if k == "crossproduct":
            return f"{nm(self.var)}{nm(self.var2)}"
        if k == "sine":
            return f"sin({nm(self.var)})"
        if k == "sinesq":
            return f"sin^2({nm(self.var)})"
        if k == "quartic-sine":
            return f"{nm(self.var)}^4 sin({nm(self.var2)})"
        if k == "derivative":
            return f"d{nm(self.var)}/dt"
        base = f"d{nm(self.var)}/dt" if self.derivative else nm(self.var)
        return f"{base}[t-{self.fraction:g}P]"

    def evaluate(self, X) -> np.ndarray:
        """Evaluate a pointwise term on states of shape ``(..., n)``."""
        if not self.pointwise:
            raise ValueError(f"term {self.label()} needs the full time series")
        X = np.asarray(X, dtype=float)
        k = self.kind
        if k == "constant":
            return np.ones(X.shape[:-1])
        if k == "monomial":
            out = np.ones(X.shape[:-1])
            for i, p in enumerate(self.powers):
                if p:
                    out = out * X[..., i] ** p
            return out
        if k == "crossproduct":
            return X[..., self.var] * X[..., self.var2]
        if k == "sine":
            return np.sin(X[..., self.var])
        if k == "sinesq":
            return np.sin(X[..., self.var]) ** 2
        # quartic-sine
        return X[..., self.var] ** 4 * np.sin(X[..., self.var2])

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "monomial":
            d["powers"] = list(self.powers)
        elif self.kind in ("crossproduct", "quartic-sine"):
            d["var"], d["var2"] = self.var, self.var2
        elif self.kind in ("sine", "sinesq"):
            d["var"] = self.var
        elif self.kind == "delay":
            d.update(var=self.var, fraction=self.fraction)
            if self.derivative:
                d.update(derivative=True, window=self.window)
        elif self.kind == "derivative":
            d.update(var=self.var, window=self.window)
        if self.name:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BasisTerm":
        allowed = {"kind", "powers", "var", "var2", "fraction", "derivative", "window", "name"}
        extra = set(d) - allowed
        if extra:
            raise ValueError(f"unknown term fields {sorted(extra)} in {d}")
        if "kind" not in d:
            raise ValueError(f"term descriptor without 'kind': {d}")
        return cls(**d)


def monomial(*powers) -> BasisTerm:
    return BasisTerm("monomial", powers=powers)


def spec_to_list(terms: Sequence[BasisTerm]) -> list:
    return [t.to_dict() for t in terms]


def spec_from_list(items) -> list:
    terms = [it if isinstance(it, BasisTerm) else BasisTerm.from_dict(dict(it)) for it in items]
    labels = [t.label() for t in terms]
    dup = {lab for lab in labels if labels.count(lab) > 1}
    if dup:
        raise ValueError(f"duplicate basis terms: {sorted(dup)}")
    return terms


def polynomial_terms(n: int, degree: int, include_constant: bool = False) -> list:
    """All monomials in ``n`` states up to ``degree``, graded lexicographic order."""
    terms = [BasisTerm("constant")] if include_constant else []
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(n), d):
            powers = [0] * n
            for i in combo:
                powers[i] += 1
            terms.append(monomial(*powers))
    return terms


def lorenz_library() -> list:
    """x1, x2, x3, x1x2, x1x3, x2x3."""
    return [monomial(1, 0, 0), monomial(0, 1, 0), monomial(0, 0, 1),
            monomial(1, 1, 0), monomial(1, 0, 1), monomial(0, 1, 1)]


def ishigami_library() -> list:
    """Twelve-term library for the Ishigami regression benchmark."""
    lin = [monomial(1, 0, 0), monomial(0, 1, 0), monomial(0, 0, 1)]
    quad = [BasisTerm("crossproduct", var=i, var2=j) for i in range(3) for j in range(i, 3)]
    return lin + quad + [
        BasisTerm("sine", var=0),
        BasisTerm("sinesq", var=1),
        BasisTerm("quartic-sine", var=2, var2=0),
    ]


ISHIGAMI_COEF = (1.0, 7.0, 0.1)


def ishigami_regression(m: int, coef=ISHIGAMI_COEF, sigma: float = 0.1, seed=None):
    """Inputs ``P ~ U[-pi, pi]^3`` and ``y = a sin p1 + b sin^2 p2 + c p3^4 sin p1 + sigma eps``.

    Returns:
        ``(P, y)`` with shapes ``(m, 3)`` and ``(m,)``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = as_generator(seed)
    P = rng.uniform(-np.pi, np.pi, size=(m, 3))
    a, b, c = coef
    s1 = np.sin(P[:, 0])
    y = a * s1 + b * np.sin(P[:, 1]) ** 2 + c * P[:, 2] ** 4 * s1
    return P, y + sigma * rng.standard_normal(m)


def evaluate_terms(terms: Sequence[BasisTerm], X) -> np.ndarray:
    """Stack pointwise terms: ``(..., n)`` states to ``(..., p)`` features."""
    X = np.asarray(X, dtype=float)
    return np.stack([t.evaluate(X) for t in terms], axis=-1)


def term_system(terms: Sequence[BasisTerm], coef, name: str = "custom") -> SystemDef:
    """System ``dx/dt = Theta(x) @ coef`` with ``coef`` of shape ``(p, n)``."""
    coef = np.asarray(coef, dtype=float)
    if coef.ndim != 2 or coef.shape[0] != len(terms):
        raise ValueError(f"coefficients must have shape ({len(terms)}, n), got {coef.shape}")
    n = coef.shape[1]
    for t in terms:
        if not t.pointwise:
            raise ValueError(f"term {t.label()} cannot appear in an ODE right-hand side")
        if t.max_index() >= n:
            raise ValueError(f"term {t.label()} refers to a state beyond n={n}")

    def rhs(x):
        return evaluate_terms(terms, x) @ coef

    return SystemDef(n, rhs, name, {"terms": spec_to_list(terms), "coef": coef.tolist()})


# ---------------------------------------------------------------------------
# design matrix


@dataclass(frozen=True)
class NormRecord:
    """What :func:`normalize` did, enough to map coefficients back.

    ``kept`` indexes the original columns that survived (the constant column is
    dropped); ``means``/``stds`` are per original column.
    """

    means: np.ndarray
    stds: np.ndarray
    kept: np.ndarray
    target_mean: float
    constant_index: Optional[int] = None

    def intercept(self, xi_orig) -> float:
        xi_orig = np.asarray(xi_orig, dtype=float)
        return float(self.target_mean - self.means[self.kept] @ xi_orig[self.kept])

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "kept": self.kept.tolist(),
            "target_mean": self.target_mean,
            "constant_index": self.constant_index,
        }

    @classmethod
    def from_dict(cls, d) -> "NormRecord":
        return cls(np.asarray(d["means"], float), np.asarray(d["stds"], float),
                   np.asarray(d["kept"], int), float(d["target_mean"]), d.get("constant_index"))


@dataclass(frozen=True)
class DesignMatrix:
    D: np.ndarray
    terms: tuple
    norm: Optional[NormRecord] = None
    row_offset: int = 0
    demeaned_target: Optional[float] = None
    labels: tuple = field(default=())

    def __post_init__(self):
        D = np.asarray(self.D, dtype=float)
        if D.ndim != 2 or D.shape[1] != len(self.terms):
            raise ValueError(f"design matrix has {D.shape} but {len(self.terms)} terms")
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.labels:
            object.__setattr__(self, "labels", tuple(t.label() for t in self.terms))

    @property
    def p(self) -> int:
        return self.D.shape[1]


def _delay_shift(fraction: float, period: float, dt: float) -> int:
    x = fraction * period / dt
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


def build_design(X, terms: Sequence[BasisTerm], t=None, period: float | None = None) -> DesignMatrix:
    """Evaluate ``terms`` row-wise on the state matrix ``X`` (m x n).

    Delay terms shift their source column by ``round(fraction * period / dt)``
    samples.  The first ``row_offset`` rows, which lack delayed history, are
    dropped from every column; the caller must drop the same rows from the
    target.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    m, n = X.shape
    terms = list(terms)
    for term in terms:
        if term.max_index() >= n:
            raise ValueError(f"term {term.label()} refers to state {term.max_index() + 1}, data has {n}")

    needs_time = [term for term in terms if not term.pointwise]
    dt = None
    if needs_time:
        if t is None:
            raise ValueError(f"term {needs_time[0].label()} needs the time grid")
        t = np.asarray(t, dtype=float)
        if t.shape != (m,):
            raise ValueError("time grid length does not match the state rows")

    shifts = []
    for term in terms:
        if term.kind == "delay":
            if period is None:
                raise ValueError(f"delay term {term.label()} needs a period")
            if dt is None:
                dt = uniform_step(t)
            s = _delay_shift(term.fraction, period, dt)
            if s >= m:
                raise ValueError(f"delay of {s} samples for {term.label()} exceeds the record length {m}")
            shifts.append(s)
        else:
            shifts.append(0)
    offset = max(shifts, default=0)

    cols = []
    for term, s in zip(terms, shifts):
        if term.pointwise:
            full = term.evaluate(X)
        elif term.kind == "derivative" or term.derivative:
            full = smoothed_gradient(X[:, term.var], t, term.window)
        else:
            full = X[:, term.var]
        cols.append(full[offset - s: m - s])
    D = np.column_stack(cols) if cols else np.empty((m - offset, 0))
    return DesignMatrix(D, tuple(terms), row_offset=offset)


def normalize(dm: DesignMatrix, z, ddof: int = 1):
    """De-mean the target and standardise the columns of ``D``.

    The constant term, if present, is dropped (it is identically zero after
    de-meaning).  Standard deviations use ``ddof=1``.

    Returns:
        ``(dm_normalized, z_centred, record)``.

    Raises:
        ValueError: if a non-constant column has zero variance.
    """
    z = np.asarray(z, dtype=float)
    if z.shape[0] != dm.D.shape[0]:
        raise ValueError(f"target has {z.shape[0]} rows, design has {dm.D.shape[0]}")
    D = dm.D
    means = D.mean(axis=0)
    stds = D.std(axis=0, ddof=ddof)
    const_idx = [j for j, t in enumerate(dm.terms) if t.kind == "constant"]
    kept = np.array([j for j in range(dm.p) if j not in const_idx], dtype=int)
    for j in kept:
        if not stds[j] > 0:
            raise ValueError(f"column {dm.labels[j]!r} has zero variance and cannot be normalised")
    stds = np.where(np.isin(np.arange(dm.p), kept), stds, 1.0)
    zbar = float(z.mean())
    rec = NormRecord(means, stds, kept, zbar, const_idx[0] if const_idx else None)
    Dn = (D[:, kept] - means[kept]) / stds[kept]
    dmn = DesignMatrix(Dn, tuple(dm.terms[j] for j in kept), rec, dm.row_offset, zbar,
                       tuple(dm.labels[j] for j in kept))
    return dmn, z - zbar, rec


def denormalize_coefficients(xi_normalized, rec: NormRecord) -> np.ndarray:
    """Map coefficients fitted on normalised data back to the original columns.

    ``xi_orig[j] = xi_norm[j] / std[j]``.  If the original library had a
    constant term, its slot receives the intercept implied by the de-meaning;
    otherwise use :meth:`NormRecord.intercept`.
    """
    xi_n = np.asarray(xi_normalized, dtype=float)
    if xi_n.shape[0] != rec.kept.size:
        raise ValueError(f"expected {rec.kept.size} normalised coefficients, got {xi_n.shape[0]}")
    xi = np.zeros((rec.means.size,) + xi_n.shape[1:])
    scale = rec.stds[rec.kept].reshape((-1,) + (1,) * (xi_n.ndim - 1))
    xi[rec.kept] = xi_n / scale
    if rec.constant_index is not None:
        xi[rec.constant_index] = rec.target_mean - np.tensordot(rec.means[rec.kept], xi[rec.kept], axes=1)
    return xi
