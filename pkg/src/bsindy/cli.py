"""Command-line driver: ``simulate``, ``fit``, ``diagnose`` and ``predict``.

Every verb accepts ``--config`` (a YAML experiment file or the name of a
packaged preset such as ``lorenz_relu``), ``--seed``, ``--out`` and
``--jobs``.  Outputs go to ``--out`` and are written atomically; ``meta.json``
in that directory records the tool version, the resolved configuration and its
hash.

Seeds
-----
All randomness derives from the single top-level ``seed``.  A purpose-specific
integer seed is ``SeedSequence(seed, spawn_key=(purpose, index))`` reduced to
one 32-bit word, with purposes

    0  data noise (simulate)          index 0
    1  chain for equation k (fit)     index k
    2  posterior-predictive draws     index 0
    3  Ishigami inputs (simulate)     index 0

The Monte Carlo estimate inside the ``tau_w`` rule uses its own fixed seed so
the hyperparameter does not move when the experiment seed changes.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import __version__
from . import dynamics as dyn
from . import library as lib
from .diagnostics import (
    GewekeUndefinedError, geweke_score, histogram_bins, inclusion_probabilities, posterior_predictive,
    summarize,
)
from .io import atomic_write_text, canonical_json, write_json
from .mcmc import ChainConfig, ChainError, load_chain, run_chain, save_chain
from .neuronized import (
    DEFAULT_MC_DRAWS, DEFAULT_MC_SEED, Activation, PriorConfig, alpha0_from_sparsity, select_tau_w,
    tau_w_horseshoe_calibration,
)
from .sindy import least_squares, stls

log = logging.getLogger("bsindy")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

PURPOSE_NOISE, PURPOSE_CHAIN, PURPOSE_PREDICT, PURPOSE_INPUTS = 0, 1, 2, 3

DEFAULT_X0 = {"pendulum": [1.0, 0.0], "lorenz": [-8.0, 8.0, 27.0]}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration / data layout."""


def sub_seed(seed: int, purpose: int, index: int = 0) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=(purpose, index))
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# configuration


def _check_keys(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section '{where}' must be a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section '{where}'; allowed: {sorted(known)}")


def _section(cls, d, where):
    d = {} if d is None else d
    _check_keys(cls, d, where)
    return cls(**d)


@dataclass
class SystemSection:
    preset: str = "lorenz"  # pendulum | lorenz | ishigami | custom
    params: dict = field(default_factory=dict)
    x0: Optional[list] = None
    terms: Optional[list] = None  # custom systems: term descriptors
    coef: Optional[list] = None  # custom systems: p x n coefficients

    def validate(self):
        if self.preset not in ("pendulum", "lorenz", "ishigami", "custom"):
            raise ConfigError(f"system.preset must be pendulum, lorenz, ishigami or custom, got {self.preset!r}")
        if self.preset == "custom" and (self.terms is None or self.coef is None):
            raise ConfigError("a custom system needs system.terms and system.coef")

    def build(self) -> dyn.SystemDef:
        if self.preset == "custom":
            return lib.term_system(lib.spec_from_list(self.terms), self.coef)
        return dyn.get_preset(self.preset, **self.params)

    def initial_state(self) -> list:
        if self.x0 is not None:
            return list(self.x0)
        if self.preset in DEFAULT_X0:
            return DEFAULT_X0[self.preset]
        raise ConfigError("system.x0 is required for this system")


@dataclass
class DataSection:
    t0: float = 0.0
    T: float = 100.0
    dt: Optional[float] = 0.1
    m: Optional[int] = None  # if set, m equally spaced points on [t0, T]
    noise: float = 0.0
    derivative: str = "forward-euler"
    window: int = 5
    substeps: int = dyn.DEFAULT_SUBSTEPS

    def validate(self):
        if self.noise < 0:
            raise ConfigError("data.noise must be non-negative")
        if self.derivative not in dyn.DERIVATIVE_METHODS:
            raise ConfigError(f"data.derivative must be one of {dyn.DERIVATIVE_METHODS}")
        if self.m is None and not (self.dt and self.dt > 0):
            raise ConfigError("data needs either dt > 0 or m")
        if self.m is not None and self.m < 2:
            raise ConfigError("data.m must be >= 2")
        if not self.T > self.t0:
            raise ConfigError("data.T must exceed data.t0")

    def grid(self) -> np.ndarray:
        if self.m is not None:
            return np.linspace(self.t0, self.T, int(self.m))
        steps = int(round((self.T - self.t0) / self.dt))
        return self.t0 + self.dt * np.arange(steps + 1)


@dataclass
class LibrarySection:
    preset: Optional[str] = None  # lorenz | ishigami
    degree: Optional[int] = None  # polynomial library up to this degree
    constant: bool = False
    terms: Optional[list] = None
    normalize: bool = False
    period: Optional[float] = None

    def validate(self):
        given = sum(x is not None for x in (self.preset, self.degree, self.terms))
        if given != 1:
            raise ConfigError("library needs exactly one of preset, degree or terms")
        if self.preset is not None and self.preset not in ("lorenz", "ishigami"):
            raise ConfigError(f"library.preset must be lorenz or ishigami, got {self.preset!r}")
        if self.terms is not None:
            try:
                lib.spec_from_list(self.terms)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"library.terms: {exc}") from exc

    def build(self, n: int) -> list:
        if self.preset == "lorenz":
            return lib.lorenz_library()
        if self.preset == "ishigami":
            return lib.ishigami_library()
        if self.degree is not None:
            return lib.polynomial_terms(n, int(self.degree), self.constant)
        return lib.spec_from_list(self.terms)


@dataclass
class StlsSection:
    lam: float = 0.1
    k_max: int = 10


@dataclass
class BayesSection:
    activation: Any = "relu"
    alpha0: Optional[float] = 0.0
    eta: Optional[float] = None  # expected non-zero fraction; overrides alpha0
    tau_w: Any = "auto"  # number | "auto" | {"zero_fraction": q}
    mc_draws: int = DEFAULT_MC_DRAWS
    iterations: int = 10_000
    burn_in: float = 0.2
    rw_step: float = 0.5
    sigma2: Any = "learn"  # number (fixed) | "learn" | "noise" (fixed at data.noise^2)
    a0: float = 1.0
    b0: float = 1.0
    sigma_init: float = 1.0
    alpha_update: str = "metropolis"
    rescale: bool = True

    def activation_obj(self) -> Activation:
        return Activation.from_dict(self.activation)

    def resolved_alpha0(self) -> float:
        if self.eta is not None:
            return alpha0_from_sparsity(self.eta)
        return float(self.alpha0 or 0.0)


@dataclass
class FitSection:
    mode: str = "bayes"
    stls: StlsSection = field(default_factory=StlsSection)
    bayes: BayesSection = field(default_factory=BayesSection)
    level: float = 0.9

    def validate(self):
        if self.mode not in ("stls", "bayes"):
            raise ConfigError(f"fit.mode must be stls or bayes, got {self.mode!r}")
        b = self.bayes
        try:
            b.activation_obj()
            if b.eta is not None:
                alpha0_from_sparsity(b.eta)
        except ValueError as exc:
            raise ConfigError(f"fit.bayes: {exc}") from exc
        if not (isinstance(b.sigma2, (int, float)) and b.sigma2 > 0) and b.sigma2 not in ("learn", "noise"):
            raise ConfigError("fit.bayes.sigma2 must be a positive number, 'learn' or 'noise'")
        if not (b.tau_w == "auto" or (isinstance(b.tau_w, (int, float)) and b.tau_w > 0)
                or (isinstance(b.tau_w, dict) and set(b.tau_w) == {"zero_fraction"})):
            raise ConfigError("fit.bayes.tau_w must be 'auto', a positive number or {zero_fraction: q}")
        if self.stls.lam < 0 or self.stls.k_max < 1:
            raise ConfigError("fit.stls needs lam >= 0 and k_max >= 1")
        if not 0 < self.level < 1:
            raise ConfigError("fit.level must lie in (0, 1)")


@dataclass
class PredictSection:
    x0: Optional[list] = None
    t0: float = 0.0
    T: Optional[float] = None
    dt: Optional[float] = None
    m: Optional[int] = None
    n_draws: int = 100
    level: float = 0.9
    substeps: int = dyn.DEFAULT_SUBSTEPS

    def validate(self):
        if self.n_draws < 1:
            raise ConfigError("predict.n_draws must be >= 1")
        if not 0 < self.level < 1:
            raise ConfigError("predict.level must lie in (0, 1)")


@dataclass
class DiagnoseSection:
    bins: int = 50
    level: float = 0.9


@dataclass
class ExperimentConfig:
    seed: int = 0
    system: SystemSection = field(default_factory=SystemSection)
    data: DataSection = field(default_factory=DataSection)
    library: LibrarySection = field(default_factory=lambda: LibrarySection(preset="lorenz"))
    fit: FitSection = field(default_factory=FitSection)
    predict: PredictSection = field(default_factory=PredictSection)
    diagnose: DiagnoseSection = field(default_factory=DiagnoseSection)

    def validate(self) -> "ExperimentConfig":
        for sec in (self.system, self.data, self.library, self.fit, self.predict):
            sec.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        d = dict(d or {})
        _check_keys(cls, d, "<top level>")
        fit = dict(d.get("fit") or {})
        _check_keys(FitSection, fit, "fit")
        fit_sec = FitSection(
            mode=fit.get("mode", "bayes"),
            stls=_section(StlsSection, fit.get("stls"), "fit.stls"),
            bayes=_section(BayesSection, fit.get("bayes"), "fit.bayes"),
            level=fit.get("level", 0.9),
        )
        try:
            cfg = cls(
                seed=int(d.get("seed", 0)),
                system=_section(SystemSection, d.get("system"), "system"),
                data=_section(DataSection, d.get("data"), "data"),
                library=_section(LibrarySection, d.get("library"), "library") if "library" in d
                else LibrarySection(preset="lorenz"),
                fit=fit_sec,
                predict=_section(PredictSection, d.get("predict"), "predict"),
                diagnose=_section(DiagnoseSection, d.get("diagnose"), "diagnose"),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        return cls.from_dict(doc)

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def preset_names() -> list:
    root = resources.files("bsindy") / "presets"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def load_config(path_or_name: Optional[str]) -> ExperimentConfig:
    """Read a config file; a bare preset name (``lorenz_relu``) loads the packaged copy."""
    if path_or_name is None:
        return ExperimentConfig().validate()
    path = Path(path_or_name)
    if path.exists():
        return ExperimentConfig.loads(path.read_text())
    name = path_or_name[:-4] if path_or_name.endswith(".cfg") else path_or_name
    res = resources.files("bsindy") / "presets" / f"{name}.cfg"
    if res.is_file():
        return ExperimentConfig.loads(res.read_text())
    raise FileNotFoundError(f"config {path_or_name!r} not found (packaged presets: {preset_names()})")


def default_config_for(preset: str) -> ExperimentConfig:
    """Reasonable defaults when only ``--preset`` is given."""
    cfg = ExperimentConfig()
    if preset == "pendulum":
        cfg.data = DataSection(T=4.0, dt=None, m=50)
        cfg.library = LibrarySection(degree=2)
    elif preset == "ishigami":
        cfg.data = DataSection(T=4999.0, dt=None, m=5000, noise=0.1)
        cfg.library = LibrarySection(preset="ishigami")
    cfg.system = SystemSection(preset=preset)
    return cfg


# ---------------------------------------------------------------------------
# shared helpers


def _write_meta(out: Path, command: str, cfg: ExperimentConfig, extra: dict | None = None):
    doc = {
        "tool": "bsindy",
        "version": __version__,
        "command": command,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
    }
    if extra:
        doc.update(extra)
    write_json(out / "meta.json", doc)


def _read_table(path: Path):
    try:
        return dyn.read_table_csv(path)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_regression_data(data_dir: Path):
    """``(t, X, state_names, z, target_names)`` with rows of ``X`` aligned to ``z``."""
    t_x, X, xnames = _read_table(data_dir / "trajectory.csv")
    t_z, Z, znames = _read_table(data_dir / "derivatives.csv")
    idx = np.searchsorted(t_x, t_z)
    if np.any(idx >= t_x.size) or not np.array_equal(t_x[np.minimum(idx, t_x.size - 1)], t_z):
        raise ConfigError(
            f"derivative times in {data_dir / 'derivatives.csv'} do not match trajectory times")
    return t_x[idx], X[idx], xnames, Z, znames


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    if cfg.system.preset == "ishigami":
        m = int(d.m) if d.m is not None else d.grid().size
        coef = cfg.system.params.get("coef", list(lib.ISHIGAMI_COEF))
        P, y = lib.ishigami_regression(m, coef, d.noise, sub_seed(cfg.seed, PURPOSE_INPUTS))
        t = np.arange(m, dtype=float)
        atomic_write_text(out / "trajectory.csv", dyn.trajectory_to_csv(dyn.Trajectory(t, P)))
        atomic_write_text(out / "derivatives.csv", _table_text(t, y[:, None], ["y"]))
        info = {"rows": m, "targets": 1}
    else:
        sys_def = cfg.system.build()
        x0 = cfg.system.initial_state()
        if len(x0) != sys_def.n:
            raise ConfigError(f"system.x0 has {len(x0)} entries, {sys_def.name} has {sys_def.n} states")
        traj = dyn.integrate(sys_def, x0, d.grid(), d.substeps)
        traj = replace(traj, seed=cfg.seed)
        dd = dyn.compute_derivatives(traj, d.derivative, sys_def, d.window)
        dd = dyn.add_gaussian_noise(dd, d.noise, sub_seed(cfg.seed, PURPOSE_NOISE))
        atomic_write_text(out / "trajectory.csv", dyn.trajectory_to_csv(traj))
        atomic_write_text(out / "derivatives.csv", dyn.derivatives_to_csv(dd))
        info = {"rows": traj.m, "targets": dd.z.shape[1], "derivative_rows": dd.z.shape[0]}
    _write_meta(out, "simulate", cfg, {"outputs": ["trajectory.csv", "derivatives.csv"], **info})
    return info


def _table_text(t, values, names) -> str:
    import io

    buf = io.StringIO()
    dyn.write_table_csv(buf, t, values, names)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# fit


def _design(cfg: ExperimentConfig, t, X, xnames, Z):
    terms = cfg.library.build(X.shape[1])
    for term in terms:
        if term.max_index() >= X.shape[1]:
            raise ConfigError(
                f"library term {term.label()} needs state column x{term.max_index() + 1} "
                f"but the data has columns {xnames}")
    try:
        dm = lib.build_design(X, terms, t, cfg.library.period)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return dm, Z[dm.row_offset:]


def _resolve_tau_w(b: BayesSection, D, z, act, alpha0) -> float:
    if isinstance(b.tau_w, (int, float)):
        return float(b.tau_w)
    if isinstance(b.tau_w, dict):
        return tau_w_horseshoe_calibration(float(b.tau_w["zero_fraction"]), act, alpha0, b.mc_draws,
                                           DEFAULT_MC_SEED)
    return select_tau_w(least_squares(D, z), D.shape[1], act, alpha0, b.mc_draws, DEFAULT_MC_SEED)


def _fit_equation(args):
    """Worker for one equation; module level so it can run in a subprocess."""
    cfg_dict, k, D, z, labels, noise = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    fs = cfg.fit
    if fs.mode == "stls":
        return k, stls(D, z, fs.stls.lam, fs.stls.k_max), None
    b = fs.bayes
    act = b.activation_obj()
    alpha0 = b.resolved_alpha0()
    tau_w = _resolve_tau_w(b, D, z, act, alpha0)
    if b.sigma2 == "learn":
        s2 = dict(learn_sigma2=True)
    else:
        fixed = noise ** 2 if b.sigma2 == "noise" else float(b.sigma2)
        if not fixed > 0:
            raise ConfigError("fit.bayes.sigma2 = 'noise' needs data noise > 0")
        s2 = dict(sigma2=fixed)
    try:
        ccfg = ChainConfig(PriorConfig(act, alpha0, tau_w), b.iterations, b.burn_in, b.rw_step,
                           a0=b.a0, b0=b.b0, sigma_init=b.sigma_init, seed=sub_seed(cfg.seed, PURPOSE_CHAIN, k),
                           alpha_update=b.alpha_update, rescale=b.rescale, **s2)
    except ValueError as exc:
        raise ConfigError(f"fit.bayes: {exc}") from exc
    chain = run_chain(D, z, ccfg, labels)
    return k, chain, summarize(chain, fs.level)


def cmd_fit(cfg: ExperimentConfig, data_dir: Path, out: Path, jobs: int = 1) -> list:
    out.mkdir(parents=True, exist_ok=True)
    t, X, xnames, Z, znames = load_regression_data(data_dir)
    dm, Z = _design(cfg, t, X, xnames, Z)
    noise = _data_noise(data_dir, cfg)
    tasks, records = [], []
    for k in range(Z.shape[1]):
        D, z, rec, dmk = dm.D, Z[:, k], None, dm
        if cfg.library.normalize:
            try:
                dmk, z, rec = lib.normalize(dm, z)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            D = dmk.D
        records.append((dmk, rec))
        tasks.append((cfg.to_dict(), k, D, z, dmk.labels, noise))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            results = list(pool.map(_fit_equation, tasks))
    else:
        results = [_fit_equation(task) for task in tasks]

    summary = []
    for (k, result, report), (dmk, rec) in zip(results, records):
        name = znames[k] if k < len(znames) else f"eq{k + 1}"
        extra = {"equation": name, "terms": lib.spec_to_list(dmk.terms),
                 "norm": rec.to_dict() if rec is not None else None,
                 "all_terms": lib.spec_to_list(dm.terms)}
        if cfg.fit.mode == "stls":
            doc = result.to_dict(dmk.labels)
            if rec is not None:
                doc["xi_original"] = lib.denormalize_coefficients(result.xi, rec).tolist()
            doc.update(extra)
            write_json(out / f"stls_eq{k + 1}.json", doc)
            summary.append({"equation": name, "support": doc["support_labels"], "xi": doc["xi"]})
        else:
            save_chain(result, out / f"chain_eq{k + 1}", extra)
            doc = report.to_dict()
            doc.update(extra)
            if rec is not None:
                doc["mean_original"] = lib.denormalize_coefficients(report.mean, rec).tolist()
            write_json(out / f"report_eq{k + 1}.json", doc)
            summary.append({"equation": name, "median_model": doc["median_model_labels"],
                            "mean": doc["mean"], "geweke_ok": report.geweke_ok()})
    _write_meta(out, "fit", cfg, {"data": str(data_dir), "equations": summary})
    return summary


def _data_noise(data_dir: Path, cfg: ExperimentConfig) -> float:
    """Noise level recorded by ``simulate`` next to the data, else the config value."""
    meta = data_dir / "meta.json"
    if meta.is_file():
        import json

        try:
            return float(json.loads(meta.read_text())["config"]["data"]["noise"])
        except (KeyError, TypeError, ValueError):
            pass
    return float(cfg.data.noise)


# ---------------------------------------------------------------------------
# diagnose


def diagnose_chain(chain, bins: int = 50, level: float = 0.9):
    """Geweke table, inclusion, acceptance and histogram bins for one chain."""
    xi = chain.post()
    warnings_ = []
    basis = xi
    if xi.shape[0] < 20:
        msg = (f"chain has only {xi.shape[0]} post-burn-in samples (burn-in {chain.burn_in} of "
               f"{chain.n_iter}); scores use the whole chain where defined")
        log.warning(msg)
        warnings_.append(msg)
        basis = chain.xi
    z = []
    for j in range(chain.p):
        try:
            z.append(geweke_score(basis[:, j]) if basis.shape[0] >= 20 else None)
        except GewekeUndefinedError:
            z.append(None)
    incl = inclusion_probabilities(basis, None if chain.prior.activation.kind != "relu" else 0.0) \
        if basis.shape[0] else np.full(chain.p, np.nan)
    labels = list(chain.labels) or [f"xi{j + 1}" for j in range(chain.p)]
    defined = [v for v, pj in zip(z, incl) if v is not None and pj > 0.5]
    doc = {
        "labels": labels,
        "geweke": z,
        "geweke_all_below_2": bool(all(abs(v) < 2 for v in defined)),
        "inclusion": [None if not np.isfinite(v) else float(v) for v in incl],
        "median_model": [labels[j] for j in range(chain.p) if incl[j] > 0.5],
        "acceptance_rate": [None if not np.isfinite(v) else float(v) for v in chain.acceptance_rate],
        "rescale_acceptance": chain.meta.get("rescale_acceptance"),
        "post_burn_in_samples": int(xi.shape[0]),
        "iterations": chain.n_iter,
        "warnings": warnings_,
    }
    rows = ["term,left,right,count"]
    if basis.shape[0]:
        for lab, (counts, edges) in zip(labels, histogram_bins(basis, bins)):
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                rows.append(f"{lab},{float(lo)!r},{float(hi)!r},{int(c)}")
    return doc, "\n".join(rows) + "\n"


def cmd_diagnose(cfg: ExperimentConfig, chain_paths: list, out: Path) -> list:
    out.mkdir(parents=True, exist_ok=True)
    docs = []
    for path in chain_paths:
        chain = _load_chain(path)
        name = Path(path).name
        for suffix in (".npz", ".json"):
            if name.endswith(suffix):
                name = name[: -len(suffix)]
        doc, hist = diagnose_chain(chain, cfg.diagnose.bins, cfg.diagnose.level)
        doc["chain"] = name
        write_json(out / f"diagnostics_{name}.json", doc)
        atomic_write_text(out / f"hist_{name}.csv", hist)
        docs.append(doc)
    _write_meta(out, "diagnose", cfg, {"chains": [d["chain"] for d in docs]})
    return docs


# ---------------------------------------------------------------------------
# predict


def _load_chain(path):
    try:
        return load_chain(path)
    except ValueError as exc:
        raise OSError(f"cannot read chain {path}: {exc}") from exc


def _chain_files(fit_dir: Path) -> list:
    files = sorted(fit_dir.glob("chain_eq*.json"), key=lambda p: int(p.stem[len("chain_eq"):]))
    if not files:
        raise FileNotFoundError(f"no chain_eq*.json files in {fit_dir}")
    return files


def predictive_samples(chain_paths: list):
    """Stack post-burn-in coefficient samples of all equations as ``(S, p, n)`` plus the library."""
    import json

    cols, terms, S = [], None, None
    for path in chain_paths:
        chain = _load_chain(path)
        side = json.loads(Path(path).with_suffix(".json").read_text())
        xi = chain.post()
        rec = side.get("norm")
        if rec is not None:
            rec = lib.NormRecord.from_dict(rec)
            if rec.constant_index is None:
                raise ConfigError("normalised fits need a constant term to be simulated")
            xi = lib.denormalize_coefficients(xi.T, rec).T
            eq_terms = side["all_terms"]
        else:
            eq_terms = side["terms"]
        if terms is None:
            terms = eq_terms
        elif eq_terms != terms:
            raise ConfigError(f"chain {path} uses a different library from the first chain")
        if S is not None and xi.shape[0] != S:
            n = min(S, xi.shape[0])
            cols = [c[:n] for c in cols]
            xi = xi[:n]
        S = xi.shape[0]
        cols.append(xi)
    if S == 0:
        raise ConfigError("chains have no post-burn-in samples")
    return np.stack(cols, axis=-1), lib.spec_from_list(terms)


def cmd_predict(cfg: ExperimentConfig, chain_paths: list, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    pc = cfg.predict
    samples, terms = predictive_samples(chain_paths)
    n = samples.shape[2]
    x0 = pc.x0 if pc.x0 is not None else cfg.system.initial_state()
    if len(x0) != n:
        raise ConfigError(f"predict.x0 has {len(x0)} entries but the chains describe {n} equations")
    T = pc.T if pc.T is not None else cfg.data.T
    if pc.m is not None:
        t = np.linspace(pc.t0, T, int(pc.m))
    else:
        dt = pc.dt if pc.dt is not None else (cfg.data.dt or (cfg.data.T - cfg.data.t0) / (cfg.data.m - 1))
        t = pc.t0 + dt * np.arange(int(round((T - pc.t0) / dt)) + 1)
    ens = posterior_predictive(samples, terms, x0, t, pc.n_draws, pc.level,
                               sub_seed(cfg.seed, PURPOSE_PREDICT), pc.substeps)
    atomic_write_text(out / "band.csv", ens.to_csv())
    info = {"n_draws": ens.n_draws, "n_diverged": ens.n_diverged, "n_retained": int(ens.trajectories.shape[0]),
            "level": ens.level, "rows": int(t.size),
            "mean_width": [float(w) for w in ens.width.mean(axis=0)]}
    write_json(out / "predict.json", info)
    _write_meta(out, "predict", cfg, {"chains": [str(p) for p in chain_paths], **info})
    return info


# ---------------------------------------------------------------------------
# argument parsing


def _common(parser):
    g = parser.add_argument_group("global options")
    g.add_argument("--config", help="YAML experiment file or packaged preset name")
    g.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    g.add_argument("--out", default="out", help="output directory (default: out)")
    g.add_argument("--jobs", type=int, default=1, help="parallel equation fits (default: 1)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsindy", description=__doc__.split("\n\n")[0],
                                     allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"bsindy {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="integrate a system and write trajectory/derivative CSVs",
                       allow_abbrev=False)
    _common(p)
    p.add_argument("--preset", choices=["pendulum", "lorenz", "ishigami"], help="built-in system")
    p.add_argument("--dt", type=float, help="output time step")
    p.add_argument("--T", type=float, dest="T", help="final time")
    p.add_argument("--m", type=int, help="number of equally spaced samples (replaces --dt)")
    p.add_argument("--noise", type=float, help="derivative noise amplitude sigma_eta")
    p.add_argument("--derivative", choices=dyn.DERIVATIVE_METHODS, help="derivative method")

    p = sub.add_parser("fit", help="fit every equation with stls or the Bayesian sampler", allow_abbrev=False)
    _common(p)
    p.add_argument("--data", help="directory holding trajectory.csv and derivatives.csv (default: --out)")
    p.add_argument("--mode", choices=["stls", "bayes"], help="override fit.mode")
    p.add_argument("--iterations", type=int, help="override fit.bayes.iterations")

    p = sub.add_parser("diagnose", help="Geweke table, inclusion and histograms for saved chains",
                       allow_abbrev=False)
    _common(p)
    p.add_argument("chains", nargs="*", help="chain files (default: chain_eq*.json under --fit)")
    p.add_argument("--fit", help="directory written by 'fit'")
    p.add_argument("--bins", type=int, help="histogram bins")

    p = sub.add_parser("predict", help="posterior-predictive band from saved chains", allow_abbrev=False)
    _common(p)
    p.add_argument("chains", nargs="*", help="chain files, one per equation in state order")
    p.add_argument("--fit", help="directory written by 'fit'")
    p.add_argument("--x0", type=float, nargs="+", help="initial state")
    p.add_argument("--T", type=float, dest="T", help="final time")
    p.add_argument("--dt", type=float, help="output time step")
    p.add_argument("--m", type=int, help="number of equally spaced output times")
    p.add_argument("--n-draws", type=int, dest="n_draws", help="posterior draws")
    p.add_argument("--level", type=float, help="band level in (0, 1)")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.command == "simulate":
        for key in ("dt", "T", "m", "noise", "derivative"):
            v = getattr(args, key)
            if v is not None:
                d["data"][key] = v
        if args.m is not None:
            d["data"]["m"] = args.m
        elif args.dt is not None:
            d["data"]["m"] = None
    elif args.command == "fit":
        if args.mode is not None:
            d["fit"]["mode"] = args.mode
        if args.iterations is not None:
            d["fit"]["bayes"]["iterations"] = args.iterations
    elif args.command == "diagnose":
        if args.bins is not None:
            d["diagnose"]["bins"] = args.bins
    elif args.command == "predict":
        for key in ("x0", "T", "dt", "m", "n_draws", "level"):
            v = getattr(args, key)
            if v is not None:
                d["predict"][key] = v
        if args.m is not None:
            d["predict"]["dt"] = None
    return ExperimentConfig.from_dict(d)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    out = Path(args.out)
    try:
        if args.command == "simulate" and args.config is None and args.preset is not None:
            cfg = default_config_for(args.preset)
        else:
            cfg = load_config(args.config)
            if args.command == "simulate" and args.preset is not None and args.preset != cfg.system.preset:
                base = default_config_for(args.preset)
                cfg = replace(cfg, system=base.system, library=base.library)
        cfg = _apply_overrides(cfg, args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")

        if args.command == "simulate":
            cmd_simulate(cfg, out)
        elif args.command == "fit":
            cmd_fit(cfg, Path(args.data) if args.data else out, out, args.jobs)
        elif args.command in ("diagnose", "predict"):
            paths = [Path(c) for c in args.chains]
            if not paths:
                paths = _chain_files(Path(args.fit) if args.fit else out)
            if args.command == "diagnose":
                cmd_diagnose(cfg, paths, out)
            else:
                cmd_predict(cfg, paths, out)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (dyn.DivergenceError, ChainError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        # malformed files (corrupt chain, bad CSV) and library-level validation
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
