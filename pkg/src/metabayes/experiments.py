"""Seeded Monte Carlo studies: contraction, exit times, annealing, LAN residuals."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Any

import numpy as np
import yaml
from numpy.polynomial.hermite_e import hermegauss

from . import dynamics as dyn
from .bounds import BoundConfig, BoundCurve, bound_H_hat, contraction_radius, meta_window, prior_tail
from .dynamics import Domain, DriftFamily, as_param
from .errors import AssumptionViolated, InfeasibleRegime, InvalidArgument, NonConvex, NotMetastable
from .inference import (AffineAccumulator, Grid, PosteriorGrid, Prior, anneal, ball_mass,
                        lan_from_sums, marginalize, posterior_from_statistics)
from .measure import FisherInfo, ergodic_measure, fisher_from_mean, fisher_info
from .spectral import (SpectralSummary, bakry_emery_gamma, dirichlet_mean_exit_time,
                       eyring_kramers_gamma, locate_critical_points)

SQRT2 = math.sqrt(2.0)
MAX_PREDICTED_EXIT = 1e7
CENSOR_FACTOR = 10.0

# seed streams, one per role so studies never share noise
STREAM_PATHS, STREAM_EXIT, STREAM_LEFT, STREAM_RIGHT, STREAM_LAN, STREAM_PRIOR, STREAM_BURN = range(7)

FAMILIES = {
    "double_well": dyn.double_well_family,
    "degenerate_double_well": dyn.degenerate_double_well_family,
    "quadratic": dyn.quadratic_family,
    "ou": dyn.ou_family,
    "bump_double_well": dyn.bump_double_well_family,
}
STUDIES = ("contraction", "exit", "anneal", "lan_residual")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class FamilySpec:
    name: str
    sigma: float
    theta0: list | None = None
    cutoff: dict | None = None          # {"point": float, "side": "left" | "right"}
    params: dict = field(default_factory=dict)

    def base(self) -> DriftFamily:
        if self.name not in FAMILIES:
            raise InvalidArgument(f"family.name: unknown family {self.name!r}; "
                                  f"choose from {sorted(FAMILIES)}")
        if not self.sigma > 0:
            raise InvalidArgument("family.sigma must be positive")
        return FAMILIES[self.name](self.sigma, **self.params)

    def theta(self, family: DriftFamily) -> np.ndarray:
        th = self.theta0 if self.theta0 is not None else family.meta.get("theta0")
        return as_param(th, family.dim_param)

    def build(self) -> DriftFamily:
        base = self.base()
        if not self.cutoff:
            return base
        return dyn.cutoff_family(base, float(self.cutoff["point"]),
                                 side=self.cutoff.get("side", "left"),
                                 reference_theta=self.theta(base))


@dataclass
class PriorSpec:
    bounds: list
    n_nodes: list
    kind: str = "uniform"
    mean: list | None = None
    std: float | None = None
    hyper_mean_std: float | None = None
    rho_std: float = 1.0

    def build(self, theta0) -> Prior:
        if len(self.bounds) != len(self.n_nodes):
            raise InvalidArgument("prior.bounds and prior.n_nodes differ in length")
        grid = Grid.regular([tuple(b) for b in self.bounds], [int(n) for n in self.n_nodes])
        if self.kind == "uniform":
            prior = Prior.uniform(grid)
        elif self.kind == "gaussian":
            if self.std is None or not self.std > 0:
                raise InvalidArgument("prior.std must be positive for a gaussian prior")
            prior = Prior.gaussian(grid, self.mean if self.mean is not None else theta0, self.std)
        else:
            raise InvalidArgument(f"prior.kind: unknown kind {self.kind!r}")
        if self.hyper_mean_std is not None:
            prior = Prior(grid, prior.base_weights, hyper_mean_std=float(self.hyper_mean_std),
                          rho_std=float(self.rho_std), center=theta0)
        prior.check_contains(theta0)
        return prior


@dataclass
class ExperimentConfig:
    study: str
    family: FamilySpec
    n_paths: int
    t_checkpoints: list
    dt: float
    master_seed: int
    prior: PriorSpec | None = None
    bounds: BoundConfig = field(default_factory=BoundConfig)
    x0: list | None = None
    eta_grid: list = field(default_factory=lambda: [0.05, 0.1, 0.25, 0.5])
    n_jobs: int = 1
    strict: bool = False
    exit: dict = field(default_factory=dict)
    anneal: dict = field(default_factory=dict)
    lan: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.study not in STUDIES:
            raise InvalidArgument(f"study: must be one of {STUDIES}")
        if int(self.n_paths) < 1:
            raise InvalidArgument("n_paths: must be >= 1")
        self.n_paths = int(self.n_paths)
        if not self.dt > 0:
            raise InvalidArgument("dt: must be positive")
        ts = [float(t) for t in self.t_checkpoints]
        if not ts or any(b <= a for a, b in zip(ts, ts[1:])) or ts[0] < 0:
            raise InvalidArgument("t_checkpoints: must be a nonempty increasing list of times >= 0")
        for t in ts:
            k = round(t / self.dt)
            if abs(k * self.dt - t) > 1e-9 * max(t, self.dt):
                raise InvalidArgument(f"t_checkpoints: {t} is not a multiple of dt={self.dt}")
        self.t_checkpoints = ts
        if any(not 0 < e < 1 for e in self.eta_grid):
            raise InvalidArgument("eta_grid: values must lie in (0, 1)")
        self.n_jobs = max(1, int(self.n_jobs))
        self.master_seed = int(self.master_seed)

    @property
    def checkpoint_steps(self) -> list:
        return [int(round(t / self.dt)) for t in self.t_checkpoints]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise InvalidArgument("config must be a mapping")
        d = dict(d)
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise InvalidArgument(f"unknown config fields: {sorted(unknown)}")
        for req in ("study", "family", "n_paths", "t_checkpoints", "dt", "master_seed"):
            if req not in d:
                raise InvalidArgument(f"{req}: required field missing")
        fam = d["family"]
        if not isinstance(fam, dict) or "name" not in fam or "sigma" not in fam:
            raise InvalidArgument("family: needs 'name' and 'sigma'")
        fam = dict(fam)
        d["family"] = FamilySpec(name=fam.pop("name"), sigma=float(fam.pop("sigma")),
                                 theta0=fam.pop("theta0", None), cutoff=fam.pop("cutoff", None),
                                 params=fam.pop("params", {}) or {})
        if fam:
            raise InvalidArgument(f"family: unknown fields {sorted(fam)}")
        if d.get("prior") is not None:
            try:
                d["prior"] = PriorSpec(**d["prior"])
            except TypeError as exc:
                raise InvalidArgument(f"prior: {exc}") from None
        d["bounds"] = BoundConfig.from_dict(d.get("bounds"))
        d["dt"] = float(d["dt"])
        for key in ("exit", "anneal", "lan"):
            d[key] = dict(d.get(key) or {})
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        text = FsPath(path).read_text()
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
            raise InvalidArgument(f"config parse error{where}: {exc}") from None
        return cls.from_dict(data)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class Table:
    columns: list
    rows: list

    def column(self, name) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])


@dataclass
class ExperimentReport:
    study: str
    constants: dict
    per_checkpoint: Table | None = None
    per_path: Table | None = None
    exit_summary: dict | None = None
    bound_curves: BoundCurve | None = None
    extra_tables: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def tables(self) -> dict:
        out = {}
        if self.per_checkpoint is not None:
            out["checkpoints"] = self.per_checkpoint
        if self.per_path is not None:
            out["paths"] = self.per_path
        out.update(self.extra_tables)
        return out


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "nan"
    return f"{v:.11e}"


def write_csv(path, table: Table) -> None:
    lines = [",".join(table.columns)]
    lines += [",".join(_fmt(v) for v in row) for row in table.rows]
    FsPath(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        return float(v) if math.isfinite(v) else str(float(v))
    return v


def write_manifest(path, manifest: dict) -> None:
    FsPath(path).write_text(json.dumps(_jsonable(manifest), sort_keys=True, indent=2) + "\n",
                            encoding="utf-8")


def write_report(report: ExperimentReport, out_dir, cfg: ExperimentConfig | None = None) -> list:
    """Write every table as ``<study>_<name>.csv`` plus ``manifest.json``; return paths."""
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, table in report.tables().items():
        p = out / f"{report.study}_{name}.csv"
        write_csv(p, table)
        written.append(p)
    from . import __version__
    manifest = {"study": report.study, "constants": report.constants, "notes": report.notes,
                "versions": {"metabayes": __version__, "numpy": np.__version__,
                             "scipy": __import__("scipy").__version__}}
    if report.exit_summary is not None:
        manifest["exit_summary"] = report.exit_summary
    if cfg is not None:
        manifest["config"] = _config_dict(cfg)
    p = out / "manifest.json"
    write_manifest(p, manifest)
    written.append(p)
    return written


def _config_dict(cfg: ExperimentConfig) -> dict:
    d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    d["family"] = dict(vars(cfg.family))
    d["prior"] = dict(vars(cfg.prior)) if cfg.prior is not None else None
    d["bounds"] = dict(vars(cfg.bounds))
    return d


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _seeds(master: int, n: int, stream: int) -> list:
    return [dyn.path_seed(master, i, stream) for i in range(n)]


def _deepest_minimum(family: DriftFamily, theta) -> float:
    wells = locate_critical_points(family, theta)
    if wells.n_minima == 0:
        raise InvalidArgument("family has no local minimum in the search box")
    return float(wells.minima[int(np.argmin(wells.minima_values))])


def default_start(family: DriftFamily, theta0) -> np.ndarray:
    """Deepest minimum; for full double wells the positive-side well."""
    wells = locate_critical_points(family, theta0)
    if wells.n_minima == 0:
        raise InvalidArgument("family has no local minimum in the search box")
    vals = wells.minima_values
    best = np.flatnonzero(np.isclose(vals, vals.min(), rtol=0, atol=1e-9))
    return np.array([float(wells.minima[best[-1]])])


def _fisher(family, theta0, strict=False) -> FisherInfo:
    return fisher_info(family, theta0, ergodic_measure(family, theta0, strict=strict))


def _gap(family, theta0) -> tuple:
    """(rate, kind): Bakry-Emery constant when convex, else the Eyring-Kramers gap."""
    try:
        return bakry_emery_gamma(family, theta0), "bakry_emery"
    except NonConvex:
        pass
    try:
        return eyring_kramers_gamma(locate_critical_points(family, theta0), family.sigma), \
            "eyring_kramers"
    except NotMetastable:
        return None, "none"


def stream_statistics(family, theta0, x0, dt, steps, seeds, n_jobs=1):
    """Affine statistics at checkpoint ``steps`` for each seed, grouped over threads.

    ``x0`` is a single state or one state per seed.
    """
    n_total = max(steps) if steps else 0
    x0 = np.asarray(x0, dtype=float)
    per_path_start = x0.ndim == 2
    groups = dyn._split(list(range(len(seeds))), n_jobs)

    def run(idx):
        acc = AffineAccumulator(family, theta0, steps, dt)
        start = x0[idx] if per_path_start else x0
        for k, block in dyn.iter_ensemble(family, theta0, start, dt, n_total,
                                          [seeds[i] for i in idx]):
            acc.update(k, block)
        return acc.result()

    if len(groups) == 1:
        parts = [run(groups[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(groups)) as pool:
            parts = list(pool.map(run, groups))
    return (np.concatenate([p.score for p in parts]), np.concatenate([p.info for p in parts]),
            np.concatenate([p.noise for p in parts]))


def _burned_in_starts(family, theta0, x0, dt, burn_time, seeds):
    n_burn = int(math.ceil(burn_time / dt))
    last = None
    for _, block in dyn.iter_ensemble(family, theta0, x0, dt, n_burn, seeds):
        last = block[:, -1]
    return np.array(last)


def _fit_exponent(t, y) -> float:
    t, y = np.asarray(t, float), np.asarray(y, float)
    ok = (t > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(t[ok]), np.log(y[ok]), 1)[0])


def _binomial_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n) if n else float("nan")


# ---------------------------------------------------------------------------
# contraction study
# ---------------------------------------------------------------------------

def run_contraction_study(cfg: ExperimentConfig) -> ExperimentReport:
    """Per-path grid posteriors at each checkpoint, ball masses at eps_t and PCCR fractions."""
    family = cfg.family.build()
    theta0 = cfg.family.theta(family)
    dyn._ensure_checked(family)
    if not family.is_affine:
        raise InvalidArgument("studies require a drift affine in theta")
    if cfg.prior is None:
        raise InvalidArgument("prior: required for a contraction study")
    prior = cfg.prior.build(theta0)
    fisher = _fisher(family, theta0, cfg.strict)
    rate, rate_kind = _gap(family, theta0)
    notes = []
    if not fisher.identifiable:
        notes.append(f"non-identifiable: s1={fisher.s1:.3e} below threshold {fisher.threshold:g}; "
                     "contraction radius and bounds not defined")
    x0 = as_param(cfg.x0) if cfg.x0 is not None else default_start(family, theta0)
    seeds = _seeds(cfg.master_seed, cfg.n_paths, STREAM_PATHS)
    steps = cfg.checkpoint_steps
    score, info, _ = stream_statistics(family, theta0, x0, cfg.dt, steps, seeds, cfg.n_jobs)

    spec = SpectralSummary(gamma=rate, gamma_hat=rate, lambda_exit=0.0)
    path_cols = ["t", "path", "seed", "log_evidence", "ball_mass_eps", "below_pccr"]
    p = family.dim_param
    path_cols += [f"mean_{j}" for j in range(p)] + [f"std_{j}" for j in range(p)]
    path_cols += [f"mode_{j}" for j in range(p)]
    path_rows = []
    cp_cols = ["t", "n_paths", "eps_t", "H_hat_sqrt", "mean_ball_mass", "frac_below_pccr",
               "pccr_se", "pccr_dominated", "mean_std", "min_log_evidence"]
    cp_cols += [f"frac_below_1m_eta_{e:g}" for e in cfg.eta_grid]
    cp_rows = []
    for j, (t, k) in enumerate(zip(cfg.t_checkpoints, steps)):
        eps = contraction_radius(fisher.s1, t, cfg.bounds) if (fisher.identifiable and t > 0) \
            else float("nan")
        h_sqrt = float("nan")
        if fisher.identifiable and rate is not None and t > 0:
            tail = prior_tail(fisher.s1, t, cfg.bounds, prior, theta0, seed=cfg.master_seed)
            h_sqrt = math.sqrt(bound_H_hat(spec, fisher.s1, t, cfg.bounds, tail))
        masses, stds, logev, below = [], [], [], []
        for i, seed in enumerate(seeds):
            pr = prior.realize(np.random.Generator(np.random.Philox(
                dyn.path_seed(cfg.master_seed, i, STREAM_PRIOR)))) if prior.is_random else prior
            if k == 0:
                post = PosteriorGrid(pr.grid, pr.log_weights.copy(), 0.0,
                                     exact_weights=pr.base_weights.copy())
            else:
                post = posterior_from_statistics(pr, theta0, score[i, j], info[i, j],
                                                 family.sigma, t)
            mass = ball_mass(post, theta0, eps) if np.isfinite(eps) else float("nan")
            lev = post.log_normalizer()
            sd = post.std()
            b = bool(np.isfinite(h_sqrt) and mass < 1.0 - h_sqrt)
            masses.append(mass)
            stds.append(sd)
            logev.append(lev)
            below.append(b)
            path_rows.append([t, i, seed, lev, mass, b, *post.mean(), *sd, *post.mode()])
        masses = np.array(masses)
        frac = float(np.mean(below))
        se = _binomial_se(frac, cfg.n_paths)
        dominated = bool(not np.isfinite(h_sqrt) or frac <= h_sqrt + 3 * se)
        eta_fracs = [float(np.mean(masses < 1 - e)) if np.isfinite(eps) else float("nan")
                     for e in cfg.eta_grid]
        cp_rows.append([t, cfg.n_paths, eps, h_sqrt, float(np.mean(masses)), frac, se, dominated,
                        float(np.mean(np.mean(stds, axis=1))), float(np.min(logev)), *eta_fracs])

    curves = None
    if fisher.identifiable and rate is not None:
        tpos = [t for t in cfg.t_checkpoints if t > 0]
        if tpos:
            curves = meta_window(tpos, spec, fisher.s1, fisher.s1, cfg.bounds, prior, theta0,
                                 lambda_exit=0.0)
    constants = dict(sigma=family.sigma, theta0=theta0, s1=fisher.s1,
                     identifiable=fisher.identifiable, rate=rate, rate_kind=rate_kind,
                     x0=x0, dt=cfg.dt, master_seed=cfg.master_seed, n_paths=cfg.n_paths,
                     family=family.name)
    return ExperimentReport("contraction", constants, Table(cp_cols, cp_rows),
                            Table(path_cols, path_rows), bound_curves=curves, notes=notes)


# ---------------------------------------------------------------------------
# exit study
# ---------------------------------------------------------------------------

def predicted_exit_mean(family: DriftFamily, theta0, lambda_exit: float | None = None) -> float:
    lam = lambda_exit
    if lam is None:
        lam = eyring_kramers_gamma(locate_critical_points(family, theta0), family.sigma)
    return 1.0 / lam


def run_exit_study(cfg: ExperimentConfig, domain: Domain | None = None) -> ExperimentReport:
    """First exit times from a well neighbourhood against the Eyring-Kramers prediction."""
    family = cfg.family.build()
    theta0 = cfg.family.theta(family)
    ex = cfg.exit
    if domain is None:
        domain = Domain(np.atleast_1d(ex.get("center", SQRT2)), float(ex.get("radius", 0.5)))
    predicted = predicted_exit_mean(family, theta0, ex.get("lambda_exit"))
    if predicted > MAX_PREDICTED_EXIT:
        raise InfeasibleRegime(
            f"predicted mean exit time {predicted:.3e} exceeds {MAX_PREDICTED_EXIT:.0e} time units "
            f"at sigma={family.sigma}", predicted_mean=predicted)
    x0 = as_param(cfg.x0) if cfg.x0 is not None else domain.center
    cap_time = CENSOR_FACTOR * predicted
    max_steps = int(math.ceil(cap_time / cfg.dt))
    seeds = _seeds(cfg.master_seed, cfg.n_paths, STREAM_EXIT)
    groups = dyn._split(list(range(len(seeds))), cfg.n_jobs)

    def run(idx):
        return dyn.first_exit_steps(family, theta0, x0, cfg.dt, max_steps,
                                    [seeds[i] for i in idx], domain)

    if len(groups) == 1:
        steps = run(groups[0])
    else:
        with ThreadPoolExecutor(max_workers=len(groups)) as pool:
            steps = np.concatenate(list(pool.map(run, groups)))
    exited = steps >= 0
    times = steps[exited] * cfg.dt
    n_exit = int(exited.sum())
    notes = []
    n_cens = int((~exited).sum())
    if n_cens:
        notes.append(f"{n_cens} paths censored at {cap_time:.4g}; excluded from the mean")
    mean = float(times.mean()) if n_exit else float("nan")
    exceed = float(np.mean(times > mean)) if n_exit else float("nan")
    mfpt = float("nan")
    if family.dim_state == 1:
        mfpt = dirichlet_mean_exit_time(family, theta0, domain, float(x0[0]))
    summary = dict(n_paths=cfg.n_paths, n_exits=n_exit, n_censored=n_cens, cap_time=cap_time,
                   mean_exit_time=mean,
                   median_exit_time=float(np.median(times)) if n_exit else float("nan"),
                   exceed_mean_fraction=exceed, predicted_mean=predicted,
                   ratio_to_prediction=mean / predicted, dirichlet_mean_exit_time=mfpt,
                   exponential_reference=math.exp(-1.0))
    rows = [[i, s, bool(e), st * cfg.dt if e else float("nan")]
            for i, (s, e, st) in enumerate(zip(seeds, exited, steps))]
    constants = dict(sigma=family.sigma, theta0=theta0, domain_center=domain.center,
                     domain_radius=domain.radius, x0=x0, dt=cfg.dt, master_seed=cfg.master_seed,
                     family=family.name)
    summary_table = Table(list(summary), [[summary[k] for k in summary]])
    return ExperimentReport("exit", constants, per_path=Table(["path", "seed", "exited",
                                                               "exit_time"], rows),
                            exit_summary=summary, extra_tables={"summary": summary_table},
                            notes=notes)


# ---------------------------------------------------------------------------
# annealing study
# ---------------------------------------------------------------------------

def thm_s_tilde(mean1: np.ndarray, mean2: np.ndarray, k: int = 1) -> float:
    """``max(min(s^2_1..s^2_k), min(s^1_{k+1}..s^1_p))`` with ``s^1`` ascending and
    ``s^2`` descending singular values (zero padded to p)."""
    p = mean1.shape[-1]
    if not 1 <= k < p:
        raise InvalidArgument("need 1 <= k < p")
    s1 = fisher_from_mean(mean1, 1.0).singular_values          # ascending
    s2 = fisher_from_mean(mean2, 1.0).singular_values[::-1]    # descending
    return float(max(s2[:k].min(), s1[k:].min()))


def run_anneal_study(cfg: ExperimentConfig) -> ExperimentReport:
    """Per-well cutoff posteriors, marginalized onto the visible axis and multiplied."""
    if cfg.family.name != "bump_double_well":
        raise InvalidArgument("family.name: annealing study needs bump_double_well")
    base = cfg.family.base()
    theta0 = cfg.family.theta(base)
    if cfg.prior is None or len(cfg.prior.bounds) != 2:
        raise InvalidArgument("prior: a two-axis prior grid is required")
    prior = cfg.prior.build(theta0)
    an = cfg.anneal
    offset = float(an.get("cut_offset", 0.5))
    cross_tol = float(an.get("cross_tol", 0.1))
    k = int(an.get("k", 1))
    # left well sees axis 0, right well axis 1
    wells = {
        "left": dict(center=-SQRT2, cut=-SQRT2 + offset, side="right", axis=0,
                     stream=STREAM_LEFT),
        "right": dict(center=SQRT2, cut=SQRT2 - offset, side="left", axis=1,
                      stream=STREAM_RIGHT),
    }
    full_fisher = _fisher(base, theta0, cfg.strict)
    means = {}
    for name, w in wells.items():
        fam = dyn.cutoff_family(base, w["cut"], side=w["side"], reference_theta=theta0)
        w["family"] = fam
        fi = _fisher(fam, theta0, cfg.strict)
        w["fisher"] = fi
        m = fi.mean_dparam_drift[0]
        means[name] = fi.mean_dparam_drift
        own, foreign = abs(m[w["axis"]]), abs(m[1 - w["axis"]])
        w["own"], w["foreign"] = float(own), float(foreign)
        if foreign > cross_tol * own:
            raise AssumptionViolated(
                f"{name} well: foreign Fisher entry {foreign:.3g} exceeds {cross_tol} x own "
                f"entry {own:.3g}")
        w["gap"] = bakry_emery_gamma(fam, theta0)
    s_tilde = thm_s_tilde(means["left"], means["right"], k)
    own_min = min(wells["left"]["own"], wells["right"]["own"])
    full_axis = np.abs(full_fisher.mean_dparam_drift[0])

    steps = cfg.checkpoint_steps
    stats = {}
    for name, w in wells.items():
        seeds = _seeds(cfg.master_seed, cfg.n_paths, w["stream"])
        x0 = np.array([_deepest_minimum(w["family"], theta0)])
        stats[name] = (seeds, stream_statistics(w["family"], theta0, x0, cfg.dt, steps, seeds,
                                                cfg.n_jobs))

    spacing = prior.grid.spacing
    cp_cols = ["t", "n_paths", "eps_tilde", "mode_hit_fraction", "mean_ball_mass",
               "mean_std_0", "mean_std_1"]
    cp_rows, path_rows = [], []
    path_cols = ["t", "path", "seed_left", "seed_right", "mode_0", "mode_1", "mode_hit",
                 "ball_mass", "std_0", "std_1"]
    for j, (t, kk) in enumerate(zip(cfg.t_checkpoints, steps)):
        eps = contraction_radius(s_tilde, t, cfg.bounds) if t > 0 else float("nan")
        hits, masses, stds = [], [], []
        for i in range(cfg.n_paths):
            margs = []
            for name in ("left", "right"):
                w = wells[name]
                seeds, (sc, inf, _) = stats[name]
                if kk == 0:
                    post = PosteriorGrid(prior.grid, prior.log_weights.copy(), 0.0,
                                         exact_weights=prior.base_weights.copy())
                else:
                    post = posterior_from_statistics(prior, theta0, sc[i, j], inf[i, j],
                                                     base.sigma, t)
                margs.append(marginalize(post, [w["axis"]]))
            ann = anneal(margs[0], [0], margs[1], [1])
            mode = ann.mode()
            hit = bool(np.all(np.abs(mode - theta0) <= 2 * spacing * (1 + 1e-9)))
            mass = ball_mass(ann, theta0, eps) if np.isfinite(eps) else float("nan")
            sd = ann.std()
            hits.append(hit)
            masses.append(mass)
            stds.append(sd)
            path_rows.append([t, i, stats["left"][0][i], stats["right"][0][i], *mode, hit,
                              mass, *sd])
        stds = np.array(stds)
        cp_rows.append([t, cfg.n_paths, eps, float(np.mean(hits)), float(np.mean(masses)),
                        float(stds[:, 0].mean()), float(stds[:, 1].mean())])

    constants = dict(sigma=base.sigma, theta0=theta0, s_tilde=s_tilde, k=k,
                     s1_full=full_fisher.s1, full_singular_values=full_fisher.singular_values,
                     full_axis_fisher=full_axis, own_axis_fisher_min=own_min,
                     own_left=wells["left"]["own"], foreign_left=wells["left"]["foreign"],
                     own_right=wells["right"]["own"], foreign_right=wells["right"]["foreign"],
                     gap_left=wells["left"]["gap"], gap_right=wells["right"]["gap"],
                     cut_left=wells["left"]["cut"], cut_right=wells["right"]["cut"],
                     dt=cfg.dt, master_seed=cfg.master_seed, n_paths=cfg.n_paths)
    notes = []
    if full_fisher.mean_dparam_drift.shape[0] < full_fisher.mean_dparam_drift.shape[1]:
        notes.append("d < p: full-system singular values are zero padded, so s1_full = 0")
    return ExperimentReport("anneal", constants, Table(cp_cols, cp_rows),
                            Table(path_cols, path_rows), notes=notes)


# ---------------------------------------------------------------------------
# LAN residual study
# ---------------------------------------------------------------------------

def _probe_set(p: int, n: int = 12):
    """Probabilists' Gauss-Hermite nodes and weights for a standard normal on R^p."""
    x, w = hermegauss(n)
    w = w / w.sum()
    if p == 1:
        return x[:, None], w
    mesh = np.meshgrid(*([x] * p), indexing="ij")
    wm = np.meshgrid(*([w] * p), indexing="ij")
    return np.stack([m.ravel() for m in mesh], -1), np.prod([m.ravel() for m in wm], axis=0)


def _lan_statistics(cfg, family, theta0, fisher, x0, seeds, steps):
    score, info, noise = stream_statistics(family, theta0, x0, cfg.dt, steps, seeds, cfg.n_jobs)
    u, wu = _probe_set(family.dim_param)
    p = family.dim_param
    zero = np.zeros((p, p))
    eps_d, eps_r, deltas = [], [], []
    for j, t in enumerate(cfg.t_checkpoints):
        dd, rr, dl = [], [], []
        for i in range(len(seeds)):
            lan = lan_from_sums(fisher, t, score[i, j], info[i, j], zero, noise[i, j],
                                cfg.lan.get("normalization", "exact"))
            diff = lan.delta_t - lan.delta_infinity()
            dd.append(float(diff @ diff))
            rr.append(float(sum(w * abs(lan.r_t(uu)) for uu, w in zip(u, wu))))
            dl.append(lan.delta_t)
        eps_d.append(float(np.mean(dd)))
        eps_r.append(float(np.mean(rr)))
        deltas.append(np.array(dl))
    return np.array(eps_d), np.array(eps_r), deltas


def run_lan_residual_study(cfg: ExperimentConfig) -> ExperimentReport:
    """Monte Carlo ``eps_Delta(t)``, ``eps_r(t)`` and their fitted decay exponents."""
    family = cfg.family.build()
    theta0 = cfg.family.theta(family)
    dyn._ensure_checked(family)
    if not family.is_affine:
        raise InvalidArgument("studies require a drift affine in theta")
    if any(t <= 0 for t in cfg.t_checkpoints):
        raise InvalidArgument("t_checkpoints: LAN study needs positive times")
    fisher = _fisher(family, theta0, cfg.strict)
    rate, rate_kind = _gap(family, theta0)
    x0 = as_param(cfg.x0) if cfg.x0 is not None else default_start(family, theta0)
    seeds = _seeds(cfg.master_seed, cfg.n_paths, STREAM_LAN)
    steps = cfg.checkpoint_steps
    eps_d, eps_r, deltas = _lan_statistics(cfg, family, theta0, fisher, x0, seeds, steps)
    cols = ["t", "n_paths", "eps_delta", "eps_r"]
    extra = []
    burn = None
    if cfg.lan.get("compare_ergodic_start", False):
        if rate is None:
            raise InvalidArgument("ergodic start needs a spectral gap")
        burn = float(cfg.lan.get("burn_in", 20.0 / rate))
        bseeds = _seeds(cfg.master_seed, cfg.n_paths, STREAM_BURN)
        starts = _burned_in_starts(family, theta0, x0, cfg.dt, burn, bseeds)
        eps_d_erg, eps_r_erg, _ = _lan_statistics(cfg, family, theta0, fisher, starts, seeds,
                                                  steps)
        cols += ["eps_delta_ergodic", "eps_r_ergodic"]
        extra = [eps_d_erg, eps_r_erg]
    rows = []
    for j, t in enumerate(cfg.t_checkpoints):
        rows.append([t, cfg.n_paths, eps_d[j], eps_r[j], *[e[j] for e in extra]])
    cov = np.atleast_2d(np.cov(deltas[-1].T, bias=False))
    p = family.dim_param
    cov_table = Table([f"cov_{a}_{b}" for a in range(p) for b in range(p)],
                      [list(cov.ravel())])
    constants = dict(sigma=family.sigma, theta0=theta0, s1=fisher.s1, rate=rate,
                     rate_kind=rate_kind, x0=x0, dt=cfg.dt, master_seed=cfg.master_seed,
                     n_paths=cfg.n_paths, family=family.name,
                     exponent_eps_delta=_fit_exponent(cfg.t_checkpoints, eps_d),
                     exponent_eps_r=_fit_exponent(cfg.t_checkpoints, eps_r),
                     delta_covariance_last=cov, burn_in=burn,
                     normalization=cfg.lan.get("normalization", "exact"))
    return ExperimentReport("lan_residual", constants, Table(cols, rows),
                            extra_tables={"delta_cov": cov_table})


def run_study(cfg: ExperimentConfig) -> ExperimentReport:
    return {"contraction": run_contraction_study, "exit": run_exit_study,
            "anneal": run_anneal_study, "lan_residual": run_lan_residual_study}[cfg.study](cfg)
