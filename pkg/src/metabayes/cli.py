"""``metabayes`` command line: spectral constants, bound curves, experiments, figures."""

from __future__ import annotations

import argparse
import csv
import math
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np
import yaml

from . import dynamics as dyn
from .bounds import BoundConfig, log_time_grid, meta_window
from .errors import (ApproximationWarning, InfeasibleRegime, InvalidArgument, MetabayesError,
                     TruncationWarning)
from .experiments import (FamilySpec, ExperimentConfig, Table, run_study, write_csv,
                          write_manifest, write_report)
from .measure import ergodic_measure, fisher_info
from .spectral import SpectralSummary, spectral_summary

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_INFEASIBLE = 0, 1, 2, 3
SQRT2 = math.sqrt(2.0)

BOUND_COLUMNS = ["t", "eps", "eps_hat", "H_sqrt", "H_hat_sqrt", "p_escaped", "meta_bound",
                 "in_window"]


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

@dataclass
class FigureSpec:
    figure_id: str
    overrides: dict = field(default_factory=dict)

    # sigma: noise for gamma and the quadratures; lambda: escape rate override
    DEFAULTS = {
        "fig2a": dict(sigma=0.4, t_min=1.0, t_max=1e4, log_x=False),
        "fig2b": dict(sigma=0.4, t_min=1.0, t_max=1e25, log_x=True),
        "fig3a": dict(sigma=0.4, t_min=1.0, t_max=1e4, log_x=False, lambda_exit=3.763e-7),
        "fig3b": dict(sigma=0.4, t_min=1.0, t_max=1e10, log_x=True, lambda_exit=3.763e-7),
    }
    KEYS = {"sigma", "fisher_sigma", "C", "C_hat", "c_escape", "eta", "alpha", "delta",
            "t_min", "t_max", "per_decade", "lambda_exit"}

    def __post_init__(self):
        if self.figure_id not in self.DEFAULTS:
            raise InvalidArgument(f"unknown figure {self.figure_id!r}; "
                                  f"choose from {sorted(self.DEFAULTS)}")
        bad = set(self.overrides) - self.KEYS
        if bad:
            raise InvalidArgument(f"unknown overrides {sorted(bad)}")
        self.bound_config()
        s = self.settings()
        if not 0 < s["t_min"] < s["t_max"]:
            raise InvalidArgument("empty time range: need 0 < t_min < t_max")
        if not s["sigma"] > 0:
            raise InvalidArgument("sigma must be positive")

    def settings(self) -> dict:
        s = dict(per_decade=400, fisher_sigma=None, lambda_exit=None)
        s.update(self.DEFAULTS[self.figure_id])
        s.update({k: v for k, v in self.overrides.items() if v is not None})
        return s

    def bound_config(self) -> BoundConfig:
        o = {k: v for k, v in self.overrides.items() if v is not None}
        return BoundConfig(alpha=o.get("alpha", 0.5), delta=o.get("delta", 1.0),
                           C=o.get("C", 1.0), C_hat=o.get("C_hat", 1.0),
                           c_escape=o.get("c_escape", 1.0), eta_threshold=o.get("eta", 0.5))


def double_well_constants(sigma: float, fisher_sigma: float | None = None,
                          strict: bool = False) -> dict:
    """gamma, gamma_hat, s1 and s1_hat for the tilted double well and its left cutoff."""
    full = dyn.double_well_family(sigma)
    theta0 = np.zeros(1)
    cut = dyn.cutoff_family(full, SQRT2 - 0.5, side="left")
    summ = spectral_summary(full, theta0, cutoff=cut, strict=strict)
    fs = sigma if fisher_sigma is None else fisher_sigma
    full_f, cut_f = full.with_sigma(fs), cut.with_sigma(fs)
    s1 = fisher_info(full_f, theta0, ergodic_measure(full_f, theta0, strict=strict)).s1
    s1_hat = fisher_info(cut_f, theta0, ergodic_measure(cut_f, theta0, strict=strict)).s1
    return dict(summary=summ, s1=s1, s1_hat=s1_hat, fisher_sigma=fs)


def bound_table(spec: FigureSpec, strict: bool = False):
    s = spec.settings()
    cfg = spec.bound_config()
    consts = double_well_constants(s["sigma"], s["fisher_sigma"], strict)
    summ: SpectralSummary = consts["summary"]
    notes = []
    gamma = summ.gamma
    lam = summ.lambda_exit
    if s["lambda_exit"] is not None:
        lam = gamma = float(s["lambda_exit"])
        notes.append(f"escape rate and spectral gap set to {lam:g} directly; the Eyring-Kramers "
                     f"value at sigma={s['sigma']} is {summ.gamma:.6g}")
    used = SpectralSummary(gamma=gamma, gamma_hat=summ.gamma_hat, lambda_exit=lam)
    times = log_time_grid(s["t_min"], s["t_max"], int(s["per_decade"]))
    curve = meta_window(times, used, consts["s1"], consts["s1_hat"], cfg)
    rows = [[t, e, eh, math.sqrt(h), math.sqrt(hh), pe, mb, bool(w)]
            for t, e, eh, h, hh, pe, mb, w in zip(curve.times, curve.epsilon, curve.epsilon_hat,
                                                  curve.H, curve.H_hat, curve.p_escaped,
                                                  curve.meta_bound, curve.in_window)]
    manifest = dict(figure=spec.figure_id, settings=s, constants=curve.constants,
                    fisher_sigma=consts["fisher_sigma"], eyring_kramers_gamma=summ.gamma,
                    gamma_error_factor=summ.gamma_error_factor, window=curve.window,
                    prior="standard gaussian", notes=notes + summ.notes)
    return Table(BOUND_COLUMNS, rows), manifest


def read_bound_csv(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in body]) if body else np.empty((0, len(header)))
    return {h: data[:, i] for i, h in enumerate(header)}


def plot_bound_csv(csv_path, svg_path, title: str, log_x: bool) -> None:
    """Render an SVG from the CSV alone; no values are recomputed here."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    d = read_bound_csv(csv_path)
    with matplotlib.rc_context({"svg.hashsalt": "metabayes", "path.simplify": False}):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        t = d["t"]
        ax.plot(t, d["eps"], color="tab:blue", label=r"$\epsilon_t$")
        ax.plot(t, d["H_sqrt"], color="tab:blue", ls="--", label=r"$H(t)^{1/2}$")
        ax.plot(t, d["eps_hat"], color="tab:red", label=r"$\hat\epsilon_t$")
        ax.plot(t, d["H_hat_sqrt"], color="tab:red", ls="--", label=r"$\hat H(t)^{1/2}$")
        ax.plot(t, d["p_escaped"], color="k", ls=":", label=r"$P[t>\tau]$")
        ax.plot(t, d["meta_bound"], color="tab:purple", lw=0.8,
                label=r"$\hat H^{1/2}+P[t>\tau]$")
        inw = d["in_window"] > 0.5
        if inw.any():
            ax.axvspan(t[inw][0], t[inw][-1], color="0.9", zorder=0)
        if log_x:
            ax.set_xscale("log")
            ax.set_yscale("log")
            ax.set_ylim(1e-6, 1e3)
        else:
            ax.set_ylim(0, 2)
        ax.set_xlabel("t")
        ax.set_title(title)
        ax.legend(fontsize=8, loc="best")
        fig.tight_layout()
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_figure(spec: FigureSpec, out_dir, strict: bool = False) -> list:
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table, manifest = bound_table(spec, strict)
    csv_path = out / f"{spec.figure_id}.csv"
    svg_path = out / f"{spec.figure_id}.svg"
    write_csv(csv_path, table)
    plot_bound_csv(csv_path, svg_path, spec.figure_id, spec.settings()["log_x"])
    man_path = out / f"{spec.figure_id}_manifest.json"
    write_manifest(man_path, manifest)
    return [csv_path, svg_path, man_path]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _family_from_args(args) -> FamilySpec:
    if args.config:
        data = yaml.safe_load(FsPath(args.config).read_text())
        fam = dict((data or {}).get("family") or {})
        if "name" not in fam or "sigma" not in fam:
            raise InvalidArgument("family: needs 'name' and 'sigma'")
        return FamilySpec(name=fam.pop("name"), sigma=float(fam.pop("sigma")),
                          theta0=fam.pop("theta0", None), cutoff=fam.pop("cutoff", None),
                          params=fam.pop("params", {}) or {})
    if not args.family:
        raise InvalidArgument("give --config or --family")
    cutoff = None
    if args.cutoff is not None:
        cutoff = {"point": args.cutoff, "side": args.side}
    params = {"a": args.a} if args.family == "quadratic" and args.a is not None else {}
    return FamilySpec(name=args.family, sigma=args.sigma, cutoff=cutoff, params=params)


def cmd_spectral(args) -> int:
    spec = _family_from_args(args)
    base = spec.base()
    theta0 = spec.theta(base)
    cut = None
    if spec.cutoff:
        cut = dyn.cutoff_family(base, float(spec.cutoff["point"]),
                                side=spec.cutoff.get("side", "left"), reference_theta=theta0)
    summ = spectral_summary(base, theta0, cutoff=cut, strict=args.strict)
    fs = args.fisher_sigma or base.sigma
    fb = base.with_sigma(fs)
    fisher = fisher_info(fb, theta0, ergodic_measure(fb, theta0, strict=args.strict))
    s1_hat = None
    if cut is not None:
        fc = cut.with_sigma(fs)
        s1_hat = fisher_info(fc, theta0, ergodic_measure(fc, theta0, strict=args.strict)).s1
    rows = [["family", base.name], ["sigma", base.sigma], ["fisher_sigma", fs]]
    if summ.gamma is not None:
        err = summ.gamma_error_factor
        rows += [["gamma", summ.gamma], ["gamma_low", summ.gamma / err],
                 ["gamma_high", summ.gamma * err], ["lambda", summ.lambda_exit],
                 ["metastability", "eyring_kramers"]]
    else:
        rows += [["gamma", None], ["lambda", None], ["metastability", "none"]]
    rows += [["gamma_hat", summ.gamma_hat], ["s1", fisher.s1],
             ["identifiable", fisher.identifiable]]
    if s1_hat is not None:
        rows.append(["s1_hat", s1_hat])
    for k, v in rows:
        if isinstance(v, float):
            v = f"{v:.11e}"
        print(f"{k}: {'none' if v is None else v}")
    for n in summ.notes:
        print(f"note: {n}")
    if args.csv:
        write_csv(args.csv, Table(["quantity", "value"], rows))
    return EXIT_OK


def _overrides(args) -> dict:
    return {k: getattr(args, k) for k in ("sigma", "fisher_sigma", "C", "C_hat", "c_escape",
                                          "eta", "alpha", "delta", "t_min", "t_max",
                                          "per_decade", "lambda_exit")
            if getattr(args, k, None) is not None}


def cmd_bounds(args) -> int:
    over = {}
    if args.config:
        over.update((yaml.safe_load(FsPath(args.config).read_text()) or {}).get("overrides", {}))
    over.update(_overrides(args))
    spec = FigureSpec(args.figure, over)
    for p in emit_figure(spec, args.out, args.strict):
        print(p)
    return EXIT_OK


def cmd_figures(args) -> int:
    over = _overrides(args)
    for fid in sorted(FigureSpec.DEFAULTS):
        for p in emit_figure(FigureSpec(fid, over), args.out, args.strict):
            print(p)
    return EXIT_OK


def cmd_experiment(args) -> int:
    stage = "config"
    try:
        cfg = ExperimentConfig.from_yaml(args.config)
        if args.strict:
            cfg.strict = True
        if args.n_jobs is not None:
            cfg.n_jobs = args.n_jobs
        stage = f"{cfg.study} study"
        report = run_study(cfg)
        stage = "write"
        for p in write_report(report, args.out, cfg):
            print(p)
    except MetabayesError as exc:
        exc.args = (f"stage '{stage}': {exc.args[0] if exc.args else exc}",)
        raise
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _add_bound_overrides(p):
    for name, kind in (("sigma", float), ("fisher-sigma", float), ("C", float),
                       ("C-hat", float), ("c-escape", float), ("eta", float), ("alpha", float),
                       ("delta", float), ("t-min", float), ("t-max", float),
                       ("per-decade", int), ("lambda-exit", float)):
        p.add_argument(f"--{name}", type=kind, dest=name.replace("-", "_"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metabayes", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spectral", help="spectral gap, escape rate and Fisher constants")
    p.add_argument("--config")
    p.add_argument("--family")
    p.add_argument("--sigma", type=float, default=0.4)
    p.add_argument("--cutoff", type=float)
    p.add_argument("--side", choices=["left", "right"], default="left")
    p.add_argument("--a", type=float)
    p.add_argument("--fisher-sigma", type=float, dest="fisher_sigma")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_spectral)

    p = sub.add_parser("bounds", help="bound curves for one figure as CSV and SVG")
    p.add_argument("--figure", default="fig2b", choices=sorted(FigureSpec.DEFAULTS))
    p.add_argument("--config")
    p.add_argument("--out", default=".")
    _add_bound_overrides(p)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("experiment", help="run a Monte Carlo study from a YAML config")
    p.add_argument("config")
    p.add_argument("--out", default=".")
    p.add_argument("--n-jobs", type=int, dest="n_jobs")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("figures", help="regenerate all figure CSVs and SVGs")
    p.add_argument("--out", default=".")
    _add_bound_overrides(p)
    p.set_defaults(func=cmd_figures)

    for sp in sub.choices.values():
        sp.add_argument("--strict", action="store_true",
                        help="turn truncation and approximation warnings into errors")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    with warnings.catch_warnings():
        if args.strict:
            warnings.simplefilter("error", TruncationWarning)
            warnings.simplefilter("error", ApproximationWarning)
        else:
            # reported through the summary notes instead
            warnings.simplefilter("ignore", ApproximationWarning)
        try:
            return args.func(args)
        except InfeasibleRegime as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        except (InvalidArgument, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except (MetabayesError, TruncationWarning, ApproximationWarning,
                FloatingPointError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
