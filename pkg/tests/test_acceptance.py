"""Exit criteria, each at its stated tolerance and time budget.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from metabayes import dynamics as dyn
from metabayes.bounds import log_time_grid
from metabayes.cli import FigureSpec, emit_figure, read_bound_csv
from metabayes.experiments import (ExperimentConfig, Table, run_study, write_csv,
                                   write_report)
from metabayes.inference import girsanov_loglik, lan_decompose
from metabayes.measure import ergodic_measure, fisher_info
from metabayes.spectral import bakry_emery_gamma, eyring_kramers_gamma, locate_critical_points

pytestmark = pytest.mark.acceptance

SQRT2 = math.sqrt(2.0)
CUT = SQRT2 - 0.5
MASTER = 20240917


def _timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


# ---- criterion runners (shared with the determinism check) ----------------

def run_identities(n_jobs, out_dir):
    """Zero log-likelihood at theta0, LAN reconstruction and the martingale mean."""
    fam = dyn.cutoff_family(dyn.double_well_family(0.4), CUT)
    theta0 = np.zeros(1)
    fi = fisher_info(fam, theta0, ergodic_measure(fam, theta0))
    dt, steps, n = 1e-3, 5000, 1000
    seeds = [dyn.path_seed(MASTER, i) for i in range(n)]
    paths = dyn.simulate_ensemble(fam, theta0, [SQRT2], dt, steps, seeds, n_jobs=n_jobs)
    probes = (-2.0, -1.0, -0.5, 0.5, 1.5)
    at_theta0, resid, ratio = [], [], []
    lan0 = lan_decompose(fam, theta0, fi, paths[0])
    theta_alt = lan0.phi_t @ np.ones(1)
    rows = []
    for i, p in enumerate(paths):
        z = girsanov_loglik(fam, theta0, theta0, p) if i < 100 else float("nan")
        r = float("nan")
        if i < 20:
            lan = lan_decompose(fam, theta0, fi, p)
            r = max(abs(girsanov_loglik(fam, lan.phi_t @ [u], theta0, p) - lan.local_loglik([u]))
                    for u in probes)
            resid.append(r)
        ll = girsanov_loglik(fam, theta_alt, theta0, p)
        if i < 100:
            at_theta0.append(z)
        ratio.append(math.exp(ll))
        rows.append([i, p.seed, z, r, ll])
    write_csv(out_dir / "identities.csv",
              Table(["path", "seed", "loglik_theta0", "lan_residual", "loglik_alt"], rows))
    return dict(at_theta0=np.array(at_theta0), resid=np.array(resid), ratio=np.array(ratio),
                n_pairs=len(resid) * len(probes))


def contraction_config(n_jobs):
    return ExperimentConfig.from_dict(dict(
        study="contraction", family=dict(name="double_well", sigma=0.4, cutoff=dict(point=CUT)),
        n_paths=100, t_checkpoints=[12.5, 25, 50, 100], dt=1e-3, master_seed=MASTER,
        prior=dict(kind="uniform", bounds=[[-1, 1]], n_nodes=[401]), n_jobs=n_jobs))


def exit_config(n_jobs):
    return ExperimentConfig.from_dict(dict(
        study="exit", family=dict(name="double_well", sigma=1.0), n_paths=200,
        t_checkpoints=[0], dt=1e-3, master_seed=MASTER,
        exit=dict(center=SQRT2, radius=0.5), n_jobs=n_jobs))


def anneal_config(n_jobs):
    return ExperimentConfig.from_dict(dict(
        study="anneal", family=dict(name="bump_double_well", sigma=0.4), n_paths=100,
        t_checkpoints=[100], dt=1e-3, master_seed=MASTER,
        prior=dict(kind="uniform", bounds=[[-1, 1], [-1, 1]], n_nodes=[41, 41]), n_jobs=n_jobs))


def run_config(make, n_jobs, out_dir):
    cfg = make(n_jobs)
    report = run_study(cfg)
    write_report(report, out_dir)
    return report


RUNNERS = {
    "identities": lambda j, d: run_identities(j, d),
    "contraction": lambda j, d: run_config(contraction_config, j, d),
    "exit": lambda j, d: run_config(exit_config, j, d),
    "anneal": lambda j, d: run_config(anneal_config, j, d),
}


@pytest.fixture(scope="module")
def serial_runs(tmp_path_factory):
    """Each Monte Carlo criterion run once on one thread, with its wall time."""
    cache = {}

    def get(name):
        if name not in cache:
            d = tmp_path_factory.mktemp(f"{name}_j1")
            result, elapsed = _timed(RUNNERS[name], 1, d)
            cache[name] = (result, elapsed, d)
        return cache[name]

    return get


# ---- analytic criteria ----------------------------------------------------

@pytest.mark.criterion("AC1 Eyring-Kramers constant")
def test_ac1_eyring_kramers():
    def go():
        wells = locate_critical_points(dyn.double_well_family(0.4), [0.0])
        return eyring_kramers_gamma(wells, 0.4)

    gamma, elapsed = _timed(go)
    exact = 8 ** 1.5 / math.pi * math.exp(-50.0)
    assert abs(gamma / exact - 1) < 1e-3
    assert abs(gamma / 1.389e-21 - 1) < 1e-3
    assert elapsed < 1.0


@pytest.mark.criterion("AC2 Fisher constants")
def test_ac2_fisher():
    def go():
        full = dyn.double_well_family(0.1)
        s1 = fisher_info(full, [0.0], ergodic_measure(full, [0.0])).s1
        cut = dyn.cutoff_family(full, CUT)
        s_hat = fisher_info(cut, [0.0], ergodic_measure(cut, [0.0])).s1
        return s1, s_hat

    (s1, s_hat), elapsed = _timed(go)
    assert abs(s1 - 2.0) <= 1e-6
    assert abs(s_hat - 0.827) <= 0.01
    assert abs(s_hat - 2 * (SQRT2 - 1)) <= 0.01
    assert elapsed < 5.0


@pytest.mark.criterion("AC3 Bakry-Emery constant")
def test_ac3_bakry_emery():
    g, elapsed = _timed(bakry_emery_gamma,
                        dyn.cutoff_family(dyn.double_well_family(0.1), CUT), [0.0])
    assert abs(g - (12 * CUT ** 2 - 8)) <= 1e-6
    assert abs(g - 2.0294) <= 1e-4
    assert elapsed < 1.0


@pytest.mark.criterion("AC4 degenerate identifiability")
def test_ac4_degenerate():
    def go():
        full = dyn.degenerate_double_well_family(0.4)
        fi = fisher_info(full, [4.0], ergodic_measure(full, [4.0]))
        cut = dyn.cutoff_family(full, CUT)
        fc = fisher_info(cut, [4.0], ergodic_measure(cut, [4.0]))
        return fi, fc

    (fi, fc), elapsed = _timed(go)
    assert fi.s1 < 1e-8 and not fi.identifiable
    assert fc.s1 > 0.5 and fc.identifiable
    assert elapsed < 5.0


@pytest.mark.criterion("AC5 bound curve ordering")
def test_ac5_bound_curves(tmp_path):
    def go():
        emit_figure(FigureSpec("fig2b"), tmp_path)
        return read_bound_csv(tmp_path / "fig2b.csv")

    with pytest.warns(Warning):
        d, elapsed = _timed(go)
    t = d["t"]
    sel = (t >= 1e2) & (t <= 1e19)
    assert sel.sum() > 0
    assert np.all(d["H_hat_sqrt"][sel] < d["H_sqrt"][sel])
    assert np.all(d["H_sqrt"][t < 1e18] > 1.0)
    assert np.any(d["meta_bound"] < 0.25)
    assert t.size == log_time_grid().size
    assert elapsed < 10.0


# ---- Monte Carlo criteria -------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion("AC6 Girsanov and LAN identities")
def test_ac6_identities(serial_runs):
    res, elapsed, _ = serial_runs("identities")
    assert res["at_theta0"].size == 100
    assert np.all(res["at_theta0"] == 0.0)
    assert res["n_pairs"] == 100
    assert np.all(res["resid"] <= 1e-10)
    r = res["ratio"]
    assert r.size == 1000
    se = r.std(ddof=1) / math.sqrt(r.size)
    assert abs(r.mean() - 1.0) <= 3 * se
    assert elapsed < 120.0


@pytest.mark.slow
@pytest.mark.criterion("AC7 empirical contraction rate")
def test_ac7_contraction(serial_runs):
    rep, elapsed, _ = serial_runs("contraction")
    cp = rep.per_checkpoint
    t, std = cp.column("t"), cp.column("mean_std")
    slope = np.polyfit(np.log(t), np.log(std), 1)[0]
    assert abs(slope + 0.5) <= 0.1
    assert elapsed < 600.0


@pytest.mark.slow
@pytest.mark.criterion("AC8a mean exit time vs Eyring-Kramers")
def test_ac8a_exit_mean(serial_runs):
    rep, elapsed, _ = serial_runs("exit")
    s = rep.exit_summary
    assert s["n_exits"] >= 100
    predicted = 1.0 / eyring_kramers_gamma(
        locate_critical_points(dyn.double_well_family(1.0), [0.0]), 1.0)
    assert predicted / 3 <= s["mean_exit_time"] <= 3 * predicted
    assert elapsed < 900.0


@pytest.mark.slow
@pytest.mark.criterion("AC8b exit time exponentiality")
def test_ac8b_exit_exponential(serial_runs):
    rep, elapsed, _ = serial_runs("exit")
    s = rep.exit_summary
    assert s["n_exits"] >= 100
    assert abs(s["exceed_mean_fraction"] - math.exp(-1.0)) <= 0.1
    assert elapsed < 900.0


@pytest.mark.slow
@pytest.mark.criterion("AC9 annealing")
def test_ac9_anneal(serial_runs):
    rep, elapsed, _ = serial_runs("anneal")
    c = rep.constants
    assert c["s_tilde"] >= 2 * c["s1_full"]
    hits = rep.per_path.column("mode_hit")
    assert hits.size == 100
    assert hits.sum() >= 90
    assert elapsed < 1200.0


@pytest.mark.slow
@pytest.mark.criterion("AC10 determinism across thread counts")
@pytest.mark.parametrize("name", ["identities", "contraction", "exit", "anneal"])
def test_ac10_determinism(serial_runs, tmp_path, name):
    _, _, d1 = serial_runs(name)
    RUNNERS[name](3, tmp_path)
    first = {p.name: p.read_bytes() for p in d1.glob("*.csv")}
    second = {p.name: p.read_bytes() for p in tmp_path.glob("*.csv")}
    assert first and first == second
