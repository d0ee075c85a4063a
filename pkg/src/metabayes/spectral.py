"""Spectral-gap and escape-rate constants for gradient diffusions.

Everything here uses small-noise closed forms (Eyring-Kramers, Bakry-Emery)
rather than eigensolves of the generator.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import brentq, minimize_scalar

from .dynamics import DriftFamily, Domain, as_param
from .errors import (ApproximationError, ApproximationWarning, InvalidArgument, NonConvex,
                     NonMorse, NotMetastable)


@dataclass
class WellData:
    minima: np.ndarray
    minima_values: np.ndarray
    minima_hessians: np.ndarray
    saddles: np.ndarray
    saddle_values: np.ndarray
    saddle_hessians: np.ndarray

    @property
    def n_minima(self) -> int:
        return int(self.minima.size)

    def barrier_pair(self):
        """``(x1, x2, s12)`` indices: global minimum, the deepest other well, and
        the highest critical point separating them."""
        if self.n_minima < 2 or self.saddles.size == 0:
            raise NotMetastable("need at least two minima separated by a saddle")
        i1 = int(np.argmin(self.minima_values))
        best = None
        for i2 in range(self.n_minima):
            if i2 == i1:
                continue
            lo, hi = sorted((self.minima[i1], self.minima[i2]))
            between = np.flatnonzero((self.saddles > lo) & (self.saddles < hi))
            if between.size == 0:
                continue
            js = between[np.argmax(self.saddle_values[between])]
            depth = self.saddle_values[js] - self.minima_values[i2]
            if best is None or depth > best[0]:
                best = (depth, i2, int(js))
        if best is None:
            raise NotMetastable("no saddle separates the minima")
        return i1, best[1], best[2]


def locate_critical_points(family: DriftFamily, theta, search_box=(-5.0, 5.0),
                           n_grid: int = 20001, morse_tol: float = 1e-8) -> WellData:
    """All roots of U' in ``search_box`` by sign changes on a grid plus Brent refinement."""
    if family.dim_state != 1 or family.terms is None:
        raise InvalidArgument("automatic critical points need a 1-d term-based family")
    theta = as_param(theta, family.dim_param)
    lo, hi = search_box
    xs = np.linspace(lo, hi, n_grid)

    def du(x):
        return float(family.potential_derivs(theta, np.array(x))[1])

    g = family.potential_derivs(theta, xs)[1]
    roots = []
    for i in range(n_grid - 1):
        a, b = g[i], g[i + 1]
        if a == 0.0:
            roots.append(xs[i])
        elif a * b < 0:
            roots.append(brentq(du, xs[i], xs[i + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps))
    if g[-1] == 0.0:
        roots.append(xs[-1])
    roots = np.array(sorted(set(roots)))
    if roots.size:
        der = family.potential_derivs(theta, roots)
        vals, hess = der[0], der[2]
    else:
        vals = hess = np.empty(0)
    if np.any(np.abs(hess) < morse_tol):
        bad = roots[np.abs(hess) < morse_tol][0]
        raise NonMorse(f"degenerate critical point at x={bad:.6g}")
    mins = hess > 0
    return WellData(minima=roots[mins], minima_values=vals[mins], minima_hessians=hess[mins],
                    saddles=roots[~mins], saddle_values=vals[~mins], saddle_hessians=hess[~mins])


def eyring_kramers_prefactor(wells: WellData) -> float:
    _, i2, js = wells.barrier_pair()
    lam = abs(wells.saddle_hessians[js])
    return float(2.0 * lam * math.sqrt(wells.minima_hessians[i2])
                 / (math.pi * math.sqrt(abs(wells.saddle_hessians[js]))))


def eyring_kramers_gamma(wells: WellData, sigma: float) -> float:
    """Metastable spectral gap
    ``2|lambda_12| sqrt(det H_2) / (pi sqrt|det H~_12|) * exp(2 (U(x_2) - U(s_12)) / sigma^2)``.
    """
    if not sigma > 0:
        raise InvalidArgument("sigma must be positive")
    _, i2, js = wells.barrier_pair()
    depth = wells.saddle_values[js] - wells.minima_values[i2]
    return eyring_kramers_prefactor(wells) * math.exp(-2.0 * depth / sigma ** 2)


def eyring_kramers_error_factor(sigma: float) -> float:
    """Order of the multiplicative error, ``1 + sqrt(s2/2) |ln(s2/2)|^{3/2}`` with s2 = sigma^2."""
    h = sigma ** 2 / 2.0
    return 1.0 + math.sqrt(h) * abs(math.log(h)) ** 1.5


def bakry_emery_gamma(family: DriftFamily, theta, probe_box=(-5.0, 5.0),
                      n_grid: int = 20001) -> float:
    """Infimum of the potential's second derivative over ``probe_box`` (1-d).

    The grid minimum is refined by bounded minimization and by one-sided
    evaluation at the family's breakpoints, where U'' may jump.
    """
    if family.dim_state != 1 or family.terms is None:
        raise InvalidArgument("bakry_emery_gamma needs a 1-d term-based family")
    theta = as_param(theta, family.dim_param)
    lo, hi = probe_box
    xs = np.linspace(lo, hi, n_grid)

    def u2(x):
        return float(family.potential_derivs(theta, np.array(x))[2])

    vals = family.potential_derivs(theta, xs)[2]
    i = int(np.argmin(vals))
    best = float(vals[i])
    a, b = xs[max(i - 1, 0)], xs[min(i + 1, n_grid - 1)]
    res = minimize_scalar(u2, bounds=(a, b), method="bounded", options={"xatol": 1e-13})
    best = min(best, float(res.fun))
    for c in family.breakpoints:
        if lo <= c <= hi:
            eps = 1e-12 * max(1.0, abs(c))
            best = min(best, u2(c), u2(c - eps), u2(c + eps))
    if best <= 0:
        raise NonConvex(f"potential is not uniformly convex (inf U'' = {best:.4g})")
    return best


def escape_probability(lambda_exit, c: float, t):
    """Survival probability ``min(1, c exp(-lambda t))`` of staying in the well up to t."""
    lambda_exit = np.asarray(lambda_exit, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(lambda_exit < 0) or np.any(t < 0) or not 0 < c <= 1.1:
        raise InvalidArgument("need lambda >= 0, t >= 0 and 0 < c <= 1.1")
    return np.minimum(1.0, c * np.exp(-lambda_exit * t))


def escaped_probability(lambda_exit, c: float, t):
    """``1 - escape_probability``, accurate for tiny ``lambda t``."""
    lambda_exit = np.asarray(lambda_exit, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(lambda_exit < 0) or np.any(t < 0) or not 0 < c <= 1.1:
        raise InvalidArgument("need lambda >= 0, t >= 0 and 0 < c <= 1.1")
    return np.maximum(0.0, -np.expm1(math.log(c) - lambda_exit * t))


def dirichlet_mean_exit_time(family: DriftFamily, theta, domain: Domain, x0: float,
                             n_grid: int = 200001) -> float:
    """Mean first exit time from an interval, by quadrature of the Dynkin ODE.

    Solves ``(sigma^2/2) T'' - U' T' = -1`` with ``T = 0`` on both ends; this is
    an exact reference for the Monte Carlo exit study, independent of any
    small-noise asymptotics.
    """
    if family.dim_state != 1:
        raise InvalidArgument("mean exit time by quadrature is 1-d only")
    theta = as_param(theta, family.dim_param)
    a = float(domain.center[0] - domain.radius)
    b = float(domain.center[0] + domain.radius)
    xs = np.linspace(a, b, n_grid)
    diff = family.sigma ** 2 / 2.0
    u = family.potential(theta, xs[:, None])
    u = u - u.min()
    psi = np.exp(u / diff)
    inner = cumulative_trapezoid(np.exp(-u / diff), xs, initial=0.0)
    i1 = cumulative_trapezoid(psi * inner, xs, initial=0.0) / diff
    i2 = cumulative_trapezoid(psi, xs, initial=0.0)
    tt = -i1 + (i1[-1] / i2[-1]) * i2
    return float(np.interp(x0, xs, tt))


@dataclass
class SpectralSummary:
    gamma: float | None
    gamma_hat: float | None
    lambda_exit: float | None
    prefactor_k: float = 1.0
    well_data: WellData | None = None
    gamma_error_factor: float | None = None
    notes: list = field(default_factory=list)

    @property
    def metastable(self) -> bool:
        return self.gamma is not None


def spectral_summary(family: DriftFamily, theta0, cutoff: DriftFamily | None = None,
                     lambda_exit: float | None = None, prefactor_k: float = 1.0,
                     search_box=(-5.0, 5.0), strict: bool = False) -> SpectralSummary:
    """Collect gamma (full system), gamma_hat (cutoff system) and the escape rate."""
    theta0 = as_param(theta0, family.dim_param)
    notes = []
    wells = locate_critical_points(family, theta0, search_box)
    gamma = err = None
    try:
        gamma = eyring_kramers_gamma(wells, family.sigma)
        err = eyring_kramers_error_factor(family.sigma)
        if err > 2.0:
            msg = (f"Eyring-Kramers error factor {err:.3g} at sigma={family.sigma}: "
                   "outside the small-noise regime")
            if strict:
                raise ApproximationError(msg)
            warnings.warn(msg, ApproximationWarning, stacklevel=2)
            notes.append(msg)
    except NotMetastable:
        notes.append("no saddle: system is not metastable")
    gamma_hat = None
    try:
        gamma_hat = bakry_emery_gamma(cutoff if cutoff is not None else family, theta0, search_box)
    except NonConvex:
        notes.append("Bakry-Emery constant unavailable: potential not uniformly convex")
    lam = lambda_exit if lambda_exit is not None else gamma
    return SpectralSummary(gamma=gamma, gamma_hat=gamma_hat, lambda_exit=lam,
                           prefactor_k=prefactor_k, well_data=wells, gamma_error_factor=err,
                           notes=notes)
