"""Ergodic densities by Gauss-Legendre quadrature, Fisher matrices, Laplace moments."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import logsumexp

from .dynamics import DriftFamily, as_param
from .errors import (InvalidArgument, InvalidExpansion, TruncationError,
                     TruncationWarning)

DEFAULT_NODES = 2048
PANEL_NODES = 64
# generator sigma^2/2 * Laplacian - grad U . grad gives density exp(-2 U / sigma^2)
DEFAULT_EXPONENT = 2.0
IDENTIFIABILITY_THRESHOLD = 1e-8


def composite_gauss_legendre(lo: float, hi: float, n_nodes: int = DEFAULT_NODES,
                             panel_nodes: int = PANEL_NODES):
    """Nodes and weights of composite Gauss-Legendre on ``[lo, hi]``."""
    if not hi > lo:
        raise InvalidArgument("quadrature interval must satisfy lo < hi")
    panel_nodes = min(panel_nodes, n_nodes)
    n_panels = max(1, int(np.ceil(n_nodes / panel_nodes)))
    t, w = leggauss(panel_nodes)
    edges = np.linspace(lo, hi, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    x = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    return x, wt


@dataclass(eq=False)
class ErgodicMeasure:
    """Normalized density ``exp(-exponent * U / sigma^2) / Z`` on a box."""

    family_ref: str
    theta: np.ndarray
    log_density_unnormalized: Callable
    support_box: tuple
    log_normalization: float
    nodes: np.ndarray          # (n, d)
    weights: np.ndarray        # quadrature weight times normalized density, sums to 1
    exponent: float = DEFAULT_EXPONENT
    n_nodes: int = DEFAULT_NODES

    @property
    def normalization(self) -> float:
        return float(np.exp(self.log_normalization))

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.exp(self.log_density_unnormalized(x) - self.log_normalization)

    def expect(self, g: Callable) -> np.ndarray:
        """``E[g(xi)]``; ``g`` maps ``(n, d)`` states to ``(n, ...)`` values."""
        vals = np.asarray(g(self.nodes), dtype=float)
        return np.tensordot(self.weights, vals, axes=(0, 0))

    def mean(self) -> np.ndarray:
        return self.expect(lambda x: x)

    def moment(self, k: int) -> np.ndarray:
        return self.expect(lambda x: x ** k)


def _log_density_fn(family: DriftFamily, theta, exponent):
    s2 = family.sigma ** 2

    def logdens(x):
        return -exponent * family.potential(theta, x) / s2
    return logdens


def auto_box(family: DriftFamily, theta, exponent: float = DEFAULT_EXPONENT,
             search=(-10.0, 10.0), margin: float = 60.0, n_scan: int = 40001):
    """Interval whose ends sit ``margin`` log-units below the density peak (1-d)."""
    if family.dim_state != 1:
        raise InvalidArgument("automatic box selection is implemented for d = 1; pass a box")
    theta = as_param(theta, family.dim_param)
    lo, hi = search
    for _ in range(8):
        xs = np.linspace(lo, hi, n_scan)
        ld = _log_density_fn(family, theta, exponent)(xs[:, None])
        keep = np.flatnonzero(ld >= ld.max() - margin)
        a, b = keep[0], keep[-1]
        if a > 0 and b < n_scan - 1:
            return float(xs[a - 1]), float(xs[b + 1])
        lo, hi = 2 * lo, 2 * hi
    raise TruncationError("could not bracket the density mass")


def ergodic_measure(family: DriftFamily, theta, box=None, n_nodes: int = DEFAULT_NODES,
                    exponent: float = DEFAULT_EXPONENT, strict: bool = False) -> ErgodicMeasure:
    """Normalize the stationary density of a gradient family by quadrature.

    ``box`` is a sequence of ``(lo, hi)`` pairs, one per state axis (d <= 2).
    """
    if not family.is_gradient:
        raise InvalidArgument("ergodic_measure needs a gradient family")
    d = family.dim_state
    if d > 2:
        raise InvalidArgument("quadrature is limited to d <= 2")
    if n_nodes < 64:
        raise InvalidArgument("n_nodes must be at least 64 per axis")
    theta = as_param(theta, family.dim_param)
    if box is None:
        box = (auto_box(family, theta, exponent),)
    box = tuple((float(a), float(b)) for a, b in box)
    if len(box) != d:
        raise InvalidArgument(f"box needs {d} axis bounds")
    axes = [composite_gauss_legendre(a, b, n_nodes) for a, b in box]
    if d == 1:
        nodes = axes[0][0][:, None]
        qw = axes[0][1]
    else:
        gx, gy = np.meshgrid(axes[0][0], axes[1][0], indexing="ij")
        nodes = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        qw = np.outer(axes[0][1], axes[1][1]).ravel()
    logdens = _log_density_fn(family, theta, exponent)
    ld = logdens(nodes)
    log_z = float(logsumexp(ld, b=qw))
    w = qw * np.exp(ld - log_z)

    # boundary check: density at the box faces relative to the peak
    if d == 1:
        face = np.array([[box[0][0]], [box[0][1]]])
    else:
        t = np.linspace(0, 1, 65)
        (a0, b0), (a1, b1) = box
        face = np.concatenate([
            np.stack([np.full_like(t, a0), a1 + t * (b1 - a1)], -1),
            np.stack([np.full_like(t, b0), a1 + t * (b1 - a1)], -1),
            np.stack([a0 + t * (b0 - a0), np.full_like(t, a1)], -1),
            np.stack([a0 + t * (b0 - a0), np.full_like(t, b1)], -1)])
    ratio = float(np.exp(np.max(logdens(face)) - np.max(ld)))
    if ratio > 1e-10:
        msg = f"density at box boundary is {ratio:.2e} of its peak; enlarge the box"
        if strict:
            raise TruncationError(msg)
        warnings.warn(msg, TruncationWarning, stacklevel=2)
    return ErgodicMeasure(family_ref=family.name, theta=theta, log_density_unnormalized=logdens,
                          support_box=box, log_normalization=log_z, nodes=nodes, weights=w,
                          exponent=float(exponent), n_nodes=int(n_nodes))


@dataclass
class FisherInfo:
    mean_dparam_drift: np.ndarray       # (d, p)
    singular_values: np.ndarray         # (p,), ascending, zero padded when d < p
    info_inverse_sqrt: np.ndarray | None  # (p, p); None when non-identifiable
    sigma: float
    identifiable: bool
    threshold: float = IDENTIFIABILITY_THRESHOLD

    @property
    def s1(self) -> float:
        return float(self.singular_values[0])

    @property
    def info_sqrt(self) -> np.ndarray:
        if self.info_inverse_sqrt is None:
            raise InvalidArgument("Fisher matrix is singular")
        return np.linalg.inv(self.info_inverse_sqrt)


def fisher_from_mean(mean_dparam: np.ndarray, sigma: float,
                     threshold: float = IDENTIFIABILITY_THRESHOLD) -> FisherInfo:
    """SVD bookkeeping for a stationary mean of the drift's parameter Jacobian."""
    m = np.atleast_2d(np.asarray(mean_dparam, dtype=float))
    d, p = m.shape
    t1, s, t2 = np.linalg.svd(m)            # m = t1 @ diag(s) @ t2
    svals = np.zeros(p)
    svals[: s.size] = s
    ascending = np.sort(svals)
    identifiable = bool(ascending[0] >= threshold)
    inv_sqrt = None
    if identifiable:
        sig_tilde = np.zeros((p, d))
        sig_tilde[np.arange(s.size), np.arange(s.size)] = 1.0 / s
        i_dp = np.eye(d, p)
        inv_sqrt = sigma * t2.T @ sig_tilde @ t1.T @ i_dp
    return FisherInfo(mean_dparam_drift=m, singular_values=ascending, info_inverse_sqrt=inv_sqrt,
                      sigma=float(sigma), identifiable=identifiable, threshold=threshold)


def fisher_info(family: DriftFamily, theta0, measure: ErgodicMeasure,
                threshold: float = IDENTIFIABILITY_THRESHOLD) -> FisherInfo:
    """Stationary mean of the parameter Jacobian of the drift and its SVD.

    A smallest singular value under ``threshold`` is reported through
    ``identifiable=False`` rather than raised.
    """
    theta0 = as_param(theta0, family.dim_param)
    mean = measure.expect(lambda x: family.dparam_drift(theta0, x))
    return fisher_from_mean(mean, family.sigma, threshold)


def laplace_moment(family: DriftFamily, theta, well_minimum, g: Callable,
                   exponent: float = DEFAULT_EXPONENT, h: float = 1e-4) -> float:
    """Second-order Laplace expansion of ``E[g(xi)]`` for the measure localized at one well.

    With ``beta = exponent / sigma^2`` this is
    ``g(m) + (g''(m)/U''(m) - g'(m) U'''(m)/U''(m)^2) / (2 beta)``, which for the
    default exponent reads ``g + sigma^2/4 * (...)``.  Derivatives of ``g`` are
    taken by central differences with step ``h``.
    """
    if family.dim_state != 1 or family.terms is None:
        raise InvalidArgument("laplace_moment is implemented for 1-d term-based families")
    theta = as_param(theta, family.dim_param)
    m = float(np.atleast_1d(well_minimum)[0])
    _, u1, u2, u3 = (float(v) for v in family.potential_derivs(theta, np.array(m)))
    if u2 <= 0:
        raise InvalidExpansion(f"Hessian {u2:.4g} at x={m} is not positive definite")
    if abs(u1) > 1e-6 * max(1.0, u2):
        raise InvalidExpansion(f"x={m} is not a critical point (U'={u1:.3g})")

    def gs(x):
        return float(np.asarray(g(np.array([[x]]))).ravel()[0])
    g0 = gs(m)
    g1 = (gs(m + h) - gs(m - h)) / (2 * h)
    g2 = (gs(m + h) - 2 * g0 + gs(m - h)) / (h * h)
    beta = exponent / family.sigma ** 2
    return g0 + (g2 / u2 - g1 * u3 / u2 ** 2) / (2.0 * beta)
