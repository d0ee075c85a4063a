"""Explicit contraction-certainty bound curves and the metaconsistency window."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from .errors import InvalidArgument, NonIdentifiable
from .inference import Prior
from .spectral import SpectralSummary, escaped_probability


@dataclass(frozen=True)
class BoundConfig:
    alpha: float = 0.5
    delta: float = 1.0
    C: float = 1.0
    C_hat: float = 1.0
    c_escape: float = 1.0
    eta_threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise InvalidArgument("alpha must lie in (0, 1)")
        if not (self.delta > 0 and self.C > 0 and self.C_hat > 0):
            raise InvalidArgument("delta, C and C_hat must be positive")
        if not 0 < self.c_escape <= 1.1:
            raise InvalidArgument("c_escape must lie in (0, 1.1]")
        if not 0 < self.eta_threshold < 1:
            raise InvalidArgument("eta_threshold must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict | None) -> "BoundConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"unknown bound settings: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


def _times(t):
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise InvalidArgument("times must be positive")
    return t


def _out(x, like):
    return float(x) if np.ndim(like) == 0 else x


def contraction_radius(s1: float, t, cfg: BoundConfig = BoundConfig()):
    """``delta * s1^-alpha * t^(-alpha/2)``."""
    if not s1 > 0:
        raise NonIdentifiable("contraction radius needs s1 > 0")
    tt = _times(t)
    return _out(cfg.delta * s1 ** -cfg.alpha * tt ** (-cfg.alpha / 2.0), t)


def local_radius(s1: float, t, cfg: BoundConfig = BoundConfig()):
    """Radius of ``U_t`` in local coordinates, ``t^{1/2} s1 eps_t``."""
    tt = _times(t)
    return np.sqrt(tt) * s1 * contraction_radius(s1, tt, cfg)


def uniform_tail_zero_time(s1: float, cfg: BoundConfig, max_offset: float) -> float:
    """Time after which a prior supported within ``max_offset`` of theta0 has no tail."""
    if not max_offset > 0:
        return 0.0
    a = cfg.alpha
    return float((max_offset / (cfg.delta * s1 ** (1.0 - a))) ** (2.0 / (1.0 - a)))


def prior_tail(s1: float, t, cfg: BoundConfig = BoundConfig(), prior: Prior | str | None = None,
               theta0=None, n_draws: int = 64, seed: int = 0):
    """Prior mass outside ``U_t``.

    ``prior=None`` or ``"gaussian"`` is a standard Gaussian on the local
    coordinate, giving ``erfc(r / sqrt 2)`` with ``r = t^{1/2} s1 eps_t``.  A
    grid :class:`Prior` counts the weight of nodes whose offset from
    ``theta0`` exceeds ``r``; random priors are averaged over ``n_draws``
    seeded hyperprior draws.
    """
    if not s1 > 0:
        raise NonIdentifiable("prior tail needs s1 > 0")
    tt = _times(t)
    r = local_radius(s1, tt, cfg)
    if prior is None or (isinstance(prior, str) and prior == "gaussian"):
        return _out(erfc(r / math.sqrt(2.0)), t)
    if not isinstance(prior, Prior):
        raise InvalidArgument("prior must be None, 'gaussian' or a Prior")
    if theta0 is None:
        raise InvalidArgument("grid priors need theta0")
    offsets = np.linalg.norm(prior.grid.nodes() - np.asarray(theta0, dtype=float), axis=-1)
    order = np.argsort(offsets)
    sorted_off = offsets[order]

    def tail_of(weights):
        w = weights.ravel()[order]
        # mass strictly beyond r: total minus cumulative up to r
        cum = np.concatenate([[0.0], np.cumsum(w)])
        k = np.searchsorted(sorted_off, np.atleast_1d(r), side="right")
        return np.clip(1.0 - cum[k], 0.0, 1.0)

    if prior.is_random:
        rng = np.random.default_rng(seed)
        vals = np.mean([tail_of(prior.realize(rng).base_weights) for _ in range(n_draws)], axis=0)
    else:
        vals = tail_of(prior.base_weights)
    return _out(vals.reshape(np.shape(r)), t)


def _five_terms(rate: float, s1: float, t, tail):
    tt = _times(t)
    return (rate ** -0.5 * tt ** -0.5 + 1.0 / (rate * tt) + s1 ** -4 * tt ** -0.5
            + s1 ** -3 * tt ** -0.5 + np.asarray(tail, dtype=float))


def bound_H(spec: SpectralSummary, s1: float, t, cfg: BoundConfig = BoundConfig(), tail=0.0):
    """Certainty bound ``H(t)`` for the full system (square root left to callers)."""
    if spec.gamma is None or not spec.gamma > 0:
        raise InvalidArgument("bound_H needs a positive spectral gap")
    if not s1 > 0:
        raise NonIdentifiable("bound_H needs s1 > 0")
    return _out(cfg.C * _five_terms(spec.gamma, s1, t, tail), t)


def bound_H_hat(spec: SpectralSummary, s1_hat: float, t, cfg: BoundConfig = BoundConfig(),
                tail=0.0):
    """Certainty bound for the cutoff system, using ``gamma_hat``."""
    if spec.gamma_hat is None or not spec.gamma_hat > 0:
        raise InvalidArgument("bound_H_hat needs a positive Bakry-Emery constant")
    if not s1_hat > 0:
        raise NonIdentifiable("bound_H_hat needs s1_hat > 0")
    return _out(cfg.C_hat * _five_terms(spec.gamma_hat, s1_hat, t, tail), t)


@dataclass
class BoundCurve:
    times: np.ndarray
    epsilon: np.ndarray
    epsilon_hat: np.ndarray
    H: np.ndarray
    H_hat: np.ndarray
    p_escaped: np.ndarray
    meta_bound: np.ndarray
    window: tuple | None
    in_window: np.ndarray
    constants: dict = field(default_factory=dict)


def _longest_run(mask: np.ndarray):
    best, start = None, None
    for i, m in enumerate(np.append(mask, False)):
        if m and start is None:
            start = i
        elif not m and start is not None:
            if best is None or i - start > best[1] - best[0]:
                best = (start, i)
            start = None
    return best


def meta_window(times, spec: SpectralSummary, s1: float, s1_hat: float,
                cfg: BoundConfig = BoundConfig(), prior: Prior | str | None = None,
                theta0=None, lambda_exit: float | None = None) -> BoundCurve:
    """All bound curves on a time grid plus the window where ``H_hat^{1/2} + P[t > tau] <= eta``.

    The window is the longest contiguous run of grid points meeting the
    threshold, or ``None``.
    """
    t = np.asarray(times, dtype=float).ravel()
    if t.size == 0:
        raise InvalidArgument("empty time grid")
    if np.any(np.diff(t) <= 0):
        raise InvalidArgument("time grid must be increasing")
    _times(t)
    lam = spec.lambda_exit if lambda_exit is None else lambda_exit
    if lam is None:
        raise InvalidArgument("an escape rate is required")
    tail = prior_tail(s1, t, cfg, prior, theta0)
    tail_hat = prior_tail(s1_hat, t, cfg, prior, theta0)
    H = bound_H(spec, s1, t, cfg, tail)
    H_hat = bound_H_hat(spec, s1_hat, t, cfg, tail_hat)
    p_esc = escaped_probability(lam, cfg.c_escape, t)
    meta = np.sqrt(H_hat) + p_esc
    mask = meta <= cfg.eta_threshold
    run = _longest_run(mask)
    in_window = np.zeros(t.size, dtype=bool)
    window = None
    if run is not None:
        in_window[run[0]:run[1]] = True
        window = (float(t[run[0]]), float(t[run[1] - 1]))
    consts = dict(gamma=spec.gamma, gamma_hat=spec.gamma_hat, lambda_exit=float(lam),
                  s1=float(s1), s1_hat=float(s1_hat), alpha=cfg.alpha, delta=cfg.delta,
                  C=cfg.C, C_hat=cfg.C_hat, c_escape=cfg.c_escape,
                  eta_threshold=cfg.eta_threshold)
    return BoundCurve(times=t, epsilon=contraction_radius(s1, t, cfg),
                      epsilon_hat=contraction_radius(s1_hat, t, cfg), H=H, H_hat=H_hat,
                      p_escaped=p_esc, meta_bound=meta, window=window, in_window=in_window,
                      constants=consts)


def log_time_grid(t_min: float = 1.0, t_max: float = 1e25, per_decade: int = 400) -> np.ndarray:
    if not 0 < t_min < t_max:
        raise InvalidArgument("time range must satisfy 0 < t_min < t_max")
    decades = math.log10(t_max) - math.log10(t_min)
    n = max(2, int(round(decades * per_decade)) + 1)
    return np.logspace(math.log10(t_min), math.log10(t_max), n)
