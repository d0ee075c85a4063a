"""Parameterized drift families and Euler-Maruyama simulation.

State arrays carry the state dimension on the last axis, ``x.shape == (..., d)``;
parameter vectors are 1-d arrays of length ``p``.  Gradient families use the
convention ``drift = -grad U``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import InvalidArgument, NonConvexCutoff, NumericalBlowup

SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# one-dimensional potential terms
# ---------------------------------------------------------------------------

class Term1D:
    """A scalar function of x with closed-form derivatives up to third order."""

    def derivs(self, x: np.ndarray) -> np.ndarray:
        """Return ``[f, f', f'', f''']`` stacked on a new leading axis."""
        raise NotImplementedError

    def __call__(self, x):
        return self.derivs(np.asarray(x, dtype=float))[0]


class PolyTerm(Term1D):
    """Polynomial with coefficients in increasing degree."""

    def __init__(self, coeffs: Sequence[float]):
        self.poly = np.polynomial.Polynomial(np.asarray(coeffs, dtype=float))
        self._ders = [self.poly] + [self.poly.deriv(k) for k in (1, 2, 3)]

    def derivs(self, x):
        x = np.asarray(x, dtype=float)
        return np.stack([p(x) for p in self._ders])

    def __repr__(self):
        return f"PolyTerm({list(self.poly.coef)})"


class ZeroTerm(Term1D):
    def derivs(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros((4,) + x.shape)


class TiltBumpTerm(Term1D):
    """``(x - anchor) * psi(x)`` with ``psi`` the standard C-infinity bump on [lo, hi].

    ``psi`` equals 1 at the midpoint of the support, so near ``anchor`` the term
    behaves like a unit linear tilt and vanishes identically outside ``[lo, hi]``.
    """

    def __init__(self, anchor: float, lo: float, hi: float, amplitude: float = 1.0):
        if not lo < hi:
            raise InvalidArgument("bump support must satisfy lo < hi")
        self.anchor = float(anchor)
        self.lo, self.hi = float(lo), float(hi)
        self.mid = 0.5 * (lo + hi)
        self.half = 0.5 * (hi - lo)
        self.amplitude = float(amplitude)

    def _psi(self, x):
        z = (x - self.mid) / self.half
        inside = np.abs(z) < 1.0
        zi = np.where(inside, z, 0.0)
        q = 1.0 - zi * zi
        g = 1.0 - 1.0 / q
        g1 = -2.0 * zi / q**2
        g2 = -2.0 / q**2 - 8.0 * zi**2 / q**3
        g3 = -24.0 * zi / q**3 - 48.0 * zi**3 / q**4
        psi = np.where(inside, np.exp(g), 0.0)
        w = 1.0 / self.half
        p1 = psi * g1 * w
        p2 = psi * (g2 + g1 * g1) * w**2
        p3 = psi * (g3 + 3.0 * g1 * g2 + g1**3) * w**3
        return psi, p1, p2, p3

    def derivs(self, x):
        x = np.asarray(x, dtype=float)
        psi, p1, p2, p3 = self._psi(x)
        s = x - self.anchor
        out = np.stack([s * psi, psi + s * p1, 2.0 * p1 + s * p2, 3.0 * p2 + s * p3])
        return self.amplitude * out

    def __repr__(self):
        return f"TiltBumpTerm(anchor={self.anchor}, support=[{self.lo}, {self.hi}])"


class CutoffTerm(Term1D):
    """Replace a term beyond ``cut`` by ``f(c) + f'(c)(x-c) + f''(c)(x-c)^2``.

    ``side='left'`` replaces ``x < cut``, ``side='right'`` replaces ``x > cut``.
    """

    def __init__(self, term: Term1D, cut: float, side: str = "left"):
        if side not in ("left", "right"):
            raise InvalidArgument("side must be 'left' or 'right'")
        self.term, self.cut, self.side = term, float(cut), side
        f0, f1, f2, _ = self.term.derivs(np.array(self.cut))
        self._at_cut = (float(f0), float(f1), float(f2))

    def derivs(self, x):
        x = np.asarray(x, dtype=float)
        inner = self.term.derivs(x)
        f0, f1, f2 = self._at_cut
        s = x - self.cut
        ext = np.stack([f0 + f1 * s + f2 * s * s, f1 + 2.0 * f2 * s,
                        np.full_like(s, 2.0 * f2), np.zeros_like(s)])
        replace = x < self.cut if self.side == "left" else x > self.cut
        return np.where(replace, ext, inner)


# ---------------------------------------------------------------------------
# drift families
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DriftFamily:
    """A parameterized drift ``V_theta(x)`` with its parameter derivatives.

    ``drift(theta, x)`` returns shape ``(..., d)``, ``dparam_drift`` returns
    ``(..., d, p)`` and ``d2param_drift`` returns ``(..., d, p, p)``.
    """

    dim_state: int
    dim_param: int
    drift: Callable
    dparam_drift: Callable
    d2param_drift: Callable
    noise_amplitude: float
    potential: Callable | None = None
    name: str = "custom"
    # (base Term1D, [param Term1D, ...]) for 1-d potentials affine in theta
    terms: tuple | None = None
    # (offset(x) -> (..., d), basis(x) -> (..., d, p)) when drift is affine in theta
    affine: tuple | None = None
    breakpoints: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_param < 1:
            raise InvalidArgument("dimensions must be positive")
        if not (self.noise_amplitude > 0 and np.isfinite(self.noise_amplitude)):
            raise InvalidArgument("noise amplitude must be positive")

    @property
    def sigma(self) -> float:
        return float(self.noise_amplitude)

    @property
    def is_gradient(self) -> bool:
        return self.potential is not None

    @property
    def is_affine(self) -> bool:
        return self.affine is not None

    def potential_derivs(self, theta, x) -> np.ndarray:
        """``[U, U', U'', U''']`` for a 1-d term-based family, at scalar-shaped x."""
        if self.terms is None:
            raise InvalidArgument(f"family {self.name!r} has no closed-form potential terms")
        theta = as_param(theta, self.dim_param)
        base, params = self.terms
        out = base.derivs(x)
        for th, term in zip(theta, params):
            out = out + th * term.derivs(x)
        return out

    def param_potential_derivs(self, x) -> np.ndarray:
        """Shape ``(p, 4, ...)``: derivatives of dU/dtheta_j in x."""
        if self.terms is None:
            raise InvalidArgument(f"family {self.name!r} has no closed-form potential terms")
        return np.stack([term.derivs(x) for term in self.terms[1]])

    def hessian_potential(self, theta, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.potential_derivs(theta, x[..., 0])[2][..., None, None]

    def with_sigma(self, sigma: float) -> "DriftFamily":
        import dataclasses
        return dataclasses.replace(self, noise_amplitude=float(sigma), meta=dict(self.meta))


def as_param(theta, p: int | None = None) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.ndim != 1 or (p is not None and theta.shape[0] != p):
        raise InvalidArgument(f"parameter vector must have shape ({p},), got {theta.shape}")
    return theta


def as_state(x, d: int | None = None) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if d is not None and x.shape[-1] != d:
        raise InvalidArgument(f"state must have trailing dimension {d}, got {x.shape}")
    return x


def gradient_family_1d(name: str, sigma: float, base: Term1D, params: Sequence[Term1D],
                       breakpoints: Sequence[float] = (), meta: dict | None = None) -> DriftFamily:
    """Family with potential ``U_theta = base + sum_j theta_j * params[j]`` on the line."""
    if not sigma > 0:
        raise InvalidArgument("sigma must be positive")
    params = list(params)
    p = len(params)

    def _u(theta, x):
        theta = as_param(theta, p)
        x = np.asarray(x, dtype=float)
        val = base.derivs(x[..., 0])[0]
        for th, term in zip(theta, params):
            val = val + th * term.derivs(x[..., 0])[0]
        return val

    def offset(x):
        return -base.derivs(np.asarray(x, dtype=float)[..., 0])[1][..., None]

    def basis(x):
        x = np.asarray(x, dtype=float)[..., 0]
        cols = [-term.derivs(x)[1] for term in params]
        return np.stack(cols, axis=-1)[..., None, :]

    def drift(theta, x):
        theta = as_param(theta, p)
        return offset(x) + basis(x) @ theta

    def dparam(theta, x):
        return basis(x)

    def d2param(theta, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (1, p, p))

    return DriftFamily(dim_state=1, dim_param=p, drift=drift, dparam_drift=dparam,
                       d2param_drift=d2param, noise_amplitude=float(sigma), potential=_u,
                       name=name, terms=(base, params), affine=(offset, basis),
                       breakpoints=tuple(float(b) for b in breakpoints), meta=dict(meta or {}))


def double_well_family(sigma: float) -> DriftFamily:
    """``U_theta(x) = (x^2 + 2x + theta)(x^2 - 2x)`` with minima at +-sqrt(2) for theta=0."""
    # expanded: x^4 - 4x^2 + theta (x^2 - 2x)
    return gradient_family_1d("double_well", sigma, PolyTerm([0, 0, -4, 0, 1]),
                              [PolyTerm([0, -2, 1])], meta={"theta0": [0.0]})


def degenerate_double_well_family(sigma: float) -> DriftFamily:
    """``U_theta(x) = x^4 - theta x^2``; the intended ground truth is theta0 = 4."""
    return gradient_family_1d("degenerate_double_well", sigma, PolyTerm([0, 0, 0, 0, 1]),
                              [PolyTerm([0, 0, -1])], meta={"theta0": [4.0]})


def quadratic_family(sigma: float, a: float = 1.0) -> DriftFamily:
    """``U_theta(x) = a x^2 / 2 + theta x``; the drift is an Ornstein-Uhlenbeck drift."""
    if not a > 0:
        raise InvalidArgument("curvature a must be positive")
    return gradient_family_1d("quadratic", sigma, PolyTerm([0, 0, 0.5 * a]), [PolyTerm([0, 1])],
                              meta={"theta0": [0.0], "a": float(a)})


def ou_family(sigma: float) -> DriftFamily:
    """Ornstein-Uhlenbeck family ``V_theta(x) = -theta x`` (potential theta x^2 / 2)."""
    return gradient_family_1d("ou", sigma, ZeroTerm(), [PolyTerm([0, 0, 0.5])],
                              meta={"theta0": [1.0]})


def bump_double_well_family(sigma: float, left_support=(-2.2, -0.6), right_support=(0.6, 2.2),
                            amplitude: float = 1.0) -> DriftFamily:
    """``x^4 - 4x^2 + theta_1 b_L(x) + theta_2 b_R(x)`` with compactly supported tilts.

    Each ``b`` is a unit tilt anchored at its well minimum and localized by a
    smooth bump, so each parameter is only visible from one well.
    """
    bl = TiltBumpTerm(-SQRT2, *left_support, amplitude=amplitude)
    br = TiltBumpTerm(SQRT2, *right_support, amplitude=amplitude)
    return gradient_family_1d("bump_double_well", sigma, PolyTerm([0, 0, -4, 0, 1]), [bl, br],
                              meta={"theta0": [0.0, 0.0], "left_support": list(left_support),
                                    "right_support": list(right_support)})


def cutoff_family(base: DriftFamily, cut_point: float, side: str = "left",
                  reference_theta=None) -> DriftFamily:
    """Convexified single-well modification of a 1-d gradient family.

    Beyond ``cut_point`` the potential is replaced by
    ``U(c) + U'(c)(x-c) + U''(c)(x-c)^2``; the result is C^1 everywhere.
    """
    if base.terms is None or base.dim_state != 1:
        raise InvalidArgument("cutoff requires a 1-d gradient family built from potential terms")
    c = float(cut_point)
    ref = as_param(base.meta.get("theta0", np.zeros(base.dim_param)) if reference_theta is None
                   else reference_theta, base.dim_param)
    u2 = float(base.potential_derivs(ref, np.array(c))[2])
    if u2 <= 0:
        raise NonConvexCutoff(f"U''({c}) = {u2:.6g} <= 0 at the reference parameter")
    b, params = base.terms
    meta = dict(base.meta)
    meta.update(cut_point=c, cut_side=side, base=base.name)
    return gradient_family_1d(f"{base.name}_cutoff", base.sigma, CutoffTerm(b, c, side),
                              [CutoffTerm(t, c, side) for t in params],
                              breakpoints=tuple(base.breakpoints) + (c,), meta=meta)


# ---------------------------------------------------------------------------
# derivative checks
# ---------------------------------------------------------------------------

def check_family(family: DriftFamily, thetas=None, xs=None, h_x: float = 1e-5,
                 h_theta: float = 1e-5) -> None:
    """Finite-difference audit of the derivative fields; raises InvalidArgument on failure."""
    d, p = family.dim_state, family.dim_param
    if thetas is None:
        t0 = as_param(family.meta.get("theta0", np.zeros(p)), p)
        thetas = [t0, t0 + 0.37, t0 - 0.61]
    if xs is None:
        if d == 1:
            xs = np.linspace(-2.1, 2.1, 15)[:, None]
        else:
            xs = np.random.default_rng(0).uniform(-2, 2, size=(15, d))
    xs = as_state(xs, d)
    for theta in thetas:
        theta = as_param(theta, p)
        v = family.drift(theta, xs)
        if family.potential is not None:
            grad = np.empty_like(v)
            for i in range(d):
                e = np.zeros(d)
                e[i] = h_x
                grad[..., i] = (family.potential(theta, xs + e)
                                - family.potential(theta, xs - e)) / (2 * h_x)
            err = np.abs(v + grad) / np.maximum(1.0, np.abs(v))
            if np.max(err) > 1e-6:
                raise InvalidArgument(f"{family.name}: drift is not -grad(potential) "
                                      f"(max rel err {np.max(err):.2e})")
        jac = family.dparam_drift(theta, xs)
        hes = family.d2param_drift(theta, xs)
        for j in range(p):
            e = np.zeros(p)
            e[j] = h_theta
            fd = (family.drift(theta + e, xs) - family.drift(theta - e, xs)) / (2 * h_theta)
            err = np.abs(fd - jac[..., j]) / np.maximum(1.0, np.abs(jac[..., j]))
            if np.max(err) > 1e-5:
                raise InvalidArgument(f"{family.name}: dparam_drift mismatch "
                                      f"(max rel err {np.max(err):.2e})")
            fd2 = (family.dparam_drift(theta + e, xs)
                   - family.dparam_drift(theta - e, xs)) / (2 * h_theta)
            err2 = np.abs(fd2 - hes[..., j]) / np.maximum(1.0, np.abs(hes[..., j]))
            if np.max(err2) > 1e-4:
                raise InvalidArgument(f"{family.name}: d2param_drift mismatch "
                                      f"(max rel err {np.max(err2):.2e})")


def _ensure_checked(family: DriftFamily) -> None:
    if not family.meta.get("_checked"):
        check_family(family)
        family.meta["_checked"] = True


# ---------------------------------------------------------------------------
# paths and simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Domain:
    """Open ball ``B_radius(center)``."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))
        if not self.radius > 0:
            raise InvalidArgument("domain radius must be positive")

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - self.center, axis=-1) < self.radius


@dataclass(frozen=True, eq=False)
class Path:
    dt: float
    states: np.ndarray
    seed: int
    exit_step: int | None = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if states.shape[0] == 0 or not np.all(np.isfinite(states)):
            raise InvalidArgument("path states must be non-empty and finite")
        if not self.dt > 0:
            raise InvalidArgument("dt must be positive")
        object.__setattr__(self, "states", states)

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    @property
    def exit_time(self) -> float | None:
        return None if self.exit_step is None else self.exit_step * self.dt

    def truncate(self, n_steps: int) -> "Path":
        ex = self.exit_step if self.exit_step is not None and self.exit_step <= n_steps else None
        return Path(self.dt, self.states[: n_steps + 1], self.seed, ex)


def path_seed(master_seed: int, index: int, stream: int = 0) -> int:
    """64-bit seed of path ``index`` in ``stream``, independent of scheduling."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(stream), int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def iter_ensemble(family: DriftFamily, theta, x0, dt: float, n_steps: int, seeds: Sequence[int],
                  chunk: int = 2048) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(start_step, states)`` blocks with ``states.shape == (n_paths, m + 1, d)``.

    Block ``states[:, 0]`` repeats the last state of the previous block, so the
    increments of every block are complete.
    """
    theta = as_param(theta, family.dim_param)
    d = family.dim_state
    x0 = as_state(x0, d)
    if not dt > 0 or int(n_steps) < 0:
        raise InvalidArgument("dt must be positive and n_steps nonnegative")
    n_steps = int(n_steps)
    n = len(seeds)
    gens = [_generator(s) for s in seeds]
    x = np.broadcast_to(x0, (n, d)).astype(float, copy=True)
    if x0.ndim == 2:
        x = np.array(x0, dtype=float)
    scale = family.sigma * math.sqrt(dt)
    drift = family.drift
    k = 0
    if n_steps == 0:
        yield 0, x[:, None, :].copy()
        return
    while k < n_steps:
        m = min(chunk, n_steps - k)
        noise = np.stack([g.standard_normal((m, d)) for g in gens]) if n else np.empty((0, m, d))
        out = np.empty((n, m + 1, d))
        out[:, 0] = x
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(m):
                x = x + drift(theta, x) * dt + scale * noise[:, j]
                out[:, j + 1] = x
        if not np.all(np.isfinite(out)):
            bad = ~np.all(np.isfinite(out), axis=2)
            paths, steps = np.nonzero(bad)
            first = np.argmin(steps)
            raise NumericalBlowup(k + steps[first], seed=seeds[paths[first]])
        yield k, out
        k += m


def _first_outside(states: np.ndarray, domain: Domain) -> np.ndarray:
    """Index of first state outside ``domain`` along axis 1, -1 if none."""
    outside = ~domain.contains(states)
    has = outside.any(axis=1)
    idx = np.argmax(outside, axis=1)
    return np.where(has, idx, -1)


def _simulate_group(family, theta, x0, dt, n_steps, seeds, exit_domain):
    blocks = []
    exits = np.full(len(seeds), -1, dtype=np.int64)
    for start, states in iter_ensemble(family, theta, x0, dt, n_steps, seeds):
        body = states if start == 0 else states[:, 1:]
        offset = start if start == 0 else start + 1
        if exit_domain is not None:
            first = _first_outside(body, exit_domain)
            new = (exits < 0) & (first >= 0)
            exits[new] = first[new] + offset
        blocks.append(body)
    allstates = np.concatenate(blocks, axis=1)
    return [Path(dt, allstates[i], int(s), None if exits[i] < 0 else int(exits[i]))
            for i, s in enumerate(seeds)]


def _split(seq, n_jobs):
    n_jobs = max(1, min(int(n_jobs), len(seq))) if len(seq) else 1
    bounds = np.linspace(0, len(seq), n_jobs + 1).astype(int)
    return [seq[bounds[i]:bounds[i + 1]] for i in range(n_jobs)]


def simulate_ensemble(family: DriftFamily, theta, x0, dt: float, n_steps: int,
                      seeds: Sequence[int], exit_domain: Domain | None = None,
                      n_jobs: int = 1, check: bool = True) -> list[Path]:
    """Simulate one path per seed; the result does not depend on ``n_jobs``."""
    if check:
        _ensure_checked(family)
    seeds = [int(s) for s in seeds]
    groups = _split(seeds, n_jobs)
    if len(groups) == 1:
        return _simulate_group(family, theta, x0, dt, n_steps, groups[0], exit_domain)
    with ThreadPoolExecutor(max_workers=len(groups)) as pool:
        parts = pool.map(lambda g: _simulate_group(family, theta, x0, dt, n_steps, g, exit_domain),
                         groups)
        return [path for part in parts for path in part]


def simulate(family: DriftFamily, theta, x0, dt: float, n_steps: int, seed: int,
             exit_domain: Domain | None = None, check: bool = True) -> Path:
    """Euler-Maruyama path ``X_{k+1} = X_k + V(X_k) dt + sigma sqrt(dt) Z_k``.

    When ``exit_domain`` is given the first step outside it is recorded and the
    trajectory keeps evolving under the same dynamics.
    """
    if int(n_steps) < 1:
        raise InvalidArgument("n_steps must be >= 1")
    return simulate_ensemble(family, theta, x0, dt, n_steps, [seed], exit_domain, 1, check)[0]


def first_exit_steps(family: DriftFamily, theta, x0, dt: float, max_steps: int,
                     seeds: Sequence[int], domain: Domain, chunk: int = 1024,
                     check: bool = True) -> np.ndarray:
    """First-exit step per seed (``-1`` when censored at ``max_steps``) without storing paths.

    Uses the same per-path noise streams as :func:`simulate`, so the result
    agrees with ``simulate(..., exit_domain=domain).exit_step``.
    """
    if check:
        _ensure_checked(family)
    theta = as_param(theta, family.dim_param)
    d = family.dim_state
    x0 = as_state(x0, d)
    seeds = [int(s) for s in seeds]
    n = len(seeds)
    exits = np.full(n, -1, dtype=np.int64)
    x = np.broadcast_to(x0, (n, d)).astype(float, copy=True)
    start_out = ~domain.contains(x)
    exits[start_out] = 0
    gens = [_generator(s) for s in seeds]
    active = np.flatnonzero(exits < 0)
    scale = family.sigma * math.sqrt(dt)
    k = 0
    while k < max_steps and active.size:
        m = min(chunk, max_steps - k)
        noise = np.stack([gens[i].standard_normal((m, d)) for i in active])
        xa = x[active]
        hit = np.full(active.size, -1, dtype=np.int64)
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(m):
                xa = xa + family.drift(theta, xa) * dt + scale * noise[:, j]
                out = (hit < 0) & ~domain.contains(xa)
                hit[out] = k + j + 1
        if not np.all(np.isfinite(xa)):
            bad = np.flatnonzero(~np.all(np.isfinite(xa), axis=1))[0]
            raise NumericalBlowup(k + m, seed=seeds[active[bad]])
        x[active] = xa
        exits[active[hit >= 0]] = hit[hit >= 0]
        active = active[hit < 0]
        k += m
    return exits
