"""Girsanov likelihoods, LAN decomposition and grid posteriors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .dynamics import DriftFamily, Path, as_param
from .errors import DegeneratePosterior, InvalidArgument, NonIdentifiable
from .measure import FisherInfo


# ---------------------------------------------------------------------------
# grids, priors, posteriors
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Grid:
    axes: tuple

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        for a in axes:
            if a.ndim != 1 or a.size < 1 or np.any(np.diff(a) <= 0):
                raise InvalidArgument("grid axes must be increasing 1-d arrays")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def regular(cls, bounds: Sequence[tuple], n_nodes: Sequence[int]) -> "Grid":
        return cls(tuple(np.linspace(lo, hi, n) for (lo, hi), n in zip(bounds, n_nodes)))

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a[1] - a[0] if a.size > 1 else np.inf for a in self.axes])

    def nodes(self) -> np.ndarray:
        """All nodes, shape ``(N, p)`` in C order of ``shape``."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def contains_strictly(self, theta) -> bool:
        theta = as_param(theta, self.dim)
        return all(a[0] < t < a[-1] for a, t in zip(self.axes, theta))

    def sub(self, axes: Sequence[int]) -> "Grid":
        return Grid(tuple(self.axes[i] for i in axes))


@dataclass(eq=False)
class Prior:
    """Deterministic grid weights times an optional Gaussian density factor.

    With ``hyper_mean_std`` set, :meth:`realize` draws the centre of the
    Gaussian factor around ``center`` once per replicate.
    """

    grid: Grid
    base_weights: np.ndarray
    hyper_mean_std: float | None = None
    rho_std: float = 1.0
    center: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.base_weights, dtype=float).reshape(self.grid.shape)
        if np.any(w < 0) or not np.isfinite(w).all():
            raise InvalidArgument("prior weights must be finite and nonnegative")
        total = w.sum()
        if abs(total - 1.0) > 1e-12:
            if total <= 0:
                raise InvalidArgument("prior weights must not all vanish")
            w = w / total
        self.base_weights = w
        if self.center is not None:
            self.center = as_param(self.center, self.grid.dim)

    @classmethod
    def uniform(cls, grid: Grid, **kw) -> "Prior":
        return cls(grid, np.full(grid.shape, 1.0 / np.prod(grid.shape)), **kw)

    @classmethod
    def gaussian(cls, grid: Grid, mean, std: float) -> "Prior":
        mean = as_param(mean, grid.dim)
        lw = -0.5 * np.sum(((grid.nodes() - mean) / std) ** 2, axis=-1)
        w = np.exp(lw - lw.max()).reshape(grid.shape)
        return cls(grid, w / w.sum())

    @property
    def is_random(self) -> bool:
        return self.hyper_mean_std is not None

    @property
    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.base_weights)

    def check_contains(self, theta0) -> None:
        if not self.grid.contains_strictly(theta0):
            raise InvalidArgument("theta0 must lie strictly inside the prior grid")

    def realize(self, rng: np.random.Generator) -> "Prior":
        """A deterministic prior for one replicate of a random-prior experiment."""
        if not self.is_random:
            return self
        center = self.center if self.center is not None else np.zeros(self.grid.dim)
        mean = center + rng.normal(0.0, self.hyper_mean_std, size=self.grid.dim)
        rho = -0.5 * np.sum(((self.grid.nodes() - mean) / self.rho_std) ** 2, axis=-1)
        lw = self.log_weights + rho.reshape(self.grid.shape)
        w = np.exp(lw - lw.max())
        return Prior(self.grid, w / w.sum())


@dataclass(eq=False)
class PosteriorGrid:
    grid: Grid
    log_weights: np.ndarray
    time_horizon: float = 0.0
    # normalized weights known exactly (a prior before any data); skips the log round trip
    exact_weights: np.ndarray | None = None

    def __post_init__(self):
        self.log_weights = np.asarray(self.log_weights, dtype=float).reshape(self.grid.shape)

    def log_normalizer(self) -> float:
        lw = self.log_weights
        if np.any(np.isnan(lw)):
            raise DegeneratePosterior("posterior log-weights contain NaN")
        z = float(logsumexp(lw))
        if not np.isfinite(z):
            raise DegeneratePosterior("all posterior weights vanish")
        return z

    def weights(self) -> np.ndarray:
        if self.exact_weights is not None:
            return self.exact_weights.copy()
        w = np.exp(self.log_weights - self.log_normalizer())
        return w / w.sum()

    def mode(self) -> np.ndarray:
        idx = np.unravel_index(int(np.argmax(self.log_weights)), self.grid.shape)
        return np.array([a[i] for a, i in zip(self.grid.axes, idx)])

    def mode_index(self) -> tuple:
        return tuple(int(i) for i in np.unravel_index(int(np.argmax(self.log_weights)),
                                                      self.grid.shape))

    def mean(self) -> np.ndarray:
        w = self.weights().ravel()
        return w @ self.grid.nodes()

    def cov(self) -> np.ndarray:
        w = self.weights().ravel()
        dev = self.grid.nodes() - w @ self.grid.nodes()
        return (dev * w[:, None]).T @ dev

    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov()), 0.0, None))


def ball_mass(post: PosteriorGrid, center, radius: float) -> float:
    """Posterior mass of nodes within Euclidean ``radius`` of ``center`` (boundary included)."""
    if not radius > 0:
        raise InvalidArgument("radius must be positive")
    center = as_param(center, post.grid.dim)
    dist = np.linalg.norm(post.grid.nodes() - center, axis=-1)
    w = post.weights().ravel()
    # relative slack so nodes produced by linspace on the sphere count as inside
    return float(min(1.0, w[dist <= radius * (1 + 1e-12)].sum()))


def marginalize(post: PosteriorGrid, keep_axes: Sequence[int]) -> PosteriorGrid:
    keep = sorted(set(int(a) for a in keep_axes))
    if not keep:
        raise InvalidArgument("keep_axes must not be empty")
    if keep[0] < 0 or keep[-1] >= post.grid.dim:
        raise InvalidArgument("keep_axes out of range")
    drop = tuple(i for i in range(post.grid.dim) if i not in keep)
    lw = post.log_weights - post.log_normalizer()
    out = logsumexp(lw, axis=drop) if drop else lw
    return PosteriorGrid(post.grid.sub(keep), out, post.time_horizon)


def anneal(post1: PosteriorGrid, axes1: Sequence[int], post2: PosteriorGrid,
           axes2: Sequence[int]) -> PosteriorGrid:
    """Product measure of two marginals living on complementary parameter axes."""
    axes1, axes2 = [int(a) for a in axes1], [int(a) for a in axes2]
    if set(axes1) & set(axes2):
        raise InvalidArgument("axis sets overlap")
    full = sorted(axes1 + axes2)
    if full != list(range(len(full))):
        raise InvalidArgument("axis sets must partition 0..p-1")
    if post1.grid.dim != len(axes1) or post2.grid.dim != len(axes2):
        raise InvalidArgument("posteriors must be the marginals onto their axes")
    p = len(full)
    grid_axes = [None] * p
    for a, ax in zip(axes1, post1.grid.axes):
        grid_axes[a] = ax
    for a, ax in zip(axes2, post2.grid.axes):
        grid_axes[a] = ax
    grid = Grid(tuple(grid_axes))

    def spread(lw, axes):
        order = np.argsort(axes)
        lw = np.transpose(lw - logsumexp(lw), order)
        shape = [1] * p
        for a in sorted(axes):
            shape[a] = grid.shape[a]
        return lw.reshape(shape)

    lw = spread(post1.log_weights, axes1) + spread(post2.log_weights, axes2)
    return PosteriorGrid(grid, lw, max(post1.time_horizon, post2.time_horizon))


# ---------------------------------------------------------------------------
# likelihoods
# ---------------------------------------------------------------------------

def _prefix(path: Path, n_steps):
    states = path.states
    if n_steps is not None:
        if not 0 <= n_steps <= path.n_steps:
            raise InvalidArgument("n_steps outside the path")
        states = states[: int(n_steps) + 1]
    return states


def girsanov_loglik(family: DriftFamily, theta, theta0, path: Path, n_steps: int | None = None):
    """Discretized ``log dP_theta / dP_theta0`` along a path.

    ``-(1/2 s^2) sum (|V_theta|^2 - |V_theta0|^2) dt + (1/s^2) sum (V_theta - V_theta0) . dX``
    with all integrands at left endpoints.
    """
    theta = as_param(theta, family.dim_param)
    theta0 = as_param(theta0, family.dim_param)
    states = _prefix(path, n_steps)
    if states.shape[1] != family.dim_state:
        raise InvalidArgument("path and family dimensions differ")
    if states.shape[0] < 2:
        return 0.0
    x = states[:-1]
    dx = np.diff(states, axis=0)
    v = family.drift(theta, x)
    v0 = family.drift(theta0, x)
    s2 = family.sigma ** 2
    quad = np.sum(np.sum(v * v, axis=-1) - np.sum(v0 * v0, axis=-1)) * path.dt
    stoch = np.sum((v - v0) * dx)
    return float(-0.5 * quad / s2 + stoch / s2)


@dataclass
class AffineStatistics:
    """Cumulative ``score = sum G^T (dX - V0 dt)``, ``info = sum G^T G dt`` and
    ``noise = sum (dX - V0 dt)`` for drifts affine in theta (``G`` the Jacobian)."""

    steps: np.ndarray          # (k,)
    score: np.ndarray          # (..., k, p)
    info: np.ndarray           # (..., k, p, p)
    noise: np.ndarray          # (..., k, d)
    dt: float


class AffineAccumulator:
    """Streams ensemble blocks from :func:`iter_ensemble` into checkpoint statistics."""

    def __init__(self, family: DriftFamily, theta0, checkpoint_steps: Sequence[int], dt: float):
        if not family.is_affine:
            raise InvalidArgument("affine statistics need a drift affine in theta")
        self.family = family
        self.theta0 = as_param(theta0, family.dim_param)
        self.steps = np.asarray(sorted(int(s) for s in checkpoint_steps), dtype=np.int64)
        self.dt = float(dt)
        self._score = self._info = self._noise = None
        self._done = 0
        self._out = None

    def _init(self, n):
        p, d = self.family.dim_param, self.family.dim_state
        k = self.steps.size
        self._score = np.zeros((n, p))
        self._info = np.zeros((n, p, p))
        self._noise = np.zeros((n, d))
        # checkpoints at step 0 keep these zeros
        self._out = (np.zeros((n, k, p)), np.zeros((n, k, p, p)), np.zeros((n, k, d)))

    def update(self, start: int, states: np.ndarray) -> None:
        n, m1, _ = states.shape
        if self._score is None:
            self._init(n)
        m = m1 - 1
        if m == 0:
            return
        x = states[:, :-1]
        e = np.diff(states, axis=1) - self.family.drift(self.theta0, x) * self.dt
        g = self.family.dparam_drift(self.theta0, x)            # (n, m, d, p)
        sc = np.einsum("nmdp,nmd->nmp", g, e)
        inf = np.einsum("nmdp,nmdq->nmpq", g, g) * self.dt
        csc = np.cumsum(sc, axis=1) + self._score[:, None]
        cinf = np.cumsum(inf, axis=1) + self._info[:, None]
        cno = np.cumsum(e, axis=1) + self._noise[:, None]
        lo, hi = start, start + m
        for j, s in enumerate(self.steps):
            if lo < s <= hi:
                i = s - lo - 1
                self._out[0][:, j] = csc[:, i]
                self._out[1][:, j] = cinf[:, i]
                self._out[2][:, j] = cno[:, i]
        self._score, self._info, self._noise = csc[:, -1], cinf[:, -1], cno[:, -1]
        self._done = hi

    def result(self) -> AffineStatistics:
        if self._out is None:
            raise InvalidArgument("no data accumulated")
        if self.steps.size and self.steps[-1] > self._done:
            raise InvalidArgument("checkpoints beyond the simulated horizon")
        return AffineStatistics(self.steps, *self._out, dt=self.dt)


def affine_statistics(family: DriftFamily, theta0, path: Path,
                      checkpoint_steps: Sequence[int] | None = None) -> AffineStatistics:
    steps = [path.n_steps] if checkpoint_steps is None else checkpoint_steps
    acc = AffineAccumulator(family, theta0, steps, path.dt)
    acc.update(0, path.states[None])
    res = acc.result()
    return AffineStatistics(res.steps, res.score[0], res.info[0], res.noise[0], res.dt)


def affine_loglik(theta_nodes, theta0, score, info, sigma: float) -> np.ndarray:
    """Log-likelihood ratio at each node from affine sufficient statistics."""
    h = np.atleast_2d(np.asarray(theta_nodes, dtype=float)) - as_param(theta0)
    lin = h @ score
    quad = np.einsum("np,pq,nq->n", h, info, h)
    return (lin - 0.5 * quad) / sigma ** 2


def posterior_from_statistics(prior: Prior, theta0_reference, score, info, sigma: float,
                              time_horizon: float) -> PosteriorGrid:
    ll = affine_loglik(prior.grid.nodes(), theta0_reference, score, info, sigma)
    lw = prior.log_weights + ll.reshape(prior.grid.shape)
    post = PosteriorGrid(prior.grid, lw, time_horizon)
    post.log_normalizer()
    return post


def posterior_update(prior: Prior, family: DriftFamily, theta0_reference, path: Path,
                     n_steps: int | None = None, method: str = "auto") -> PosteriorGrid:
    """Grid posterior: log prior weight plus the Girsanov log-likelihood at every node.

    ``method='affine'`` evaluates all nodes from sufficient statistics (drifts
    affine in theta); ``'direct'`` calls :func:`girsanov_loglik` per node.
    """
    if prior.grid.dim != family.dim_param:
        raise InvalidArgument("prior grid and family parameter dimension differ")
    states = _prefix(path, n_steps)
    nsteps = states.shape[0] - 1
    t = nsteps * path.dt
    if nsteps == 0:
        return PosteriorGrid(prior.grid, prior.log_weights.copy(), 0.0,
                             exact_weights=prior.base_weights.copy())
    if method == "auto":
        method = "affine" if family.is_affine else "direct"
    if method == "affine":
        st = affine_statistics(family, theta0_reference, path, [nsteps])
        return posterior_from_statistics(prior, theta0_reference, st.score[0], st.info[0],
                                         family.sigma, t)
    if method != "direct":
        raise InvalidArgument(f"unknown method {method!r}")
    ll = np.array([girsanov_loglik(family, th, theta0_reference, path, nsteps)
                   for th in prior.grid.nodes()])
    post = PosteriorGrid(prior.grid, prior.log_weights + ll.reshape(prior.grid.shape), t)
    post.log_normalizer()
    return post


# ---------------------------------------------------------------------------
# local asymptotic normality
# ---------------------------------------------------------------------------

# "exact": quadratic and second-order terms carry the 1/2 of the Taylor/Girsanov
# expansion, so the identity holds without the cubic tail for affine drifts.
# "as_written": the unhalved coefficients.
_LAN_COEFFS = {"exact": (0.5, 0.5), "as_written": (1.0, 1.0)}


@dataclass
class LANDecomposition:
    phi_t: np.ndarray
    delta_t: np.ndarray
    r_t: Callable
    t: float
    sigma: float
    quad_matrix: np.ndarray        # sum G^T G dt
    second_matrix: np.ndarray      # sum_k H_k . (dX - V0 dt)
    noise_sum: np.ndarray          # sum (dX - V0 dt)
    normalization: str = "exact"
    extras: dict = field(default_factory=dict)

    def local_loglik(self, u) -> float:
        """``Delta_t . u - |u|^2 + r_t(u)`` (explicit terms only)."""
        u = np.asarray(u, dtype=float)
        return float(self.delta_t @ u - u @ u + self.r_t(u))

    def delta_infinity(self) -> np.ndarray:
        """Coupled limit ``t^{-1/2} I_{p,d} W_t`` built from the same Brownian increments."""
        p, d = self.phi_t.shape[0], self.noise_sum.shape[-1]
        return np.eye(p, d) @ (self.noise_sum / self.sigma) / math.sqrt(self.t)


def lan_from_sums(fisher: FisherInfo, t: float, score, quad, second, noise,
                  normalization: str = "exact") -> LANDecomposition:
    if not fisher.identifiable:
        raise NonIdentifiable("Fisher matrix is degenerate; LAN rescaling undefined")
    if normalization not in _LAN_COEFFS:
        raise InvalidArgument(f"normalization must be one of {sorted(_LAN_COEFFS)}")
    if not t > 0:
        raise InvalidArgument("LAN needs a positive time horizon")
    cq, c2 = _LAN_COEFFS[normalization]
    s2 = fisher.sigma ** 2
    phi = fisher.info_inverse_sqrt / math.sqrt(t)
    delta = phi.T @ np.asarray(score) / s2
    quad = np.asarray(quad)
    second = np.asarray(second)

    def r_t(u):
        u = np.asarray(u, dtype=float)
        h = phi @ u
        return float(u @ u - cq * (h @ quad @ h) / s2 + c2 * (h @ second @ h) / s2)

    return LANDecomposition(phi_t=phi, delta_t=delta, r_t=r_t, t=float(t), sigma=fisher.sigma,
                            quad_matrix=quad, second_matrix=second, noise_sum=np.asarray(noise),
                            normalization=normalization)


def lan_decompose(family: DriftFamily, theta0, fisher: FisherInfo, path: Path,
                  n_steps: int | None = None, normalization: str = "exact") -> LANDecomposition:
    """Score ``Delta_t``, rescaling ``phi_t = t^{-1/2} I^{-1/2}`` and remainder ``r_t``.

    ``r_t(u)`` returns ``|u|^2 - c (phi u)^T A (phi u) / s^2 + c (phi u)^T B (phi u) / s^2``
    with ``A = sum G^T G dt``, ``B = sum d2V . (dX - V0 dt)`` and ``c = 1/2`` for
    ``normalization='exact'``; the cubic Taylor tail is not included.
    """
    theta0 = as_param(theta0, family.dim_param)
    states = _prefix(path, n_steps)
    t = (states.shape[0] - 1) * path.dt
    x = states[:-1]
    e = np.diff(states, axis=0) - family.drift(theta0, x) * path.dt
    g = family.dparam_drift(theta0, x)               # (m, d, p)
    hh = family.d2param_drift(theta0, x)             # (m, d, p, p)
    score = np.einsum("mdp,md->p", g, e)
    quad = np.einsum("mdp,mdq->pq", g, g) * path.dt
    second = np.einsum("mdpq,md->pq", hh, e)
    return lan_from_sums(fisher, t, score, quad, second, e.sum(axis=0), normalization)
