"""Particle simulation of the controlled state, the density and the noises."""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import Box, CoefficientSet, ControlConstraintSet, ModelError

BLOCK = 256
CHANNEL_W, CHANNEL_Y = 0, 1


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N_t: int

    def __post_init__(self):
        if int(self.N_t) != self.N_t or self.N_t < 1:
            raise ValueError(f"N_t must be a positive integer, got {self.N_t!r}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T!r}")

    @property
    def dt(self):
        return self.T / self.N_t

    @property
    def t(self):
        return np.arange(self.N_t + 1) * self.dt


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseBundle:
    dW: np.ndarray  # (N_p, N_t)
    dY: np.ndarray  # (N_p, N_t)

    @property
    def W(self):
        return _cumulative(self.dW)

    @property
    def Y(self):
        return _cumulative(self.dY)


def _cumulative(d):
    out = np.zeros((d.shape[0], d.shape[1] + 1))
    np.cumsum(d, axis=1, out=out[:, 1:])
    return out


def _block_normals(seed, channel, block, N_t):
    ss = np.random.SeedSequence([int(seed), channel, block])
    return np.random.Generator(np.random.Philox(ss)).standard_normal((BLOCK, N_t))


def generate_noise(grid: TimeGrid, N_p: int, seed: int, workers: int = 1) -> NoiseBundle:
    """Brownian increments from counter-based streams keyed by (seed, channel, block).

    Particles are grouped in fixed blocks of ``BLOCK``; each block has its own
    stream, so the draws do not depend on how blocks are assigned to workers
    and a smaller ensemble is a prefix of a larger one.
    """
    nblocks = -(-N_p // BLOCK)
    jobs = [(c, b) for c in (CHANNEL_W, CHANNEL_Y) for b in range(nblocks)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda cb: _block_normals(seed, cb[0], cb[1], grid.N_t), jobs))
    else:
        parts = [_block_normals(seed, c, b, grid.N_t) for c, b in jobs]
    sq = np.sqrt(grid.dt)
    dW = np.concatenate(parts[:nblocks], axis=0)[:N_p] * sq
    dY = np.concatenate(parts[nblocks:], axis=0)[:N_p] * sq
    return NoiseBundle(dW, dY)


# ---------------------------------------------------------------------------
# policies

_LEG = re.compile(r"^leg(\d+)$")
PATH_FEATURES = ("Y", "Yavg", "Ymax", "tY")


def path_statistics(Y):
    """Running average and running maximum of the sampled observation path."""
    n = np.arange(1, Y.shape[1] + 1)
    return {"Y": Y, "Yavg": np.cumsum(Y, axis=1) / n, "Ymax": np.maximum.accumulate(Y, axis=1)}


def expand_features(names, grid: TimeGrid):
    out = []
    for name in names:
        if name == "onehot":
            out.extend(f"node{i}" for i in range(grid.N_t + 1))
        elif name in ("1", "t", "tY", *PATH_FEATURES) or _LEG.match(name):
            out.append(name)
        else:
            raise ValueError(f"unknown policy feature {name!r}")
    return out


def feature_tensor(names, grid: TimeGrid, Y):
    """Feature values ``psi`` of shape ``(N_p, N_t + 1, d_f)`` built from the Y path.

    Every feature at node i only looks at ``Y[:, :i+1]``.
    """
    names = expand_features(names, grid)
    N_p = Y.shape[0]
    t = grid.t
    stats = path_statistics(Y)
    cols = []
    for name in names:
        if name == "1":
            col = np.ones_like(Y)
        elif name == "t":
            col = np.broadcast_to(t / grid.T, Y.shape)
        elif name == "tY":
            col = Y * (t / grid.T)
        elif name in stats:
            col = stats[name]
        elif name.startswith("node"):
            col = np.zeros_like(Y)
            col[:, int(name[4:])] = 1.0
        else:
            deg = int(_LEG.match(name).group(1))
            coef = np.zeros(deg + 1)
            coef[deg] = 1.0
            col = np.broadcast_to(np.polynomial.legendre.legval(2.0 * t / grid.T - 1.0, coef), Y.shape)
        cols.append(np.broadcast_to(col, (N_p, grid.N_t + 1)))
    return np.stack(cols, axis=-1)


class Policy:
    """Observation-adapted control: maps the Y path to controls at every node."""

    constraint: ControlConstraintSet

    def controls(self, grid, Y, psi=None):
        raise NotImplementedError

    def features(self, grid, Y):
        return None

    def path_feature_names(self):
        return ()


@dataclass
class ControlPolicy(Policy):
    """``u(t_i) = Pi_U(Theta psi(t_i, Y))`` with ``theta = Theta.ravel()``.

    Feature names: ``"1"``, ``"t"`` (t/T), ``"legN"`` (Legendre polynomial of
    degree N in rescaled time), ``"Y"``, ``"Yavg"``, ``"Ymax"``, ``"tY"`` and
    ``"onehot"`` (one indicator per grid node).

    >>> from mfsmp.model import Box
    >>> pol = ControlPolicy(("1",), np.array([3.0]), Box([-1.0], [1.0]))
    >>> grid = TimeGrid(1.0, 2)
    >>> pol.controls(grid, np.zeros((1, 3)))[0, :, 0]
    array([1., 1., 1.])
    """

    feature_names: tuple
    theta: np.ndarray
    constraint: ControlConstraintSet = field(default_factory=lambda: Box([-np.inf], [np.inf]))

    def __post_init__(self):
        self.feature_names = tuple(self.feature_names)
        self.theta = np.asarray(self.theta, dtype=float).ravel()
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("policy parameters must be finite")

    @property
    def k(self):
        return self.constraint.dim

    def n_features(self, grid):
        return len(expand_features(self.feature_names, grid))

    def n_params(self, grid):
        return self.k * self.n_features(grid)

    def Theta(self, grid):
        d = self.n_features(grid)
        if self.theta.size != self.k * d:
            raise ValueError(f"policy has {self.theta.size} parameters, expected {self.k * d}")
        return self.theta.reshape(self.k, d)

    def with_theta(self, theta):
        return ControlPolicy(self.feature_names, np.array(theta, dtype=float), self.constraint)

    def features(self, grid, Y):
        return feature_tensor(self.feature_names, grid, Y)

    def path_feature_names(self):
        return tuple(n for n in self.feature_names if n in ("Yavg", "Ymax"))

    def raw(self, grid, Y, psi=None):
        psi = self.features(grid, Y) if psi is None else psi
        return psi @ self.Theta(grid).T

    def controls(self, grid, Y, psi=None):
        w = self.raw(grid, Y, psi)
        return self.constraint.project(w.reshape(-1, self.k)).reshape(w.shape)

    def pullback(self, g, grid, Y, psi=None):
        """Chain a per-node control gradient ``g`` (N_p, N_t+1, k) into theta.

        Returns ``sum_{i<N} dt * mean_j (J_i^T g_i) psi_i`` flattened like theta.
        """
        psi = self.features(grid, Y) if psi is None else psi
        w = self.raw(grid, Y, psi)
        N_p, nn, k = w.shape
        jac = self.constraint.project_jacobian(w.reshape(-1, k)).reshape(N_p, nn, k, k)
        jg = np.einsum("jiab,jia->jib", jac, g)
        grad = np.einsum("jib,jic->bc", jg[:, :-1], psi[:, :-1]) * grid.dt / N_p
        return grad.ravel()

    def to_dict(self):
        return {"features": list(self.feature_names), "theta": self.theta.tolist(),
                "constraint": self.constraint.to_dict()}


@dataclass
class ConvexCombination(Policy):
    """The perturbed control ``ubar + eps (u - ubar)``; stays in U by convexity."""

    u: Policy
    ubar: Policy
    eps: float

    @property
    def constraint(self):
        return self.ubar.constraint

    def controls(self, grid, Y, psi=None):
        a = self.u.controls(grid, Y)
        b = self.ubar.controls(grid, Y)
        return b + self.eps * (a - b)

    def path_feature_names(self):
        return tuple(dict.fromkeys(self.u.path_feature_names() + self.ubar.path_feature_names()))


# ---------------------------------------------------------------------------
# ensemble


@dataclass
class ForwardEnsemble:
    grid: TimeGrid
    noise: NoiseBundle
    Y: np.ndarray  # (N_p, N_t+1)
    x: np.ndarray  # (N_p, N_t+1, n)
    rho: np.ndarray  # (N_p, N_t+1)
    u: np.ndarray  # (N_p, N_t+1, k)
    h: np.ndarray  # (N_p, N_t+1) observation drift at each node
    xbar: np.ndarray  # (N_t+1, n)
    ubar: np.ndarray  # (N_t+1, k)
    seed: int
    psi: np.ndarray | None = None
    path_features: dict = field(default_factory=dict)

    @property
    def N_p(self):
        return self.x.shape[0]

    @property
    def W(self):
        return self.noise.W

    def regression_variables(self, i):
        """State and observation statistics available at node i."""
        cols = [self.x[:, i, :], self.Y[:, i:i + 1]]
        cols.extend(v[:, i:i + 1] for v in self.path_features.values())
        return np.concatenate(cols, axis=1)


def simulate_forward(model: CoefficientSet, policy: Policy, grid: TimeGrid, N_p: int, seed: int,
                     workers: int = 1, noise: NoiseBundle | None = None) -> ForwardEnsemble:
    """Euler scheme for x, exact log-step for rho, empirical mean-field arguments."""
    if int(N_p) != N_p or N_p < 2:
        raise ValueError(f"N_p must be an integer >= 2, got {N_p!r}")
    if noise is None:
        noise = generate_noise(grid, N_p, seed, workers)
    Y = noise.Y
    psi = policy.features(grid, Y)
    u = policy.controls(grid, Y, psi) if psi is not None else policy.controls(grid, Y)
    if u.shape[-1] != model.dims.k:
        raise ModelError(f"policy control dimension {u.shape[-1]} != model k {model.dims.k}")
    N_t, dt, t = grid.N_t, grid.dt, grid.t
    n = model.dims.n
    x = np.empty((N_p, N_t + 1, n))
    logrho = np.zeros((N_p, N_t + 1))
    hs = np.zeros((N_p, N_t + 1))
    xbar = np.empty((N_t + 1, n))
    ubar = u.mean(axis=0)
    x[:, 0] = model.x0
    for i in range(N_t + 1):
        xi, ui = x[:, i], u[:, i]
        xbar[i] = xi.mean(axis=0)
        xm = np.broadcast_to(xbar[i], xi.shape)
        um = np.broadcast_to(ubar[i], ui.shape)
        h = model.h(t[i], xi, ui, xm, um)
        hs[:, i] = h
        if i == N_t:
            break
        b = model.b(t[i], xi, ui, xm, um)
        s1 = model.sigma1(t[i], xi, ui, xm, um)
        s2 = model.sigma2(t[i], xi, ui, xm, um)
        dWi, dYi = noise.dW[:, i:i + 1], noise.dY[:, i:i + 1]
        x[:, i + 1] = xi + (b - s2 * h[:, None]) * dt + s1 * dWi + s2 * dYi
        logrho[:, i + 1] = logrho[:, i] + h * dYi[:, 0] - 0.5 * h * h * dt
        bad = ~np.isfinite(x[:, i + 1]).all(axis=1) | ~np.isfinite(logrho[:, i + 1])
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise SimulationError(f"non-finite state at particle {j}, node {i + 1}")
    rho = np.exp(logrho)
    stats = path_statistics(Y)
    feats = {k: stats[k] for k in policy.path_feature_names()}
    return ForwardEnsemble(grid, noise, Y, x, rho, u, hs, xbar, ubar, int(seed), psi, feats)


def girsanov_weights(ens: ForwardEnsemble, i: int) -> np.ndarray:
    """Self-normalised importance weights ``rho_j(t_i) / sum_j rho_j(t_i)``."""
    if not -ens.grid.N_t - 1 <= i <= ens.grid.N_t:
        raise IndexError(f"node {i} outside grid")
    col = ens.rho[:, i]
    total = col.sum()
    if not total > 0:
        raise SimulationError(f"density column at node {i} is identically zero")
    return col / total


# ---------------------------------------------------------------------------
# perturbation orders


@dataclass
class ScalingResult:
    eps: np.ndarray
    x_moment: np.ndarray  # E[sup_t |x^eps - xbar|^4]
    rho_moment: np.ndarray  # E[sup_t |rho^eps - rhobar|^2]
    x_slope: float | str
    rho_slope: float | str


def _slope(eps, vals):
    if np.all(vals == 0):
        return "degenerate"
    if np.any(vals <= 0):
        return float("nan")
    return float(np.polyfit(np.log(eps), np.log(vals), 1)[0])


def perturbation_scaling(model, u: Policy, ubar: Policy, eps_list, grid, N_p, seed,
                         workers=1) -> ScalingResult:
    """Log-log slopes of the path-sup moments of the perturbed-minus-nominal state
    and density, simulated with common random numbers."""
    eps = np.asarray(eps_list, dtype=float)
    if eps.size < 3 or np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
        raise ValueError("eps_list needs >= 3 strictly positive, strictly decreasing values")
    noise = generate_noise(grid, N_p, seed, workers)
    base = simulate_forward(model, ubar, grid, N_p, seed, noise=noise)
    xm, rm = [], []
    for e in eps:
        pert = simulate_forward(model, ConvexCombination(u, ubar, float(e)), grid, N_p, seed,
                                noise=noise)
        dx = np.linalg.norm(pert.x - base.x, axis=2).max(axis=1)
        dr = np.abs(pert.rho - base.rho).max(axis=1)
        xm.append(np.mean(dx ** 4))
        rm.append(np.mean(dr ** 2))
    xm, rm = np.array(xm), np.array(rm)
    return ScalingResult(eps, xm, rm, _slope(eps, xm), _slope(eps, rm))
