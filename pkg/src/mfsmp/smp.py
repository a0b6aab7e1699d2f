"""Hamiltonian, modified partial derivatives, gradient and optimality checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import FULL_SLOTS, CoefficientSet, ModelError
from .regression import NodeRegressor

RHO_FLOOR = 1e-12


@dataclass
class HamiltonianInput:
    """Arguments of the Hamiltonian, batched over a leading axis.

    ``y_drv`` / ``ym_drv`` optionally replace ``y`` / ``ym`` in the driver
    ``f`` (the time-stepping evaluates the driver at the regression estimate
    while the running cost sees the updated y).
    """

    t: float
    x: np.ndarray
    y: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    u: np.ndarray
    xm: np.ndarray
    ym: np.ndarray
    z1m: np.ndarray
    z2m: np.ndarray
    um: np.ndarray
    k: np.ndarray
    p: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    R2: np.ndarray
    y_drv: np.ndarray | None = None
    ym_drv: np.ndarray | None = None

    def __post_init__(self):
        for name in ("x", "y", "z1", "z2", "u", "xm", "ym", "z1m", "z2m", "um", "k", "p", "q1", "q2"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        self.R2 = np.atleast_1d(np.asarray(self.R2, dtype=float))
        for name in ("y_drv", "ym_drv"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.atleast_2d(np.asarray(v, dtype=float)))
        for name, v in vars(self).items():
            if isinstance(v, np.ndarray) and not np.all(np.isfinite(v)):
                raise ValueError(f"Hamiltonian input {name!r} is not finite")

    def check(self, dims):
        want = {"x": dims.n, "xm": dims.n, "p": dims.n, "q1": dims.n, "q2": dims.n,
                "u": dims.k, "um": dims.k, "k": dims.m}
        for s in ("y", "z1", "z2", "ym", "z1m", "z2m"):
            want[s] = dims.m
        for name, d in want.items():
            if getattr(self, name).shape[1] != d:
                raise ModelError(f"Hamiltonian input {name!r} has dimension "
                                 f"{getattr(self, name).shape[1]}, expected {d}")

    def fwd_args(self):
        return (self.t, self.x, self.u, self.xm, self.um)

    def l_args(self):
        return (self.t, self.x, self.y, self.z1, self.z2, self.u,
                self.xm, self.ym, self.z1m, self.z2m, self.um)

    def f_args(self):
        y = self.y if self.y_drv is None else self.y_drv
        ym = self.ym if self.ym_drv is None else self.ym_drv
        return (self.t, self.x, y, self.z1, self.z2, self.u,
                self.xm, ym, self.z1m, self.z2m, self.um)


def _dot(a, b):
    return np.einsum("ja,ja->j", a, b)


def hamiltonian(model: CoefficientSet, inp: HamiltonianInput):
    """``l + <b,p> + <sigma1,q1> + <sigma2,q2> + <f,k> + R2 h``, one value per row.

    >>> from mfsmp.model import lq_model, Dimensions
    >>> mdl = lq_model(Dimensions(1), [0.0], b={"const": 1.0})
    >>> z = np.zeros(1)
    >>> float(hamiltonian(mdl, HamiltonianInput(0.0, z, z, z, z, z, z, z, z, z, z,
    ...                                          z, [2.0], z, z, 0.0))[0])
    2.0
    """
    inp.check(model.dims)
    fa = inp.fwd_args()
    val = model.l(*inp.l_args())
    val = val + _dot(model.b(*fa), inp.p) + _dot(model.sigma1(*fa), inp.q1)
    val = val + _dot(model.sigma2(*fa), inp.q2) + _dot(model.f(*inp.f_args()), inp.k)
    return val + inp.R2 * model.h(*fa)


def modified_R2(model, inp):
    """``R2 - <sigma2, p> - <z2, k>``."""
    fa = inp.fwd_args()
    return inp.R2 - _dot(model.sigma2(*fa), inp.p) - _dot(inp.z2, inp.k)


def modified_partials(model: CoefficientSet, inp: HamiltonianInput, slot: str):
    """Partial of the Hamiltonian in ``slot`` with R2 replaced by the modified R2.

    Differentiation happens first; only the multiplier of ``h_slot`` changes.
    """
    if slot not in FULL_SLOTS:
        raise ValueError(f"unknown slot {slot!r}; choose from {FULL_SLOTS}")
    inp.check(model.dims)
    out = np.array(model.deriv("l", *inp.l_args())[slot], dtype=float, copy=True)
    out += np.einsum("jab,ja->jb", model.deriv("f", *inp.f_args())[slot], inp.k)
    if slot in ("x", "u", "xm", "um"):
        fa = inp.fwd_args()
        out += np.einsum("jab,ja->jb", model.deriv("b", *fa)[slot], inp.p)
        out += np.einsum("jab,ja->jb", model.deriv("sigma1", *fa)[slot], inp.q1)
        out += np.einsum("jab,ja->jb", model.deriv("sigma2", *fa)[slot], inp.q2)
        out += modified_R2(model, inp)[:, None] * model.deriv("h", *fa)[slot]
    return out


def node_input(model, fwd, bwd, i, k, p, q1, q2, R2):
    """Hamiltonian input at node i with the supplied duals."""
    la = bwd.l_args(fwd, i)
    fa = bwd.f_args(fwd, i)
    return HamiltonianInput(la[0], *la[1:], k=k, p=p, q1=q1, q2=q2, R2=R2,
                            y_drv=fa[2], ym_drv=fa[7])


def node_duals(adj, i):
    return adj.ktilde[:, i], adj.phat[:, i], adj.q1[:, i], adj.q2[:, i], adj.R2[:, i]


# ---------------------------------------------------------------------------
# gradient


def _conditioning_design(psi_i):
    sd = psi_i.std(axis=0)
    cols = psi_i[:, sd > 1e-12 * (1.0 + np.abs(psi_i.mean(axis=0)))]
    return np.column_stack([np.ones(psi_i.shape[0]), cols])


def condition_on_features(values, psi_i):
    """Projection of ``values`` onto the span of the policy features at one node."""
    if psi_i is None:
        return np.broadcast_to(values.mean(axis=0), values.shape).copy()
    return NodeRegressor(_conditioning_design(psi_i)).fit(values)


@dataclass
class GradientField:
    G: np.ndarray  # (N_p, N_t+1, k) observation-conditional control gradient
    g: np.ndarray  # (N_p, N_t+1, k) particle-level integrand rho H_u + mean(rho H_u')
    grad_theta: np.ndarray
    Hu: np.ndarray = field(repr=False, default=None)
    Hum: np.ndarray = field(repr=False, default=None)

    @property
    def norm(self):
        return float(np.linalg.norm(self.grad_theta))


def control_partials(model, fwd, bwd, adj):
    """Modified H_u and H_u' at every node before the last, shape (N_p, N_t+1, k)."""
    N_t = fwd.grid.N_t
    Hu = np.zeros_like(fwd.u)
    Hum = np.zeros_like(fwd.u)
    for i in range(N_t):
        inp = node_input(model, fwd, bwd, i, *node_duals(adj, i))
        Hu[:, i] = modified_partials(model, inp, "u")
        Hum[:, i] = modified_partials(model, inp, "um")
    return Hu, Hum


def gradient(model, fwd, bwd, adj, policy) -> GradientField:
    """Gradient of the cost in the policy parameters from the adjoint processes."""
    Hu, Hum = control_partials(model, fwd, bwd, adj)
    rho = fwd.rho[:, :, None]
    g = rho * Hu + (rho * Hum).mean(axis=0, keepdims=True)
    g[:, -1] = 0.0
    G = np.zeros_like(g)
    for i in range(fwd.grid.N_t):
        G[:, i] = condition_on_features(g[:, i], None if fwd.psi is None else fwd.psi[:, i])
    grad = policy.pullback(g, fwd.grid, fwd.Y, fwd.psi)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite policy gradient")
    return GradientField(G, g, grad, Hu, Hum)


# ---------------------------------------------------------------------------
# necessary condition


@dataclass
class ResidualReport:
    residual: np.ndarray  # (N_t,) normalised residual per node
    raw: np.ndarray  # (N_t,) un-normalised particle-mean residual
    scale: np.ndarray  # (N_t,) magnitude scale per node
    diameter: float

    @property
    def min(self):
        return float(self.residual.min(initial=0.0))


def _scale(model, fwd, bwd, adj, gf, i):
    la = bwd.l_args(fwd, i)
    ld = model.deriv("l", *la)
    rho = fwd.rho[:, i:i + 1]
    lu, lum = ld["u"], ld["um"]
    return (np.abs(rho * lu).sum(1).mean() + np.abs(rho * (gf.Hu[:, i] - lu)).sum(1).mean()
            + np.abs((rho * lum).mean(0)).sum() + np.abs((rho * (gf.Hum[:, i] - lum)).mean(0)).sum())


def necessary_residual(model, fwd, bwd, adj, policy, U=None, samples=64, seed=0,
                       gf: GradientField | None = None) -> ResidualReport:
    """Normalised variational-inequality residual at each node.

    For particle j the raw value is ``min_v <G_j, v - ubar_j>`` over sampled
    points of U, its extreme points and the exact minimiser of the linear
    functional.  The node residual is the particle mean divided by
    ``S_i * diam U``, where ``S_i`` measures the size of the cost and dynamics
    contributions to the control gradient.  Both factors being zero gives 0.
    For unbounded U the comparison set is intersected with the unit ball
    around ``ubar_j`` (diameter 2).
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    U = U or policy.constraint
    gf = gf or gradient(model, fwd, bwd, adj, policy)
    rng = np.random.default_rng(seed)
    N_t = fwd.grid.N_t
    diam = U.diameter
    bounded = np.isfinite(diam)
    cand = U.sample(samples, rng) if bounded else None
    verts = U.extreme_points() if bounded else None
    raw, scale, resid = np.zeros(N_t), np.zeros(N_t), np.zeros(N_t)
    for i in range(N_t):
        G = gf.G[:, i]
        ub = fwd.u[:, i]
        if bounded:
            pts = [cand, verts] if verts.size else [cand]
            vals = [G @ c.T - np.einsum("ja,ja->j", G, ub)[:, None] for c in pts]
            lin = U.linear_minimizer(G)
            vals.append(np.einsum("ja,ja->j", G, lin - ub)[:, None])
            best = np.min(np.concatenate(vals, axis=1), axis=1)
            d = diam
        else:
            best = -np.linalg.norm(G, axis=1)
            d = 2.0
        raw[i] = best.mean()
        scale[i] = _scale(model, fwd, bwd, adj, gf, i)
        denom = scale[i] * d
        resid[i] = 0.0 if denom == 0 else raw[i] / denom
    return ResidualReport(resid, raw, scale, float(diam))


# ---------------------------------------------------------------------------
# sufficient condition


class PreconditionError(ValueError):
    pass


@dataclass
class SufficientReport:
    convexity_violations: list  # (what, node, particle, gap)
    minimization_violations: list  # (node, gap, spread)
    probes: int
    node_gaps: np.ndarray

    @property
    def ok(self):
        return not self.convexity_violations and not self.minimization_violations

    def summary(self):
        lines = [f"probes: {self.probes}",
                 f"convexity violations: {len(self.convexity_violations)}",
                 f"conditional minimisation violations: {len(self.minimization_violations)}"]
        for what, i, j, gap in self.convexity_violations[:20]:
            lines.append(f"  convexity {what} node={i} particle={j} gap={gap:.3e}")
        for i, gap, spread in self.minimization_violations[:20]:
            lines.append(f"  minimisation node={i} gap={gap:.3e} spread={spread:.3e}")
        return "\n".join(lines)


def _hamiltonian_rows(model, fwd, bwd, adj, i, rows, x, y, z1, z2, u, um=None):
    inp0 = node_input(model, fwd, bwd, i, *node_duals(adj, i))
    sel = lambda a: a[rows]  # noqa: E731
    inp = HamiltonianInput(
        inp0.t, x, y, z1, z2, u, sel(inp0.xm), sel(inp0.ym), sel(inp0.z1m), sel(inp0.z2m),
        sel(inp0.um) if um is None else um, sel(inp0.k), sel(inp0.p), sel(inp0.q1),
        sel(inp0.q2), sel(inp0.R2), y_drv=y, ym_drv=sel(inp0.ym_drv))
    return hamiltonian(model, inp)


def sufficient_check(model, fwd, bwd, adj, policy, U=None, probes=10_000, pairs=32, seed=0,
                     tol=1e-2) -> SufficientReport:
    """Probe-based check of the sufficient optimality conditions.

    Requires an observation drift depending on time only.  Convexity of the
    Hamiltonian in (x, y, z1, z2, u) is probed by the midpoint inequality at
    random nodes and particles with the ensemble's primed arguments and duals;
    Phi and gamma are probed likewise.  The conditional minimisation condition
    compares, per node, the density-weighted regression on the policy
    features of H at (ubar, mean ubar) against H at sampled pairs in U x U.
    """
    if not model.observation_is_state_free():
        raise PreconditionError("sufficient check requires an observation drift h(t) "
                                "independent of state and control")
    U = U or policy.constraint
    rng = np.random.default_rng(seed)
    dims = model.dims
    N_t, N_p = fwd.grid.N_t, fwd.N_p
    viol = []
    nodes = rng.integers(0, N_t, probes)
    parts = rng.integers(0, N_p, probes)
    bounded = np.isfinite(U.diameter)

    def sample_u(n):
        if bounded:
            return U.sample(n, rng)
        return U.project(fwd.u[parts[:n], nodes[:n]] + rng.standard_normal((n, dims.k)))

    for i in np.unique(nodes):
        mask = nodes == i
        rows = parts[mask]
        cnt = rows.size
        base = [fwd.x[rows, i], bwd.y[rows, i], bwd.z1[rows, i], bwd.z2[rows, i]]
        pa = [b + rng.standard_normal(b.shape) for b in base] + [sample_u(cnt)]
        pb = [b + rng.standard_normal(b.shape) for b in base] + [sample_u(cnt)]
        pm = [0.5 * (a + b) for a, b in zip(pa, pb)]
        ha = _hamiltonian_rows(model, fwd, bwd, adj, i, rows, *pa)
        hb = _hamiltonian_rows(model, fwd, bwd, adj, i, rows, *pb)
        hm = _hamiltonian_rows(model, fwd, bwd, adj, i, rows, *pm)
        gap = hm - 0.5 * (ha + hb)
        bad = gap > 1e-9 * (1.0 + np.abs(ha) + np.abs(hb))
        for j, g in zip(rows[bad], gap[bad]):
            viol.append(("H", int(i), int(j), float(g)))
    # terminal and initial costs
    xa = fwd.x[parts, N_t] + rng.standard_normal((probes, dims.n))
    xb = fwd.x[parts, N_t] + rng.standard_normal((probes, dims.n))
    xm = np.broadcast_to(fwd.xbar[N_t], xa.shape)
    for what, fn, a, b, extra in (("Phi", model.Phi, xa, xb, (xm,)),
                                  ("gamma", model.gamma,
                                   rng.standard_normal((probes, dims.m)),
                                   rng.standard_normal((probes, dims.m)), ())):
        fa, fb, fm = fn(a, *extra), fn(b, *extra), fn(0.5 * (a + b), *extra)
        gap = fm - 0.5 * (fa + fb)
        bad = gap > 1e-9 * (1.0 + np.abs(fa) + np.abs(fb))
        for j in np.flatnonzero(bad):
            viol.append((what, N_t if what == "Phi" else 0, int(j), float(gap[j])))
    # conditional minimisation
    cand_u = U.sample(pairs, rng) if bounded else sample_u(pairs)
    cand_um = U.sample(pairs, rng) if bounded else sample_u(pairs)
    minviol, gaps = [], np.zeros(N_t)
    allrows = np.arange(N_p)
    for i in range(N_t):
        psi = None if fwd.psi is None else fwd.psi[:, i]
        rho = fwd.rho[:, i]
        base = [fwd.x[:, i], bwd.y[:, i], bwd.z1[:, i], bwd.z2[:, i]]
        cols = [_hamiltonian_rows(model, fwd, bwd, adj, i, allrows, *base, fwd.u[:, i])]
        for c, cm in zip(cand_u, cand_um):
            uc = np.broadcast_to(c, fwd.u[:, i].shape)
            umc = np.broadcast_to(cm, fwd.u[:, i].shape)
            cols.append(_hamiltonian_rows(model, fwd, bwd, adj, i, allrows, *base, uc, umc))
        Hmat = np.column_stack(cols)
        if psi is None:
            C = np.broadcast_to((rho[:, None] * Hmat).mean(0) / rho.mean(), Hmat.shape)
        else:
            C = NodeRegressor(_conditioning_design(psi), weights=rho).fit(Hmat)
        cmin = C.min(axis=1)
        gap = float(np.mean(np.maximum(C[:, 0] - cmin, 0.0)))
        spread = float(np.mean(C.max(axis=1) - cmin))
        gaps[i] = gap
        if gap > tol * spread:
            minviol.append((i, gap, spread))
    return SufficientReport(viol, minviol, probes, gaps)
