"""Independent oracles and the invariant suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .backward import PicardConfig, RegressionBasis, solve_adjoint, solve_backward_y
from .forward import ControlPolicy, TimeGrid, generate_noise, path_statistics, simulate_forward
from .model import (Ball, Box, CoefficientSet, Dimensions, build_model, lq_model,
                    validate_assumptions, with_cost_shift)
from .optimizer import evaluate_cost, evaluate_gradient
from .regression import NodeRegressor, polynomial_design
from .smp import HamiltonianInput, modified_partials, necessary_residual


# ---------------------------------------------------------------------------
# finite-difference oracle


def fd_gradient(model, policy: ControlPolicy, eps, grid: TimeGrid, N_p, seed, basis=None,
                workers=1, theta=None):
    """Central differences of the cost in every policy parameter under common random numbers."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    theta = np.array(policy.theta if theta is None else theta, dtype=float)
    out = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        jp = evaluate_cost(model, policy.with_theta(theta + e), grid, N_p, seed, basis, workers).J
        jm = evaluate_cost(model, policy.with_theta(theta - e), grid, N_p, seed, basis, workers).J
        out[i] = (jp - jm) / (2.0 * eps)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite cost in finite-difference oracle")
    return out


def relative_l2(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


# ---------------------------------------------------------------------------
# Riccati oracle


@dataclass
class RiccatiSolution:
    t: np.ndarray
    P: np.ndarray
    gain: np.ndarray  # -(c/r) P
    mean: np.ndarray  # mean state under the optimal control
    variance: np.ndarray  # variance of the uncontrolled noise part of the state
    cost: float  # optimal cost with the control adapted to an uninformative observation
    full_info_cost: float  # optimal cost under full state feedback
    params: dict = field(default_factory=dict)

    @property
    def P0(self):
        return float(self.P[0])

    def control(self):
        return self.gain * self.mean


def _rk4(fun, y0, t0, t1, steps):
    ys = [np.asarray(y0, dtype=float)]
    h = (t1 - t0) / steps
    y, t = ys[0], t0
    for _ in range(steps):
        k1 = fun(t, y)
        k2 = fun(t + h / 2, y + h / 2 * k1)
        k3 = fun(t + h / 2, y + h / 2 * k2)
        k4 = fun(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
        ys.append(y)
    return np.array(ys)


LQ_KEYS = ("a", "c", "sigma", "q", "r", "g", "x0", "T")


def lq_benchmark(params, N_t=100, substeps=20) -> RiccatiSolution:
    """Scalar Riccati solution for dx = (a x + c u) dt + sigma dW with cost
    ``E[int (q x^2 + r u^2)/2 dt + g x(T)^2 / 2]``.

    ``-P' = 2 a P + q - c^2 P^2 / r``, ``P(T) = g``.  When the observation
    carries no information about the state the best admissible control is
    ``gain(t) * m(t)`` with ``m' = (a + c gain) m``, and its cost adds the
    uncontrollable variance term to ``x0^2 P(0) / 2``.
    """
    p = dict(params)
    missing = [k for k in LQ_KEYS if k not in p]
    if missing:
        raise ValueError(f"lq_benchmark missing parameters {missing}")
    a, c, s, q, r, g, x0, T = (float(p[k]) for k in LQ_KEYS)
    if not r > 0:
        raise ValueError("r must be positive")
    n = N_t * substeps
    # P(0) from the backward integration, then everything forward from it
    P0 = _rk4(lambda tau, P: 2 * a * P + q - c * c * P * P / r, [g], 0.0, T, n)[-1, 0]

    def rhs(t, y):
        P, m, v = y[0], y[1], y[2]
        return np.array([-(2 * a * P + q - c * c * P * P / r), (a - c * c * P / r) * m,
                         2 * a * v + s * s, s * s * P, q * v])

    sol = _rk4(rhs, [P0, x0, 0.0, 0.0, 0.0], 0.0, T, n)
    P_fine, m_f, v_f = sol[:, 0], sol[:, 1], sol[:, 2]
    t_fine = np.linspace(0.0, T, n + 1)
    gain_fine = -(c / r) * P_fine
    sel = np.arange(0, n + 1, substeps)
    cost = 0.5 * x0 * x0 * P0 + 0.5 * sol[-1, 4] + 0.5 * g * v_f[-1]
    full = 0.5 * (x0 * x0 * P0 + sol[-1, 3])
    return RiccatiSolution(t_fine[sel], P_fine[sel], gain_fine[sel], m_f[sel], v_f[sel],
                           float(cost), float(full), {k: float(p[k]) for k in LQ_KEYS})


# ---------------------------------------------------------------------------
# classical reference path


def reference_gradient(model: CoefficientSet, policy: ControlPolicy, grid: TimeGrid, N_p, seed,
                       basis=None, workers=1):
    """Fully observed, interaction-free gradient computed without densities.

    Valid for models with no observation drift, no backward component and no
    dependence on mean-field arguments; it shares nothing with the main
    engines beyond the noise generator and the regression routine.
    Returns ``(grad_theta, p, cost)``.
    """
    basis = basis or RegressionBasis()
    noise = generate_noise(grid, N_p, seed, workers)
    Y = noise.Y
    psi = policy.features(grid, Y)
    u = policy.controls(grid, Y, psi)
    N_t, dt, t = grid.N_t, grid.dt, grid.t
    n = model.dims.n
    zx = np.zeros((N_p, n))
    zu = np.zeros_like(u[:, 0])
    zy = np.zeros((N_p, model.dims.m))
    x = np.empty((N_p, N_t + 1, n))
    x[:, 0] = model.x0
    for i in range(N_t):
        a = (t[i], x[:, i], u[:, i], zx, zu)
        x[:, i + 1] = (x[:, i] + model.b(*a) * dt + model.sigma1(*a) * noise.dW[:, i:i + 1]
                       + model.sigma2(*a) * noise.dY[:, i:i + 1])
    allstats = path_statistics(Y)
    stats = {name: allstats[name] for name in policy.path_feature_names()}

    def design(i):
        cols = [x[:, i], Y[:, i:i + 1]] + [v[:, i:i + 1] for v in stats.values()]
        return polynomial_design(np.concatenate(cols, axis=1), basis.degree)

    def largs(i):
        return (t[i], x[:, i], zy, zy, zy, u[:, i], zx, zy, zy, zy, zu)

    cost = np.zeros(N_p)
    for i in range(N_t):
        cost += model.l(*largs(i)) * dt
    cost += model.Phi(x[:, N_t], zx)
    p = model.deriv("Phi", x[:, N_t], zx)["x"].copy()
    g = np.zeros_like(u)
    for i in range(N_t - 1, -1, -1):
        reg = NodeRegressor(design(i))
        ph = reg.fit(p)
        res = p - ph
        zz = reg.fit(np.concatenate([res * noise.dW[:, i:i + 1], res * noise.dY[:, i:i + 1]],
                                    axis=1)) / dt
        q1, q2 = zz[:, :n], zz[:, n:]
        a = (t[i], x[:, i], u[:, i], zx, zu)
        ld = model.deriv("l", *largs(i))
        bd, s1d, s2d = (model.deriv(nm, *a) for nm in ("b", "sigma1", "sigma2"))

        def H(slot):
            return (ld[slot] + np.einsum("jab,ja->jb", bd[slot], ph)
                    + np.einsum("jab,ja->jb", s1d[slot], q1) + np.einsum("jab,ja->jb", s2d[slot], q2))

        g[:, i] = H("u")
        p = ph + H("x") * dt
    return policy.pullback(g, grid, Y, psi), p, float(cost.mean())


# ---------------------------------------------------------------------------
# invariant suite


@dataclass
class InvariantResult:
    name: str
    scope: str
    passed: bool
    margin: float
    detail: str = ""
    margins: list = field(default_factory=list)  # (label, value) pairs
    seconds: float = 0.0


@dataclass
class SuiteReport:
    results: list

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def text(self):
        lines = []
        for r in self.results:
            tag = "PASS" if r.passed else "FAIL"
            lines.append(f"{tag} {r.scope:<16} {r.name:<34} margin={r.margin:+.3e}  {r.detail}")
        n_fail = sum(not r.passed for r in self.results)
        lines.append(f"{len(self.results) - n_fail} passed, {n_fail} failed")
        return "\n".join(lines)

    def margin_rows(self):
        rows = []
        for r in self.results:
            rows.append((r.scope, r.name, "overall", r.margin, int(r.passed)))
            for label, v in r.margins:
                rows.append((r.scope, r.name, label, v, int(r.passed)))
        return rows


INVARIANTS = {}


def invariant(scope, name):
    def deco(fn):
        INVARIANTS[name] = (scope, fn)
        return fn
    return deco


def _ctx_models(ctx):
    return ctx.get("models") or {k: build_model(k) for k in ("lq", "mean_field_lq", "nonconvex")}


@invariant("model", "model.derivative_consistency")
def _inv_derivatives(ctx):
    worst, detail, margins = 0.0, [], []
    for name, mdl in _ctx_models(ctx).items():
        rep = validate_assumptions(mdl, probes=100, seed=ctx["seed"])
        worst = max(worst, rep.max_error)
        margins.append((name, 1e-5 - rep.max_error))
        if rep.flagged:
            detail.append(f"{name}: " + ", ".join(f"{m}_{s}={e:.2e}" for m, s, e in rep.flagged))
        if rep.bound_violations:
            detail.append(f"{name}: bound violations {len(rep.bound_violations)}")
    ok = worst <= 1e-5 and not detail
    return ok, 1e-5 - worst, "; ".join(detail) or f"max error {worst:.2e}", margins


@invariant("model", "model.constraint_identities")
def _inv_constraints(ctx):
    rng = np.random.default_rng(ctx["seed"])
    worst = 0.0
    for U in (Box([-1.0, 0.0], [1.0, 2.0]), Ball(2.0, dim=2), Box([-1.0], [1.0])):
        w = 5 * rng.standard_normal((1000, U.dim))
        pw = U.project(w)
        worst = max(worst, np.abs(U.project(pw) - pw).max())
        a, b = U.sample(1000, rng), U.sample(1000, rng)
        lam = rng.random((1000, 1))
        if not np.all(U.contains(lam * a + (1 - lam) * b)) or not np.all(U.contains(pw)):
            return False, -1.0, f"{U!r} convexity/membership failed", []
        worst = max(worst, np.abs(U.project(a) - a).max())
    return worst <= 1e-12, 1e-12 - worst, f"max projection defect {worst:.1e}", []


@invariant("forward_engine", "forward.martingale")
def _inv_martingale(ctx):
    mdl = build_model("nonconvex")
    grid = TimeGrid(1.0, 50)
    pol = ControlPolicy(("1", "Y"), [0.3, 0.5], Box([-2.0], [2.0]))
    fwd = simulate_forward(mdl, pol, grid, 10_000, ctx["seed"])
    se = fwd.rho.std(axis=0, ddof=1) / np.sqrt(fwd.N_p)
    dev = np.abs(fwd.rho.mean(axis=0) - 1.0)
    z = np.where(se > 0, dev / np.maximum(se, 1e-300), 0.0)
    margins = [(f"node{i}", 3.0 - float(v)) for i, v in enumerate(z)]
    return bool(np.all(z <= 3.0)), 3.0 - float(z.max()), f"max deviation {z.max():.2f} SE", margins


@invariant("forward_engine", "forward.closed_form_density")
def _inv_density(ctx):
    c = 0.7
    mdl = lq_model(Dimensions(1), [0.0], h={"const": c})
    grid = TimeGrid(1.0, 40)
    fwd = simulate_forward(mdl, ControlPolicy(("1",), [0.0]), grid, 500, ctx["seed"])
    exact = np.exp(c * fwd.Y - 0.5 * c * c * grid.t)
    err = float(np.abs(fwd.rho / exact - 1).max())
    return err <= 1e-12, 1e-12 - err, f"max relative error {err:.1e}", []


@invariant("forward_engine", "forward.adaptedness")
def _inv_adapted(ctx):
    mdl = build_model("nonconvex")
    grid = TimeGrid(1.0, 20)
    pol = ControlPolicy(("1", "Y", "Yavg", "Ymax"), [0.1, 0.5, -0.3, 0.2], Box([-2.0], [2.0]))
    noise = generate_noise(grid, 300, ctx["seed"])
    base = simulate_forward(mdl, pol, grid, 300, ctx["seed"], noise=noise)
    worst = 0.0
    for cut in (5, 12):
        dY = noise.dY.copy()
        dY[:, cut:] = 0.0
        alt = simulate_forward(mdl, pol, grid, 300, ctx["seed"],
                               noise=type(noise)(noise.dW, dY))
        s = slice(0, cut + 1)
        worst = max(worst, np.abs(alt.u[:, s] - base.u[:, s]).max(),
                    np.abs(alt.x[:, s] - base.x[:, s]).max(),
                    np.abs(alt.rho[:, s] - base.rho[:, s]).max())
    return worst == 0.0, -worst, f"max change before cut {worst:.1e}", []


@invariant("forward_engine", "forward.worker_determinism")
def _inv_workers(ctx):
    mdl = build_model("mean_field_lq")
    grid = TimeGrid(1.0, 20)
    pol = ControlPolicy(("1", "Y"), [0.2, -0.1])
    a = simulate_forward(mdl, pol, grid, 1000, ctx["seed"], workers=1)
    b = simulate_forward(mdl, pol, grid, 1000, ctx["seed"], workers=4)
    same = np.array_equal(a.x, b.x) and np.array_equal(a.rho, b.rho)
    return same, 0.0 if same else -1.0, "bit-identical" if same else "differs", []


def _small_setup(name, seed, N_p=2000, N_t=20):
    mdl = build_model(name)
    grid = TimeGrid(1.0, N_t)
    pol = ControlPolicy(("1", "t", "Y"), [0.2, -0.3, 0.4], Box([-2.0], [2.0]))
    fwd = simulate_forward(mdl, pol, grid, N_p, seed)
    bwd = solve_backward_y(mdl, fwd, pol)
    adj = solve_adjoint(mdl, fwd, bwd, pol)
    return mdl, grid, pol, fwd, bwd, adj


@invariant("backward_engine", "backward.pinning")
def _inv_pinning(ctx):
    worst = 0.0
    for name in ("mean_field_lq", "nonconvex"):
        mdl, grid, pol, fwd, bwd, adj = _small_setup(name, ctx["seed"])
        N = grid.N_t
        xN, xm = fwd.x[:, N], np.broadcast_to(fwd.xbar[N], fwd.x[:, N].shape)
        g = mdl.deriv("gamma", bwd.y[:, 0].mean(0)[None])["y"][0]
        worst = max(worst, np.abs(bwd.y[:, N] - mdl.phi(xN, xm)).max(),
                    np.abs(adj.r[:, N] - mdl.Phi(xN, xm)).max(),
                    np.abs(adj.k[:, 0] + g).max())
    return worst == 0.0, -worst, f"max pinning defect {worst:.1e}", []


@invariant("backward_engine", "backward.normal_equations")
def _inv_normal(ctx):
    worst = 0.0
    for name in ("mean_field_lq", "nonconvex"):
        *_, bwd, adj = _small_setup(name, ctx["seed"])
        for d in bwd.diagnostics + adj.diagnostics:
            worst = max(worst, d.normal_residual)
    return worst <= 1e-8, 1e-8 - worst, f"max relative normal-equation residual {worst:.1e}", []


@invariant("backward_engine", "backward.picard")
def _inv_picard(ctx):
    worst, detail = 0.0, []
    for name in ("lq", "mean_field_lq", "nonconvex"):
        mdl, grid, pol, fwd, bwd, _ = _small_setup(name, ctx["seed"], N_p=1000)
        adj = solve_adjoint(mdl, fwd, bwd, pol, PicardConfig(warm_start=False))
        tr = adj.picard_trace
        mono = all(b <= a * (1 + 1e-12) for a, b in zip(tr[1:], tr[2:]))
        if not mono:
            detail.append(f"{name} not monotone")
        worst = max(worst, tr[-1])
        detail.append(f"{name}: {len(tr)} sweeps")
    ok = worst < 1e-6 and not any("monotone" in d for d in detail)
    return ok, 1e-6 - worst, ", ".join(detail), []


@invariant("smp", "smp.gradient_vs_fd")
def _inv_grad(ctx):
    margins, worst = [], 0.0
    grid = TimeGrid(1.0, 20)
    for name in ("lq", "mean_field_lq", "nonconvex"):
        mdl = build_model(name)
        pol = ControlPolicy(("1", "t", "Y"), [0.2, -0.3, 0.4], Box([-2.0], [2.0]))
        ev = evaluate_gradient(mdl, pol, grid, 4000, ctx["seed"])
        fd = fd_gradient(mdl, pol, 1e-3, grid, 4000, ctx["seed"])
        err = relative_l2(ev.grad.grad_theta, fd)
        margins.append((name, 5e-2 - err))
        worst = max(worst, err)
    return worst <= 5e-2, 5e-2 - worst, f"max relative L2 error {worst:.2e}", margins


@invariant("smp", "smp.cost_shift")
def _inv_shift(ctx):
    grid = TimeGrid(1.0, 20)
    worst = 0.0
    for name in ("lq", "mean_field_lq", "nonconvex"):
        mdl = build_model(name)
        pol = ControlPolicy(("1", "t", "Y"), [0.2, -0.3, 0.4], Box([-2.0], [2.0]))
        a = evaluate_gradient(mdl, pol, grid, 1000, ctx["seed"])
        b = evaluate_gradient(with_cost_shift(mdl, 3.0), pol, grid, 1000, ctx["seed"])
        ra = necessary_residual(mdl, a.fwd, a.bwd, a.adj, pol, gf=a.grad).residual
        rb = necessary_residual(mdl, b.fwd, b.bwd, b.adj, pol, gf=b.grad).residual
        worst = max(worst, np.abs(a.grad.grad_theta - b.grad.grad_theta).max(),
                    np.abs(ra - rb).max(),
                    abs(b.cost.J - a.cost.J - 3.0 * grid.dt * a.fwd.rho[:, :-1].mean(0).sum()))
    return worst <= 1e-10, 1e-10 - worst, f"max change {worst:.1e}", []


@invariant("smp", "smp.substitution_identity")
def _inv_subst(ctx):
    rng = np.random.default_rng(ctx["seed"])
    mdl = build_model("nonconvex", {"s2": 0.0})
    N = 50
    r = lambda: rng.standard_normal((N, 1))  # noqa: E731
    z = np.zeros((N, 1))
    worst = 0.0
    for slot in ("x", "u"):
        inp = HamiltonianInput(0.3, r(), r(), r(), z, r(), r(), r(), r(), z, r(),
                               r(), r(), r(), r(), rng.standard_normal(N))
        mod = modified_partials(mdl, inp, slot)
        fa = inp.fwd_args()
        plain = (mdl.deriv("l", *inp.l_args())[slot]
                 + np.einsum("jab,ja->jb", mdl.deriv("f", *inp.f_args())[slot], inp.k)
                 + np.einsum("jab,ja->jb", mdl.deriv("b", *fa)[slot], inp.p)
                 + np.einsum("jab,ja->jb", mdl.deriv("sigma1", *fa)[slot], inp.q1)
                 + np.einsum("jab,ja->jb", mdl.deriv("sigma2", *fa)[slot], inp.q2)
                 + inp.R2[:, None] * mdl.deriv("h", *fa)[slot])
        worst = max(worst, np.abs(mod - plain).max())
    return worst == 0.0, -worst, f"max difference {worst:.1e}", []


@invariant("smp", "smp.degeneration")
def _inv_degenerate(ctx):
    mdl = build_model("lq")
    grid = TimeGrid(1.0, 20)
    pol = ControlPolicy(("1", "t", "Y", "Yavg"), [0.2, -0.3, 0.4, 0.1], Box([-2.0], [2.0]))
    ev = evaluate_gradient(mdl, pol, grid, 2000, ctx["seed"])
    ref, _, _ = reference_gradient(mdl, pol, grid, 2000, ctx["seed"])
    err = float(np.abs(ev.grad.grad_theta - ref).max())
    return err <= 1e-10, 1e-10 - err, f"max difference {err:.1e}", []


@invariant("optimizer", "optimizer.cost_identity")
def _inv_cost(ctx):
    grid = TimeGrid(1.0, 20)
    worst = 0.0
    margins = []
    for name in ("lq", "mean_field_lq", "nonconvex"):
        pol = ControlPolicy(("1", "Y"), [0.3, -0.2], Box([-2.0], [2.0]))
        c = evaluate_cost(build_model(name), pol, grid, 2000, ctx["seed"])
        d = abs(c.J - c.J_weighted)
        margins.append((name, 1e-12 - d))
        worst = max(worst, d)
    return worst <= 1e-12, 1e-12 - worst, f"max difference {worst:.1e}", margins


@invariant("verify", "verify.riccati_convergence")
def _inv_riccati(ctx):
    prm = dict(a=0.5, c=1.0, sigma=0.5, q=1.0, r=1.0, g=1.0, x0=1.0, T=1.0)
    a = lq_benchmark(prm, N_t=100, substeps=10).P0
    b = lq_benchmark(prm, N_t=100, substeps=20).P0
    closed = lq_benchmark(dict(prm, a=0.0, q=0.0), N_t=100).P
    t = np.linspace(0, 1, 101)
    err = max(abs(a - b), float(np.abs(closed - 1 / (2 - t)).max()))
    return err < 1e-8, 1e-8 - err, f"P(0) change {abs(a - b):.1e}", []


@invariant("verify", "verify.fd_closed_form")
def _inv_fd(ctx):
    mdl = lq_model(Dimensions(1), [0.0], l={"quad": {("u", "u"): 2.0}})
    grid = TimeGrid(2.0, 10)
    pol = ControlPolicy(("1",), [0.7])
    fd = fd_gradient(mdl, pol, 1e-3, grid, 10, ctx["seed"])
    err = abs(fd[0] - 2 * 0.7 * 2.0)
    return err <= 1e-6, 1e-6 - err, f"error {err:.1e}", []


def run_invariant_suite(scope=None, seed=0, models=None) -> SuiteReport:
    """Run the registered invariants, optionally restricted to some module scopes.

    ``models`` replaces the built-in models checked by the model-level
    invariants (useful to confirm that a planted defect is caught).
    """
    if scope is not None:
        scope = set(scope)
        unknown = scope - {s for s, _ in INVARIANTS.values()}
        if unknown:
            raise ValueError(f"unknown scopes {sorted(unknown)}")
    ctx = {"seed": seed, "models": models}
    out = []
    for name, (sc, fn) in INVARIANTS.items():
        if scope is not None and sc not in scope:
            continue
        t0 = time.perf_counter()
        try:
            ok, margin, detail, margins = fn(ctx)
        except Exception as exc:  # failures are report entries
            ok, margin, detail, margins = False, float("-inf"), f"error: {exc!r}", []
        out.append(InvariantResult(name, sc, bool(ok), float(margin), detail, margins,
                                   time.perf_counter() - t0))
    return SuiteReport(out)
