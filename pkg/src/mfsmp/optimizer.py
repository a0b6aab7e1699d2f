"""Cost evaluation and projected-gradient optimisation over policy parameters."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .backward import BackwardEnsemble, PicardConfig, RegressionBasis, solve_adjoint, solve_backward_y
from .forward import ControlPolicy, ForwardEnsemble, TimeGrid, girsanov_weights, simulate_forward
from .smp import gradient, necessary_residual


@dataclass
class CostEstimate:
    J: float
    se: float
    J_weighted: float  # same cost assembled node by node from normalised weights
    per_particle: np.ndarray = field(repr=False, default=None)


def cost_from_ensembles(model, fwd: ForwardEnsemble, bwd: BackwardEnsemble) -> CostEstimate:
    """Density-weighted running and terminal cost plus the initial cost.

    The first form sums each particle's path cost then averages; the second
    forms the expectation under the controlled measure at every node from the
    self-normalised weights and sums over time.
    """
    grid = fwd.grid
    N_t, dt = grid.N_t, grid.dt
    lvals = np.empty((fwd.N_p, N_t))
    for i in range(N_t):
        lvals[:, i] = model.l(*bwd.l_args(fwd, i))
    xN = fwd.x[:, N_t]
    Phi = model.Phi(xN, np.broadcast_to(fwd.xbar[N_t], xN.shape))
    gam = float(model.gamma(bwd.y[:, 0].mean(axis=0)[None, :])[0])
    path = (fwd.rho[:, :N_t] * lvals).sum(axis=1) * dt + fwd.rho[:, N_t] * Phi
    J = float(path.mean()) + gam
    se = float(path.std(ddof=1) / np.sqrt(fwd.N_p))
    alt = 0.0
    for i in range(N_t):
        alt += fwd.rho[:, i].mean() * (girsanov_weights(fwd, i) @ lvals[:, i]) * dt
    alt += fwd.rho[:, N_t].mean() * (girsanov_weights(fwd, N_t) @ Phi)
    alt += gam
    if not (np.isfinite(J) and np.isfinite(alt)):
        raise FloatingPointError("non-finite cost estimate")
    return CostEstimate(J, se, float(alt), path)


def evaluate_cost(model, policy, grid: TimeGrid, N_p: int, seed: int, basis=None,
                  workers: int = 1) -> CostEstimate:
    fwd = simulate_forward(model, policy, grid, N_p, seed, workers=workers)
    bwd = solve_backward_y(model, fwd, policy, basis)
    return cost_from_ensembles(model, fwd, bwd)


@dataclass
class Evaluation:
    fwd: ForwardEnsemble
    bwd: BackwardEnsemble
    adj: object
    cost: CostEstimate
    grad: object


def evaluate_gradient(model, policy, grid, N_p, seed, basis=None, picard=None, workers=1):
    """Full forward, backward and adjoint solve followed by the policy gradient."""
    fwd = simulate_forward(model, policy, grid, N_p, seed, workers=workers)
    bwd = solve_backward_y(model, fwd, policy, basis)
    adj = solve_adjoint(model, fwd, bwd, policy, picard, basis)
    return Evaluation(fwd, bwd, adj, cost_from_ensembles(model, fwd, bwd),
                      gradient(model, fwd, bwd, adj, policy))


def iteration_seed(seed, it):
    """Common-random-number seed for outer iteration ``it``."""
    return int(np.random.SeedSequence([int(seed), 0x5EED, int(it)]).generate_state(1)[0])


@dataclass
class OptimizerConfig:
    max_iters: int = 50
    step0: float = 1.0
    beta: float = 0.5
    c1: float = 1e-4
    grad_tol: float = 1e-6
    residual_tol: float | None = None
    max_backtracks: int = 30
    max_failures: int = 5
    max_step: float = 1e3
    residual_samples: int = 64

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not 0 < self.c1 < 1:
            raise ValueError("c1 must lie in (0, 1)")
        if not self.grad_tol > 0 or (self.residual_tol is not None and not self.residual_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1 or not self.step0 > 0:
            raise ValueError("max_iters must be >= 1 and step0 > 0")


@dataclass
class IterationRecord:
    iter: int
    J: float
    se: float
    grad_norm: float
    step: float
    residual: float
    seconds: float
    accepted: bool
    backtracks: int


@dataclass
class RunTrace:
    records: list = field(default_factory=list)
    status: str = "running"
    best_iter: int = 0
    best_J: float = np.nan
    thetas: list = field(default_factory=list)

    def as_rows(self):
        return [(r.iter, r.J, r.se, r.grad_norm, r.step, r.residual, r.seconds) for r in self.records]


def optimize(model, policy: ControlPolicy, config: OptimizerConfig | None = None, *, grid: TimeGrid,
             N_p: int, seed: int, basis=None, picard=None, workers=1, callback=None):
    """Projected gradient descent on the policy parameters with Armijo backtracking.

    Every outer iteration draws fresh common random numbers; the line search
    reuses them.  Iterates are compared at the end on one shared evaluation
    seed and the lowest-cost one is returned together with the trace.
    """
    cfg = config or OptimizerConfig()
    basis = basis or RegressionBasis()
    picard = picard or PicardConfig()
    theta = np.array(policy.theta, dtype=float)
    step = cfg.step0
    trace = RunTrace()
    failures = 0
    for it in range(cfg.max_iters):
        t0 = time.perf_counter()
        s_it = iteration_seed(seed, it)
        pol = policy.with_theta(theta)
        ev = evaluate_gradient(model, pol, grid, N_p, s_it, basis, picard, workers)
        g = ev.grad.grad_theta
        gn = float(np.linalg.norm(g))
        res = necessary_residual(model, ev.fwd, ev.bwd, ev.adj, pol, samples=cfg.residual_samples,
                                 seed=s_it, gf=ev.grad).min
        trace.thetas.append(theta.copy())
        J0 = ev.cost.J
        if gn < cfg.grad_tol or (cfg.residual_tol is not None and res >= -cfg.residual_tol):
            rec = IterationRecord(it + 1, J0, ev.cost.se, gn, 0.0, res,
                                  time.perf_counter() - t0, False, 0)
            trace.records.append(rec)
            if callback is not None:
                callback(rec)
            trace.status = "converged"
            break
        accepted, s, nb = False, step, 0
        while nb <= cfg.max_backtracks:
            trial = theta - s * g
            Jt = evaluate_cost(model, policy.with_theta(trial), grid, N_p, s_it, basis, workers).J
            if Jt <= J0 - cfg.c1 * s * gn * gn:
                accepted = True
                break
            s *= cfg.beta
            nb += 1
        if accepted:
            theta = trial
            step = min(s / cfg.beta, cfg.max_step)
            failures = 0
        else:
            failures += 1
        rec = IterationRecord(it + 1, J0, ev.cost.se, gn, s if accepted else 0.0, res,
                              time.perf_counter() - t0, accepted, nb)
        trace.records.append(rec)
        if callback is not None:
            callback(rec)
        if failures >= cfg.max_failures:
            trace.status = "line-search-failure"
            break
    else:
        trace.status = "max-iters"
        trace.thetas.append(theta.copy())
    # pick the best iterate on a common evaluation seed
    uniq = []
    for th in trace.thetas:
        if not any(np.array_equal(th, v) for v in uniq):
            uniq.append(th)
    costs = [evaluate_cost(model, policy.with_theta(th), grid, N_p, seed, basis, workers).J
             for th in uniq]
    best = int(np.argmin(costs))
    trace.best_J = float(costs[best])
    trace.best_iter = next(i for i, th in enumerate(trace.thetas) if np.array_equal(th, uniq[best]))
    return policy.with_theta(uniq[best]), trace
