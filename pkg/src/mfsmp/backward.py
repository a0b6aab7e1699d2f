"""Backward component and adjoint system, solved by least-squares Monte Carlo."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forward import ForwardEnsemble
from .model import CoefficientSet
from .regression import NodeRegressor, RegressionError, polynomial_design

RHO_FLOOR = 1e-12


class PicardError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = list(trace)


@dataclass
class RegressionBasis:
    """Total-degree polynomial basis in the state and observation statistics."""

    degree: int = 2

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValueError(f"basis degree must be a non-negative integer, got {self.degree!r}")

    def design(self, fwd: ForwardEnsemble, i: int):
        return polynomial_design(fwd.regression_variables(i), self.degree)


@dataclass
class BackwardEnsemble:
    y: np.ndarray  # (N_p, N_t+1, m)
    z1: np.ndarray
    z2: np.ndarray
    yhat: np.ndarray  # regression estimate E[y(t_{i+1}) | t_i]; equals y at the last node
    diagnostics: list = field(default_factory=list)

    def l_args(self, fwd: ForwardEnsemble, i: int):
        """Arguments of the running cost at node i (after the driver step)."""
        y, z1, z2 = self.y[:, i], self.z1[:, i], self.z2[:, i]
        return (fwd.grid.t[i], fwd.x[:, i], y, z1, z2, fwd.u[:, i],
                _bc(fwd.xbar[i], fwd.x[:, i]), _bc(y.mean(0), y), _bc(z1.mean(0), z1),
                _bc(z2.mean(0), z2), _bc(fwd.ubar[i], fwd.u[:, i]))

    def f_args(self, fwd: ForwardEnsemble, i: int):
        """Arguments of the driver at node i (explicit in the regression estimate)."""
        y, z1, z2 = self.yhat[:, i], self.z1[:, i], self.z2[:, i]
        return (fwd.grid.t[i], fwd.x[:, i], y, z1, z2, fwd.u[:, i],
                _bc(fwd.xbar[i], fwd.x[:, i]), _bc(y.mean(0), y), _bc(z1.mean(0), z1),
                _bc(z2.mean(0), z2), _bc(fwd.ubar[i], fwd.u[:, i]))


def _bc(v, like):
    return np.broadcast_to(v, like.shape)


def solve_backward_y(model: CoefficientSet, fwd: ForwardEnsemble, policy=None,
                     basis: RegressionBasis | None = None) -> BackwardEnsemble:
    """Backward Euler for (y, z1, z2) from ``y(T) = phi(x(T), xbar(T))``.

    Per node: ``yhat = E[y_{i+1}]``, ``z1 = E[(y_{i+1} - yhat) dW] / dt``,
    ``z2 = E[(y_{i+1} - yhat) dY] / dt`` and ``y_i = yhat - (f - z2 h) dt`` with
    the driver taken at ``yhat``.  Subtracting the fitted mean before forming
    the z products only removes a term with zero conditional mean.
    """
    basis = basis or RegressionBasis()
    grid, N_t, dt = fwd.grid, fwd.grid.N_t, fwd.grid.dt
    N_p, m = fwd.N_p, model.dims.m
    y = np.zeros((N_p, N_t + 1, m))
    z1 = np.zeros_like(y)
    z2 = np.zeros_like(y)
    yhat = np.zeros_like(y)
    xN = fwd.x[:, N_t]
    y[:, N_t] = model.phi(xN, _bc(fwd.xbar[N_t], xN))
    yhat[:, N_t] = y[:, N_t]
    bwd = BackwardEnsemble(y, z1, z2, yhat)
    diags = [None] * N_t
    for i in range(N_t - 1, -1, -1):
        reg = NodeRegressor(basis.design(fwd, i))
        target = y[:, i + 1]
        yhat[:, i] = reg.fit(target, record=True)
        res = target - yhat[:, i]
        dW = fwd.noise.dW[:, i:i + 1]
        dY = fwd.noise.dY[:, i:i + 1]
        zz = reg.fit(np.concatenate([res * dW, res * dY], axis=1)) / dt
        z1[:, i], z2[:, i] = zz[:, :m], zz[:, m:]
        drv = model.f(*bwd.f_args(fwd, i))
        y[:, i] = yhat[:, i] - (drv - z2[:, i] * fwd.h[:, i:i + 1]) * dt
        if not np.all(np.isfinite(y[:, i])):
            raise RegressionError(f"non-finite y at node {i}")
        diags[i] = reg.diag
    bwd.diagnostics = diags
    return bwd


@dataclass
class AdjointEnsemble:
    p: np.ndarray  # (N_p, N_t+1, n)
    q1: np.ndarray
    q2: np.ndarray
    k: np.ndarray  # (N_p, N_t+1, m), value entering node i
    r: np.ndarray  # (N_p, N_t+1)
    R1: np.ndarray
    R2: np.ndarray
    phat: np.ndarray  # E-tilde[p_{i+1} | t_i]
    ktilde: np.ndarray  # k after the running-cost update at node i
    picard_trace: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)


@dataclass
class PicardConfig:
    max_sweeps: int = 25
    damping: float = 0.5
    tol: float = 1e-6
    warm_start: bool = True

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_sweeps < 1 or not self.tol > 0:
            raise ValueError("max_sweeps must be >= 1 and tol > 0")


def _mean_t(dmat, vec):
    """mean_j of dmat_j^T vec_j for dmat (N, a, b), vec (N, a)."""
    return np.einsum("jab,ja->b", dmat, vec) / vec.shape[0]


def _forward_k(model, fwd, bwd):
    """Forward sweep for the backward-equation adjoint.

    Works with ``K = -rho k`` so that the recursion is linear with
    particle-wise coefficients; returns k before and after the running-cost
    update at each node.
    """
    N_t, dt = fwd.grid.N_t, fwd.grid.dt
    N_p, m = fwd.N_p, model.dims.m
    Kpre = np.zeros((N_p, N_t + 1, m))
    Kpost = np.zeros_like(Kpre)
    y0bar = bwd.y[:, 0].mean(axis=0)
    Kpre[:, 0] = model.deriv("gamma", y0bar[None, :])["y"][0]
    for i in range(N_t + 1):
        rho = fwd.rho[:, i:i + 1]
        if i == N_t:
            Kpost[:, i] = Kpre[:, i]
            break
        ld = model.deriv("l", *bwd.l_args(fwd, i))
        fd = model.deriv("f", *bwd.f_args(fwd, i))
        K = Kpre[:, i] + (rho * ld["y"] + (rho * ld["ym"]).mean(0)) * dt
        Kpost[:, i] = K
        a_y = np.einsum("jab,ja->jb", fd["y"], K) + _mean_t(fd["ym"], K)
        a_1 = (np.einsum("jab,ja->jb", fd["z1"], K) + _mean_t(fd["z1m"], K)
               - rho * ld["z1"] - (rho * ld["z1m"]).mean(0))
        a_2 = (np.einsum("jab,ja->jb", fd["z2"], K) + _mean_t(fd["z2m"], K)
               - fwd.h[:, i:i + 1] * K - rho * ld["z2"] - (rho * ld["z2m"]).mean(0))
        Kpre[:, i + 1] = (K - a_y * dt - a_1 * fwd.noise.dW[:, i:i + 1]
                          - a_2 * fwd.noise.dY[:, i:i + 1])
    rho = np.maximum(fwd.rho, RHO_FLOOR)[:, :, None]
    return -Kpre / rho, -Kpost / rho


def _solve_p(model, fwd, bwd, k, ktilde, basis):
    from .smp import node_input, modified_partials

    N_t, dt, t = fwd.grid.N_t, fwd.grid.dt, fwd.grid.t
    N_p, n = fwd.N_p, model.dims.n
    p = np.zeros((N_p, N_t + 1, n))
    q1, q2, phat = np.zeros_like(p), np.zeros_like(p), np.zeros_like(p)
    r = np.zeros((N_p, N_t + 1))
    R1, R2 = np.zeros_like(r), np.zeros_like(r)
    xN = fwd.x[:, N_t]
    xmN = _bc(fwd.xbar[N_t], xN)
    rhoN = fwd.rho[:, N_t]
    rinv = 1.0 / np.maximum(rhoN, RHO_FLOOR)
    r[:, N_t] = model.Phi(xN, xmN)
    Pd = model.deriv("Phi", xN, xmN)
    fd = model.deriv("phi", xN, xmN)
    kN = k[:, N_t]
    p[:, N_t] = (Pd["x"] + (rhoN[:, None] * Pd["xm"]).mean(0) * rinv[:, None]
                 - np.einsum("jab,ja->jb", fd["x"], kN)
                 - _mean_t(fd["xm"], rhoN[:, None] * kN) * rinv[:, None])
    phat[:, N_t] = p[:, N_t]
    diags = [None] * N_t
    for i in range(N_t - 1, -1, -1):
        h = fwd.h[:, i]
        dW = fwd.noise.dW[:, i:i + 1]
        dYc = fwd.noise.dY[:, i:i + 1] - h[:, None] * dt
        w = np.exp(h * fwd.noise.dY[:, i] - 0.5 * h * h * dt)
        reg = NodeRegressor(basis.design(fwd, i), weights=w)
        target = np.concatenate([r[:, i + 1, None], p[:, i + 1]], axis=1)
        fit = reg.fit(target, record=True)
        res = target - fit
        zz = reg.fit(np.concatenate([res * dW, res * dYc], axis=1)) / dt
        R1[:, i], q1[:, i] = zz[:, 0], zz[:, 1:1 + n]
        R2[:, i], q2[:, i] = zz[:, 1 + n], zz[:, 2 + n:]
        phat[:, i] = fit[:, 1:]
        r[:, i] = fit[:, 0] + model.l(*bwd.l_args(fwd, i)) * dt
        inp = node_input(model, fwd, bwd, i, ktilde[:, i], phat[:, i], q1[:, i], q2[:, i], R2[:, i])
        Hx = modified_partials(model, inp, "x")
        Hxm = modified_partials(model, inp, "xm")
        rho = fwd.rho[:, i]
        corr = (rho[:, None] * Hxm).mean(0) / np.maximum(rho, RHO_FLOOR)[:, None]
        p[:, i] = phat[:, i] + (Hx + corr) * dt
        if not (np.all(np.isfinite(p[:, i])) and np.all(np.isfinite(r[:, i]))):
            raise RegressionError(f"non-finite adjoint at node {i}")
        diags[i] = reg.diag
    return p, q1, q2, phat, r, R1, R2, diags


def solve_adjoint(model: CoefficientSet, fwd: ForwardEnsemble, bwd: BackwardEnsemble, policy=None,
                  picard: PicardConfig | dict | None = None,
                  basis: RegressionBasis | None = None) -> AdjointEnsemble:
    """Adjoint processes (p, q1, q2, k, r, R1, R2) of the mean-field control problem.

    ``r`` carries the value of the remaining cost per unit density, ``p`` the
    state costate and ``k`` the costate of the backward equation.  The k-path
    is advanced forward from ``k(0) = -gamma_y(ybar(0))``, the (r, p) pair is
    solved backward with regressions under the locally tilted weights
    ``rho(t_{i+1}) / rho(t_i)``.  The two are coupled through a damped Picard
    iteration on k.
    """
    basis = basis or RegressionBasis()
    if picard is None:
        picard = PicardConfig()
    elif isinstance(picard, dict):
        picard = PicardConfig(**picard)
    k_new, kt_new = _forward_k(model, fwd, bwd)
    if picard.warm_start:
        k, kt = k_new, kt_new
    else:
        k, kt = np.zeros_like(k_new), np.zeros_like(kt_new)
    k0 = k_new[:, 0].copy()
    trace = []
    solved_with = None
    for sweep in range(picard.max_sweeps):
        sol = _solve_p(model, fwd, bwd, k, kt, basis)
        solved_with = (k, kt)
        k_new, kt_new = _forward_k(model, fwd, bwd)
        resid = float(np.sqrt(((k_new - k) ** 2).sum(axis=2).mean(axis=0)).max(initial=0.0))
        trace.append(resid)
        a = picard.damping
        k = (1.0 - a) * k + a * k_new
        kt = (1.0 - a) * kt + a * kt_new
        k[:, 0] = k0
        if resid < picard.tol:
            break
    else:
        raise PicardError(f"Picard iteration did not converge in {picard.max_sweeps} sweeps "
                          f"(last residual {trace[-1]:.3e})", trace)
    if not (np.array_equal(solved_with[0], k) and np.array_equal(solved_with[1], kt)):
        sol = _solve_p(model, fwd, bwd, k, kt, basis)
    p, q1, q2, phat, r, R1, R2, diags = sol
    return AdjointEnsemble(p, q1, q2, k, r, R1, R2, phat, kt, trace, diags)
