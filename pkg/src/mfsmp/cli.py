"""Batch front end: ``python -m mfsmp <subcommand> --config cfg.json``.

Exit status 0 on success, 1 on a computational error (or failed invariants),
2 on a configuration error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import io
from .backward import PicardConfig, RegressionBasis, solve_adjoint, solve_backward_y
from .forward import ControlPolicy, TimeGrid, simulate_forward
from .model import build_model, constraint_from_dict
from .optimizer import OptimizerConfig, cost_from_ensembles, evaluate_gradient, optimize
from .smp import necessary_residual
from .verify import fd_gradient, lq_benchmark, relative_l2, run_invariant_suite

SUBCOMMANDS = ("simulate", "gradient-check", "optimize", "verify", "benchmark-lq")


class Run:
    """Objects built from a resolved configuration."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.model = build_model(cfg["model"]["name"], cfg["model"]["params"])
        self.grid = TimeGrid(cfg["grid"]["T"], cfg["grid"]["N_t"])
        self.basis = RegressionBasis(cfg["basis"]["degree"])
        self.picard = PicardConfig(**cfg["picard"])
        pc = cfg["policy"]
        if pc["file"]:
            try:
                self.policy = io.load_policy(pc["file"])
            except (OSError, KeyError, ValueError) as exc:
                raise io.ConfigError(f"policy.file: cannot load policy ({exc})") from None
            return
        U = constraint_from_dict(cfg["constraint"], self.model.dims.k)
        if U.dim != self.model.dims.k:
            raise io.ConfigError(f"constraint: dimension {U.dim} does not match the model "
                                 f"control dimension {self.model.dims.k}")
        d = ControlPolicy(tuple(pc["features"]), [0.0], U).n_features(self.grid) * U.dim
        if pc["theta0"] == "zeros":
            theta = np.zeros(d)
        else:
            theta = np.array(pc["theta0"], dtype=float)
            if theta.size != d:
                raise io.ConfigError(f"policy.theta0: expected {d} values, got {theta.size}")
        self.policy = ControlPolicy(tuple(pc["features"]), theta, U)

    @property
    def N_p(self):
        return self.cfg["N_p"]

    @property
    def seed(self):
        return self.cfg["seed"]

    @property
    def workers(self):
        return self.cfg["workers"]


def cmd_simulate(run, out):
    fwd = simulate_forward(run.model, run.policy, run.grid, run.N_p, run.seed, workers=run.workers)
    bwd = solve_backward_y(run.model, fwd, run.policy, run.basis)
    cost = cost_from_ensembles(run.model, fwd, bwd)
    lim = run.cfg["export"]["particles"]
    io.export_forward(out / "forward.csv", fwd, lim)
    io.export_backward(out / "backward.csv", fwd, bwd, lim)
    io.write_csv(out / "cost.csv", ["J", "se", "J_weighted"], [(cost.J, cost.se, cost.J_weighted)])
    print(f"J = {cost.J:.6f} +/- {cost.se:.6f}")
    return {"J": cost.J, "se": cost.se}


def cmd_gradient_check(run, out):
    ev = evaluate_gradient(run.model, run.policy, run.grid, run.N_p, run.seed, run.basis,
                           run.picard, run.workers)
    fd = fd_gradient(run.model, run.policy, run.cfg["gradient_check"]["eps"], run.grid, run.N_p,
                     run.seed, run.basis, run.workers)
    g = ev.grad.grad_theta
    err = relative_l2(g, fd)
    rows = [(i, g[i], fd[i], abs(g[i] - fd[i]), err) for i in range(g.size)]
    io.write_csv(out / "gradient_check.csv",
                 ["param", "smp", "fd", "abs_error", "max_relative_error"], rows)
    res = necessary_residual(run.model, ev.fwd, ev.bwd, ev.adj, run.policy, gf=ev.grad)
    lim = run.cfg["export"]["particles"]
    io.export_adjoint(out / "adjoint.csv", ev.fwd, ev.adj, lim)
    io.export_picard(out / "picard.csv", ev.adj.picard_trace)
    io.export_gradient(out / "gradient.csv", ev.fwd, ev.grad, res.residual)
    print(f"{'param':>5} {'smp':>14} {'fd':>14}")
    for i, a, b, _, _ in rows:
        print(f"{i:5d} {a:14.6e} {b:14.6e}")
    print(f"relative L2 error {err:.3e}")
    return {"relative_l2_error": err}


def cmd_optimize(run, out):
    oc = OptimizerConfig(**run.cfg["optimizer"])
    best, trace = optimize(run.model, run.policy, oc, grid=run.grid, N_p=run.N_p, seed=run.seed,
                           basis=run.basis, picard=run.picard, workers=run.workers)
    io.export_trace(out / "trace.csv", trace)
    io.save_policy(out / "policy.json", best)
    print(f"status {trace.status}; best J {trace.best_J:.6f} at iteration {trace.best_iter + 1}")
    return {"status": trace.status, "best_J": trace.best_J, "theta": best.theta.tolist()}


def cmd_verify(run, out):
    rep = run_invariant_suite(run.cfg["verify"]["scope"], seed=run.seed)
    text = rep.text()
    (out / "report.txt").write_text(text + "\n")
    io.write_csv(out / "margins.csv", ["scope", "invariant", "label", "margin", "passed"],
                 rep.margin_rows())
    print(text)
    return {"passed": rep.passed}, (0 if rep.passed else 1)


def cmd_benchmark_lq(run, out):
    if run.model.name != "lq":
        raise io.ConfigError("model.name: benchmark-lq requires the 'lq' model")
    prm = dict(run.model.params, T=run.grid.T)
    ric = lq_benchmark(prm, N_t=run.grid.N_t)
    oc = OptimizerConfig(**run.cfg["optimizer"])
    best, trace = optimize(run.model, run.policy, oc, grid=run.grid, N_p=run.N_p, seed=run.seed,
                           basis=run.basis, picard=run.picard, workers=run.workers)
    ev = evaluate_gradient(run.model, best, run.grid, run.N_p, run.seed, run.basis, run.picard,
                           run.workers)
    res = necessary_residual(run.model, ev.fwd, ev.bwd, ev.adj, best, gf=ev.grad)
    N = run.grid.N_t
    gain = ev.fwd.ubar[:N, 0] / ev.fwd.xbar[:N, 0]
    gerr = relative_l2(gain, ric.gain[:N])
    cerr = abs(ev.cost.J - ric.cost) / abs(ric.cost)
    rows = [(i, run.grid.t[i], ric.gain[i], gain[i], ric.control()[i], ev.fwd.ubar[i, 0],
             res.residual[i]) for i in range(N)]
    io.write_csv(out / "benchmark.csv", ["node", "t", "gain_riccati", "gain_estimated",
                                         "u_riccati", "u_mean", "residual"], rows)
    io.write_csv(out / "benchmark_summary.csv",
                 ["J", "se", "J_riccati", "J_full_information", "cost_rel_error",
                  "gain_rel_l2_error", "min_residual"],
                 [(ev.cost.J, ev.cost.se, ric.cost, ric.full_info_cost, cerr, gerr, res.min)])
    io.export_trace(out / "trace.csv", trace)
    io.save_policy(out / "policy.json", best)
    print(f"gain relative L2 error {gerr:.3e}")
    print(f"cost {ev.cost.J:.6f} vs Riccati {ric.cost:.6f} (relative error {cerr:.3e})")
    print(f"min normalised residual {res.min:.3e}")
    return {"gain_rel_l2_error": gerr, "cost_rel_error": cerr, "min_residual": res.min}


COMMANDS = {
    "simulate": cmd_simulate,
    "gradient-check": cmd_gradient_check,
    "optimize": cmd_optimize,
    "verify": cmd_verify,
    "benchmark-lq": cmd_benchmark_lq,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="mfsmp", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="JSON run configuration or manifest")
    ap.add_argument("--out", default=None, help="output directory (overrides config and "
                                                f"${io.OUTPUT_ENV})")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = io.load_config(args.config)
        out = io.output_dir(cfg, args.out)
        run = Run(cfg)
    except io.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        result = COMMANDS[args.subcommand](run, out)
    except io.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error in {args.subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    status = 0
    if isinstance(result, tuple):
        result, status = result
    io.write_manifest(out / "manifest.json", cfg, args.subcommand, result)
    return status


if __name__ == "__main__":
    sys.exit(main())
