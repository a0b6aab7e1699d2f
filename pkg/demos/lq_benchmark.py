"""Optimise a scalar LQ problem and compare with the Riccati solution.

The observation carries no information about the state, so the best
admissible control is a deterministic function of time.  A policy linear in a
few Legendre polynomials of time (plus the observation itself, whose optimal
weight is zero) is trained by projected gradient descent and compared with
the Riccati feedback evaluated along the mean trajectory.

    python demos/lq_benchmark.py --iters 30
"""

import argparse

import numpy as np

from mfsmp.forward import ControlPolicy, TimeGrid
from mfsmp.model import Box, build_model
from mfsmp.optimizer import OptimizerConfig, evaluate_gradient, optimize
from mfsmp.smp import necessary_residual
from mfsmp.verify import lq_benchmark, relative_l2


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N_p", type=int, default=10_000)
    ap.add_argument("--N_t", type=int, default=50)
    ap.add_argument("--iters", type=int, default=30)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    mdl = build_model("lq")
    grid = TimeGrid(1.0, args.N_t)
    ric = lq_benchmark(dict(mdl.params, T=grid.T), N_t=grid.N_t)
    pol = ControlPolicy(("1", "leg1", "leg2", "leg3", "Y"), np.zeros(5), Box([-5.0], [5.0]))

    def show(rec):
        print(f"iter {rec.iter:3d}  J {rec.J:.5f}  |grad| {rec.grad_norm:.2e}  "
              f"step {rec.step:.2e}  residual {rec.residual:+.2e}")

    best, trace = optimize(mdl, pol, OptimizerConfig(max_iters=args.iters), grid=grid,
                           N_p=args.N_p, seed=args.seed, callback=show)
    ev = evaluate_gradient(mdl, best, grid, args.N_p, args.seed)
    res = necessary_residual(mdl, ev.fwd, ev.bwd, ev.adj, best, gf=ev.grad)
    N = grid.N_t
    gain = ev.fwd.ubar[:N, 0] / ev.fwd.xbar[:N, 0]
    print(f"\nstatus {trace.status}")
    print(f"cost  {ev.cost.J:.5f} +/- {ev.cost.se:.5f}   Riccati {ric.cost:.5f}   "
          f"full information {ric.full_info_cost:.5f}")
    print(f"gain relative L2 error {relative_l2(gain, ric.gain[:N]):.2e}")
    print(f"min normalised residual {res.min:+.2e}")
    print(f"\n{'t':>6} {'gain':>9} {'Riccati':>9}")
    for i in range(0, N, max(1, N // 10)):
        print(f"{grid.t[i]:6.2f} {gain[i]:9.4f} {ric.gain[i]:9.4f}")


if __name__ == "__main__":
    main()
