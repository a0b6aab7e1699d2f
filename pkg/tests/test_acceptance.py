"""End-to-end acceptance criteria.  Each test prints one PASS/FAIL line."""

import json
import time

import numpy as np
import pytest

from mfsmp import io
from mfsmp.backward import solve_adjoint, solve_backward_y
from mfsmp.cli import main
from mfsmp.forward import ControlPolicy, TimeGrid, perturbation_scaling, simulate_forward
from mfsmp.model import Box, build_model
from mfsmp.optimizer import evaluate_cost, evaluate_gradient
from mfsmp.smp import gradient, sufficient_check
from mfsmp.verify import fd_gradient, reference_gradient, relative_l2

MODELS = ("lq", "mean_field_lq", "nonconvex")
FEATURES = ("1", "t", "Y")
GRID50 = TimeGrid(1.0, 50)


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {title}: {detail}")
        assert ok, detail
    return emit


def random_policies(seed=2024, draws=5):
    rng = np.random.default_rng(seed)
    return [ControlPolicy(FEATURES, 0.5 * rng.standard_normal(len(FEATURES)), Box([-2.0], [2.0]))
            for _ in range(draws)]


def test_1_gradient_vs_fd(report):
    t0 = time.perf_counter()
    worst = {}
    for name in MODELS:
        mdl = build_model(name)
        errs = []
        for k, pol in enumerate(random_policies()):
            ev = evaluate_gradient(mdl, pol, GRID50, 10_000, 100 + k)
            fd = fd_gradient(mdl, pol, 1e-3, GRID50, 10_000, 100 + k)
            errs.append(relative_l2(ev.grad.grad_theta, fd))
        worst[name] = max(errs)
    secs = time.perf_counter() - t0
    ok = max(worst.values()) <= 5e-2 and secs <= 300
    detail = ", ".join(f"{k} max rel L2 {v:.2e}" for k, v in worst.items())
    report(1, "gradient vs CRN finite differences", ok, f"{detail} (tol 5e-2); {secs:.0f}s (<= 300s)")


def test_2_martingale(report):
    mdl = build_model("nonconvex")
    pol = ControlPolicy(("1", "Y"), [0.3, 0.5], Box([-2.0], [2.0]))
    fwd = simulate_forward(mdl, pol, GRID50, 10_000, 0)
    se = fwd.rho[:, 1:].std(axis=0, ddof=1) / np.sqrt(fwd.N_p)
    z = np.abs(fwd.rho[:, 1:].mean(axis=0) - 1) / se
    ok = bool(np.all(z <= 3)) and np.all(fwd.rho[:, 0] == 1)
    report(2, "density martingale", ok, f"max |mean rho - 1| = {z.max():.2f} SE over "
                                        f"{z.size} nodes (tol 3 SE)")


def test_3_cost_identity(report):
    worst = 0.0
    for name in MODELS + ("planted_concave",):
        for seed in range(3):
            pol = random_policies(seed, 1)[0]
            est = evaluate_cost(build_model(name), pol, GRID50, 2000, seed)
            worst = max(worst, abs(est.J - est.J_weighted))
    report(3, "cost formulation identity", worst <= 1e-12, f"max |difference| {worst:.1e} (tol 1e-12)")


BENCH_CFG = {
    "model": {"name": "lq"},
    "grid": {"T": 1.0, "N_t": 50},
    "N_p": 10_000,
    "seed": 3,
    "workers": 1,
    "policy": {"features": ["1", "leg1", "leg2", "leg3", "Y"], "theta0": "zeros"},
    "constraint": {"type": "box", "lower": [-5.0], "upper": [5.0]},
    "optimizer": {"max_iters": 30},
}


@pytest.fixture(scope="module")
def benchmark_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps(BENCH_CFG))
    t0 = time.perf_counter()
    status = main(["benchmark-lq", "--config", str(cfg), "--out", str(out / "run")])
    return out, status, time.perf_counter() - t0


def test_4_lq_benchmark(report, benchmark_run):
    out, status, secs = benchmark_run
    header, rows = io.read_csv(out / "run" / "benchmark_summary.csv")
    s = dict(zip(header, map(float, rows[0])))
    ok = (status == 0 and s["gain_rel_l2_error"] <= 0.05 and s["cost_rel_error"] <= 0.02
          and s["min_residual"] >= -1e-2 and secs <= 600)
    report(4, "LQ benchmark vs Riccati", ok,
           f"gain rel L2 {s['gain_rel_l2_error']:.2e} (tol 5e-2), cost rel {s['cost_rel_error']:.2e} "
           f"(tol 2e-2), min residual {s['min_residual']:.2e} (tol -1e-2), {secs:.0f}s (<= 600s)")


def test_5_perturbation_scaling(report):
    mdl = build_model("nonconvex")
    u = ControlPolicy(("1", "Y"), [0.8, -0.5], Box([-2.0], [2.0]))
    ub = ControlPolicy(("1", "Y"), [-0.2, 0.3], Box([-2.0], [2.0]))
    res = perturbation_scaling(mdl, u, ub, [0.2, 0.1, 0.05], GRID50, 10_000, 0)
    ok = 3.6 <= res.x_slope <= 4.4 and 1.7 <= res.rho_slope <= 2.3
    report(5, "perturbation scaling", ok, f"state slope {res.x_slope:.3f} (in [3.6, 4.4]), "
                                          f"density slope {res.rho_slope:.3f} (in [1.7, 2.3])")


def test_6_degeneration(report):
    mdl = build_model("lq")
    worst = 0.0
    for k, pol in enumerate(random_policies(7, 3)):
        fwd = simulate_forward(mdl, pol, GRID50, 10_000, k)
        bwd = solve_backward_y(mdl, fwd, pol)
        adj = solve_adjoint(mdl, fwd, bwd, pol)
        g = gradient(mdl, fwd, bwd, adj, pol).grad_theta
        ref, _, _ = reference_gradient(mdl, pol, GRID50, 10_000, k)
        worst = max(worst, float(np.abs(g - ref).max()))
    report(6, "degeneration to the fully observed pipeline", worst <= 1e-10,
           f"max |difference| {worst:.1e} (tol 1e-10)")


def _ensembles(mdl, pol, grid, N_p, seed):
    fwd = simulate_forward(mdl, pol, grid, N_p, seed)
    bwd = solve_backward_y(mdl, fwd, pol)
    return fwd, bwd, solve_adjoint(mdl, fwd, bwd, pol)


def test_7_sufficient_checker(report, benchmark_run):
    out, _, _ = benchmark_run
    opt = io.load_policy(out / "run" / "policy.json")
    mdl = build_model("lq")
    rep = sufficient_check(mdl, *_ensembles(mdl, opt, GRID50, 10_000, 3), opt, probes=10_000)
    bad = build_model("planted_concave")
    pol = ControlPolicy(("1", "Y"), [0.0, 0.0], Box([-2.0], [2.0]))
    rep_bad = sufficient_check(bad, *_ensembles(bad, pol, GRID50, 2000, 0), pol, probes=10_000)
    ok = rep.ok and len(rep_bad.convexity_violations) > 0
    report(7, "sufficient-condition checker", ok,
           f"LQ optimum: {len(rep.convexity_violations)} convexity / "
           f"{len(rep.minimization_violations)} minimisation violations (want 0); planted "
           f"concavity: {len(rep_bad.convexity_violations)} convexity violations (want > 0)")


def _rerun(manifest, out, workers):
    doc = json.loads(manifest.read_text())
    doc["config"]["workers"] = workers
    path = out / f"manifest_w{workers}.json"
    path.write_text(json.dumps(doc))
    return main([doc["subcommand"], "--config", str(path), "--out", str(out / f"w{workers}")])


def _same_artifacts(a, b):
    for f in sorted(a.glob("*.csv")):
        ha, ra = io.read_csv(f)
        hb, rb = io.read_csv(b / f.name)
        if ha[-1] == "seconds":  # wall-clock column
            ra, rb = [r[:-1] for r in ra], [r[:-1] for r in rb]
        if ha != hb or ra != rb:
            return False, f.name
    return True, ""


def test_8_determinism(report, benchmark_run, tmp_path):
    checked, failed = [], []
    # gradient-check for every model (criterion 1) and the LQ benchmark (criteria 4, 7)
    for name in MODELS:
        cfg = {"model": {"name": name}, "grid": {"T": 1.0, "N_t": 50}, "N_p": 10_000,
               "seed": 100, "policy": {"features": list(FEATURES),
                                       "theta0": random_policies()[0].theta.tolist()},
               "constraint": {"type": "box", "lower": [-2.0], "upper": [2.0]}}
        d = tmp_path / name
        d.mkdir()
        (d / "cfg.json").write_text(json.dumps(cfg))
        assert main(["gradient-check", "--config", str(d / "cfg.json"), "--out", str(d / "w1")]) == 0
        assert _rerun(d / "w1" / "manifest.json", d, 4) == 0
        same, where = _same_artifacts(d / "w1", d / "w4")
        (checked if same else failed).append(f"gradient-check[{name}]" + where)
    out, _, _ = benchmark_run
    assert _rerun(out / "run" / "manifest.json", out, 3) == 0
    same, where = _same_artifacts(out / "run", out / "w3")
    (checked if same else failed).append("benchmark-lq" + where)
    same = (out / "run" / "policy.json").read_bytes() == (out / "w3" / "policy.json").read_bytes()
    (checked if same else failed).append("benchmark-lq policy")
    # library-level criteria 2, 3, 5 across worker counts
    mdl = build_model("nonconvex")
    pol = ControlPolicy(("1", "Y"), [0.3, 0.5], Box([-2.0], [2.0]))
    a = simulate_forward(mdl, pol, GRID50, 10_000, 0, workers=1)
    b = simulate_forward(mdl, pol, GRID50, 10_000, 0, workers=4)
    (checked if np.array_equal(a.rho, b.rho) else failed).append("martingale ensemble")
    ea = evaluate_cost(mdl, pol, GRID50, 2000, 1, workers=1)
    eb = evaluate_cost(mdl, pol, GRID50, 2000, 1, workers=3)
    (checked if (ea.J, ea.J_weighted) == (eb.J, eb.J_weighted) else failed).append("cost")
    ub = ControlPolicy(("1", "Y"), [-0.2, 0.3], Box([-2.0], [2.0]))
    sa = perturbation_scaling(mdl, pol, ub, [0.2, 0.1, 0.05], GRID50, 10_000, 0, workers=1)
    sb = perturbation_scaling(mdl, pol, ub, [0.2, 0.1, 0.05], GRID50, 10_000, 0, workers=4)
    same = np.array_equal(sa.x_moment, sb.x_moment) and np.array_equal(sa.rho_moment,
                                                                           sb.rho_moment)
    (checked if same else failed).append("perturbation scaling")
    report(8, "bit-identical reruns across worker counts", not failed,
           f"{len(checked)} identical, mismatches: {failed or 'none'}")
