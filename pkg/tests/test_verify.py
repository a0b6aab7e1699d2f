import numpy as np
import pytest

from mfsmp.forward import ControlPolicy, TimeGrid
from mfsmp.model import Box, Dimensions, build_model, lq_model, with_derivative
from mfsmp.optimizer import evaluate_cost
from mfsmp.verify import (INVARIANTS, fd_gradient, lq_benchmark, relative_l2,
                          run_invariant_suite)

BASE = dict(a=0.5, c=1.0, sigma=0.5, q=1.0, r=1.0, g=1.0, x0=1.0, T=1.0)


def test_riccati_zero_cost():
    sol = lq_benchmark(dict(BASE, q=0.0, g=0.0))
    assert np.all(sol.P == 0) and np.all(sol.gain == 0)
    assert sol.cost == 0.0 and sol.full_info_cost == 0.0


def test_riccati_closed_form():
    sol = lq_benchmark(dict(BASE, a=0.0, q=0.0, g=1.0))
    np.testing.assert_allclose(sol.P, 1.0 / (2.0 - sol.t), atol=1e-10)
    assert sol.P0 == pytest.approx(0.5, abs=1e-12)


def test_riccati_grid_convergence_and_positivity():
    a = lq_benchmark(BASE, substeps=20)
    b = lq_benchmark(BASE, substeps=40)
    assert abs(a.P0 - b.P0) < 1e-8
    assert np.all(a.P >= 0)
    # partial information can only cost more than full state feedback
    assert a.cost >= a.full_info_cost


def test_riccati_validation():
    with pytest.raises(ValueError, match="r must be positive"):
        lq_benchmark(dict(BASE, r=0.0))
    with pytest.raises(ValueError, match="missing"):
        lq_benchmark({"a": 1.0})


def test_riccati_cost_matches_monte_carlo():
    mdl = build_model("lq")
    ric = lq_benchmark(BASE, N_t=50)
    pol = ControlPolicy(("onehot",), ric.control(), Box([-10.0], [10.0]))
    est = evaluate_cost(mdl, pol, TimeGrid(1.0, 50), 10_000, 0)
    assert abs(est.J - ric.cost) <= 4 * est.se + 0.01 * ric.cost


def _quadratic_control_model():
    # l = u1^2, nothing else depends on the control: J(theta) = theta_1^2 T
    return lq_model(Dimensions(1, 1, 2), [0.0], sigma1={"const": 1.0},
                    l={"quad": {("u", "u"): np.diag([2.0, 0.0])}})


def test_fd_closed_form_and_independent_coordinate():
    mdl = _quadratic_control_model()
    pol = ControlPolicy(("1",), [0.8, -0.3], Box([-5.0, -5.0], [5.0, 5.0]))
    est = fd_gradient(mdl, pol, 1e-3, TimeGrid(1.0, 10), 200, 0)
    assert abs(est[0] - 2 * 0.8 * 1.0) <= 1e-6
    assert est[1] == 0.0


def test_fd_validation_and_relative_l2():
    with pytest.raises(ValueError):
        fd_gradient(_quadratic_control_model(), ControlPolicy(("1",), [0.0, 0.0], Box([-1.0] * 2, [1.0] * 2)),
                    0.0,
                    TimeGrid(1.0, 2), 10, 0)
    assert relative_l2([1.0, 1.0], [1.0, 1.0]) == 0.0
    assert relative_l2([2.0], [1.0]) == pytest.approx(1.0)


def test_invariant_suite_passes():
    rep = run_invariant_suite()
    assert rep.passed, rep.text()
    assert {r.name for r in rep.results} == set(INVARIANTS)
    assert any(label.startswith("node") for _, name, label, _, _ in rep.margin_rows()
               if name == "forward.martingale")


def test_planted_derivative_defect_is_isolated():
    mdl = build_model("lq")

    def wrong_b(t, x, u, xm, um):
        n = len(x)
        return {"x": np.full((n, 1, 1), 2.0 * mdl.params["a"]), "u": np.ones((n, 1, 1))}

    bad = with_derivative(mdl, "b", wrong_b)
    rep = run_invariant_suite(models={"lq": bad})
    failed = {r.name for r in rep.results if not r.passed}
    assert failed == {"model.derivative_consistency"}


def test_suite_scope_filter():
    rep = run_invariant_suite(scope=["verify"])
    assert rep.results and {r.scope for r in rep.results} == {"verify"}
