import numpy as np
import pytest

from mfsmp.forward import (ControlPolicy, NoiseBundle, SimulationError, TimeGrid, feature_tensor,
                           generate_noise, girsanov_weights, perturbation_scaling,
                           simulate_forward)
from mfsmp.model import Box, CoefficientSet, Dimensions, build_model, lq_model

ZERO = ControlPolicy(("1",), [0.0])


def test_time_grid():
    g = TimeGrid(2.0, 4)
    np.testing.assert_allclose(g.t, [0, 0.5, 1, 1.5, 2])
    assert g.dt == 0.5
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)


def test_frozen_dynamics():
    mdl = lq_model(Dimensions(1), [1.0])
    fwd = simulate_forward(mdl, ZERO, TimeGrid(1.0, 10), 5, 0)
    assert np.all(fwd.x == 1.0) and np.all(fwd.rho == 1.0)


def test_constant_drift_is_exact():
    mdl = lq_model(Dimensions(1), [0.0], b={"const": 1.0})
    grid = TimeGrid(1.0, 16)
    fwd = simulate_forward(mdl, ZERO, grid, 3, 0)
    np.testing.assert_allclose(fwd.x[0, :, 0], grid.t, atol=1e-14)


def test_pure_mean_field_drift():
    # dx = E[x] dt: the Euler recursion gives (1 + dt)^N exactly, -> e as dt -> 0
    mdl = lq_model(Dimensions(1), [1.0], b={"xm": 1.0})
    for N in (100, 10_000):
        grid = TimeGrid(1.0, N)
        fwd = simulate_forward(mdl, ZERO, grid, 2, 0)
        assert fwd.xbar[-1, 0] == pytest.approx((1 + 1 / N) ** N, rel=1e-12)
    assert abs(fwd.xbar[-1, 0] - np.e) < 2e-4


def test_noise_statistics_and_prefix():
    grid = TimeGrid(1.0, 20)
    nb = generate_noise(grid, 4000, 11)
    for d in (nb.dW, nb.dY):
        se = d.std(axis=0) / np.sqrt(d.shape[0])
        assert np.all(np.abs(d.mean(axis=0)) <= 4 * se)
    small = generate_noise(grid, 300, 11)
    np.testing.assert_array_equal(small.dW, nb.dW[:300])
    par = generate_noise(grid, 4000, 11, workers=3)
    np.testing.assert_array_equal(par.dY, nb.dY)


def test_density_constant_h_closed_form():
    c = -0.4
    mdl = lq_model(Dimensions(1), [0.0], h={"const": c})
    grid = TimeGrid(1.5, 30)
    fwd = simulate_forward(mdl, ZERO, grid, 200, 3)
    np.testing.assert_allclose(fwd.rho, np.exp(c * fwd.Y - 0.5 * c * c * grid.t), rtol=1e-12)


def test_girsanov_weights():
    mdl = lq_model(Dimensions(1), [0.0])
    fwd = simulate_forward(mdl, ZERO, TimeGrid(1.0, 5), 10, 0)
    np.testing.assert_allclose(girsanov_weights(fwd, 3), np.full(10, 0.1))
    fwd2 = simulate_forward(mdl, ZERO, TimeGrid(1.0, 5), 2, 0)
    fwd2.rho[:, 1] = 2.0
    np.testing.assert_allclose(girsanov_weights(fwd2, 1), [0.5, 0.5])


def test_tilted_expectation_of_inverse_density():
    # under the tilted measure exp(-cY(t) + c^2 t / 2) has mean exactly 1
    c = 0.8
    mdl = lq_model(Dimensions(1), [0.0], h={"const": c})
    grid = TimeGrid(1.0, 10)
    fwd = simulate_forward(mdl, ZERO, grid, 20_000, 5)
    w = girsanov_weights(fwd, grid.N_t)
    est = w @ np.exp(-c * fwd.Y[:, -1] + 0.5 * c * c)
    se = fwd.rho[:, -1].std(ddof=1) / np.sqrt(fwd.N_p)
    assert abs(est - 1.0) <= 3 * se


def test_martingale_nonconvex():
    mdl = build_model("nonconvex")
    pol = ControlPolicy(("1", "Y"), [0.3, 0.5], Box([-2.0], [2.0]))
    fwd = simulate_forward(mdl, pol, TimeGrid(1.0, 50), 10_000, 0)
    se = fwd.rho.std(axis=0, ddof=1) / np.sqrt(fwd.N_p)
    assert np.all(np.abs(fwd.rho.mean(axis=0) - 1) <= 3 * se + 1e-15)
    assert np.all(fwd.rho > 0) and np.all(fwd.rho[:, 0] == 1)


def test_adaptedness_structural():
    mdl = build_model("nonconvex")
    grid = TimeGrid(1.0, 12)
    pol = ControlPolicy(("1", "Y", "Yavg", "Ymax", "tY"), [0.1, 0.5, -0.3, 0.2, 0.4],
                        Box([-2.0], [2.0]))
    nb = generate_noise(grid, 100, 1)
    base = simulate_forward(mdl, pol, grid, 100, 1, noise=nb)
    dY = nb.dY.copy()
    dY[:, 6:] = 0
    alt = simulate_forward(mdl, pol, grid, 100, 1, noise=NoiseBundle(nb.dW, dY))
    for arr in ("u", "x", "rho"):
        np.testing.assert_array_equal(getattr(alt, arr)[:, :7], getattr(base, arr)[:, :7])


def test_features_and_policy_values_in_U():
    grid = TimeGrid(1.0, 4)
    Y = np.array([[0.0, 1.0, -1.0, 3.0, 2.0]])
    psi = feature_tensor(("1", "t", "Y", "Yavg", "Ymax", "leg2", "onehot"), grid, Y)
    np.testing.assert_allclose(psi[0, :, 3], [0, 0.5, 0, 0.75, 1.0])
    np.testing.assert_allclose(psi[0, :, 4], [0, 1, 1, 3, 3])
    np.testing.assert_allclose(psi[0, :, 5], 0.5 * (3 * np.linspace(-1, 1, 5) ** 2 - 1))
    assert psi.shape == (1, 5, 6 + 5)
    pol = ControlPolicy(("1", "Y"), [0.5, 4.0], Box([-1.0], [1.0]))
    u = pol.controls(grid, 3 * np.random.default_rng(0).standard_normal((50, 5)))
    assert np.all(np.abs(u) <= 1)


def test_errors():
    mdl = build_model("lq")
    with pytest.raises(ValueError, match="N_p"):
        simulate_forward(mdl, ZERO, TimeGrid(1.0, 5), 1, 0)

    def b(t, x, u, xm, um):
        return np.where(t > 0.5, np.inf, 0.0) * np.ones_like(x)

    bad = CoefficientSet(Dimensions(1), [0.0], {"b": b}, {"b": lambda *a: {}})
    with pytest.raises(SimulationError, match="particle 0, node"):
        simulate_forward(bad, ZERO, TimeGrid(1.0, 4), 3, 0)


def test_seed_determinism():
    mdl = build_model("mean_field_lq")
    pol = ControlPolicy(("1", "Y"), [0.2, -0.1])
    a = simulate_forward(mdl, pol, TimeGrid(1.0, 10), 700, 9)
    b = simulate_forward(mdl, pol, TimeGrid(1.0, 10), 700, 9, workers=4)
    np.testing.assert_array_equal(a.x, b.x)


def test_perturbation_scaling_degenerate_and_validation():
    mdl = build_model("nonconvex")
    pol = ControlPolicy(("1",), [0.3], Box([-2.0], [2.0]))
    res = perturbation_scaling(mdl, pol, pol, [0.2, 0.1, 0.05], TimeGrid(1.0, 10), 100, 0)
    assert res.x_slope == "degenerate" and res.rho_slope == "degenerate"
    with pytest.raises(ValueError):
        perturbation_scaling(mdl, pol, pol, [0.1, 0.2, 0.3], TimeGrid(1.0, 10), 100, 0)


def test_perturbation_scaling_linear_model():
    mdl = build_model("nonconvex", {"nu": 0.0, "wave": 0.0})
    u = ControlPolicy(("1", "Y"), [0.8, -0.5], Box([-2.0], [2.0]))
    ub = ControlPolicy(("1", "Y"), [-0.2, 0.3], Box([-2.0], [2.0]))
    res = perturbation_scaling(mdl, u, ub, [0.2, 0.1, 0.05], TimeGrid(1.0, 20), 2000, 1)
    assert 3.6 <= res.x_slope <= 4.4
    assert 1.7 <= res.rho_slope <= 2.3
