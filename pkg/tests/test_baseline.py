import numpy as np
import pytest

from koopnmpc.baseline import (IdealController, ShootingOcp, _ShootingProblem, sensitivity_rollout, simulate_inputs,
                               solve_fullorder)
from koopnmpc.dataset import ChannelScaling, ScalingSpec
from koopnmpc.model import KoopmanModel
from koopnmpc.nmpc import KoopmanController, OcpConfig, build_ocp, solve
from koopnmpc.plant import (COLUMN_NOMINAL_INPUT, column_plant, cubic_plant, integrate_step,
                            linear_plant, steady_state)

from helpers import exact_koopman, unit_scaling

DT = 1.0


def test_linear_sensitivities_closed_form():
    a, b = -0.5, 2.0
    p = linear_plant(a, b)
    U = np.array([[0.3], [-0.2], [0.5], [0.1]])
    X, S = sensitivity_rollout(p, [0.4], U, DT, n_sub=200)
    phi = np.exp(a * DT)
    gam = b * (phi - 1.0) / a
    for k in range(4):
        for j in range(4):
            expected = phi ** (k - j) * gam if j <= k else 0.0
            assert abs(S[k, 0, j, 0] - expected) < 1e-8


def test_causality():
    p = column_plant()
    x0 = steady_state(p, COLUMN_NOMINAL_INPUT)
    U = np.tile(COLUMN_NOMINAL_INPUT, (3, 1))
    _, S = sensitivity_rollout(p, x0, U, 300.0)
    assert np.all(S[0, :, 1:, :] == 0) and np.all(S[1, :, 2, :] == 0)


def test_column_sensitivity_finite_differences():
    p = column_plant()
    x0 = steady_state(p, COLUMN_NOMINAL_INPUT)
    U = np.array([[44.0, 35.5, 52.0, 28.0], [36.0, 36.5, 50.0, 22.0], [40.0, 36.0, 51.0, 25.0]])
    X, S = sensitivity_rollout(p, x0, U, 300.0)
    assert np.array_equal(X, simulate_inputs(p, x0, U, 300.0))
    h = 1e-6
    for j in range(3):
        for i in range(4):
            Up, Um = U.copy(), U.copy()
            Up[j, i] += h
            Um[j, i] -= h
            fd = (simulate_inputs(p, x0, Up, 300.0) - simulate_inputs(p, x0, Um, 300.0)) / (2 * h)
            an = S[:, :, j, i]
            scale = np.maximum(np.abs(fd), 1e-6 * np.max(np.abs(fd)) + 1e-12)
            assert np.max(np.abs(an - fd) / scale) < 1e-4


def test_steady_plant_at_reachable_setpoint():
    p = cubic_plant()
    u_ss = 8.0
    x_ss = steady_state(p, [u_ss])
    sc = ScalingSpec(ChannelScaling(["linear"], [0.0], [4.0]), ChannelScaling(["linear"], [0.0], [4.0]),
                     ChannelScaling(["linear"], [0.0], [10.0]))
    cfg = OcpConfig([[0.0, 10.0]], N_c=5, cost=[(1, 1.0, float(x_ss[0]))])
    ocp = ShootingOcp(p, sc, cfg, x_ss, dt=0.5, n_sub=10)
    res = solve_fullorder(ocp, np.full(5, 0.5))
    assert res.status == "optimal"
    assert np.allclose(res.u[:, 0], u_ss, atol=1e-3)
    again = solve_fullorder(ocp, res.w)
    assert again.iterations <= 1


def test_shooting_validation():
    p = linear_plant()
    cfg = OcpConfig([[-1.0, 1.0]], N_c=2, cost=[(0, 1.0, 0.5)])
    with pytest.raises(ValueError):
        ShootingOcp(p, unit_scaling(), cfg, [0.0, 1.0])
    log_u = ScalingSpec(ChannelScaling(["linear"], [0.0], [2.0]), ChannelScaling(["linear"], [0.0], [2.0]),
                        ChannelScaling(["log10"], [-1.0], [0.0]))
    with pytest.raises(ValueError):
        ShootingOcp(p, log_u, cfg, [0.0])
    with pytest.raises(ValueError):
        solve_fullorder(ShootingOcp(p, unit_scaling(), cfg, [0.0]), np.zeros(3))


@pytest.fixture(scope="module")
def linear_setup():
    p = linear_plant(-0.3, 1.0)
    sc = unit_scaling()
    cfg = OcpConfig([[0.0, 1.0]], N_c=6, cost=[(1, 1.0, 1.5)], bounds=[(0, None, 1.8)])
    return p, sc, cfg, exact_koopman(p, sc)


def test_exact_model_matches_fullorder(linear_setup):
    p, sc, cfg, model = linear_setup
    x0 = np.array([0.2])
    full = solve_fullorder(ShootingOcp(p, sc, cfg, x0, dt=DT))
    koop = solve(build_ocp(model, cfg, x0, p.output_map(x0)))
    assert full.status == koop.status == "optimal"
    assert abs(full.u_scaled[0, 0] - koop.u_scaled[0, 0]) < 1e-3
    assert abs(full.objective - koop.objective) < 1e-6


def test_fullorder_objective_is_quality_reference(linear_setup):
    p, sc, cfg, model = linear_setup
    x0 = np.array([1.9])
    # a slightly wrong model: its plan, replayed on the plant, cannot beat the full-order optimum
    wrong = KoopmanModel(model.encoder, model.decoder, model.A * 0.97, model.B * 1.1, 1, 1, DT, scaling=sc)
    ocp = ShootingOcp(p, sc, cfg, x0, dt=DT)
    full = solve_fullorder(ocp)
    koop = solve(build_ocp(wrong, cfg, x0, p.output_map(x0)))
    f_koop, _, _ = _ShootingProblem(ocp).evaluate(koop.u_scaled.ravel())
    assert full.objective <= f_koop + 1e-6


def test_ideal_controller_interface(linear_setup):
    p, sc, cfg, model = linear_setup
    ideal = IdealController(p, sc, cfg, dt=DT)
    assert ideal.name == "ideal"
    x = np.array([0.2])
    for _ in range(3):
        u, info = ideal.step(x, p.output_map(x))
        assert not info.failed and 0.0 <= u[0] <= 1.0
        x = integrate_step(p, x, u, DT)
    ideal.reset(u_prev=[0.3])
    assert ideal.previous is None and ideal.u_prev[0] == 0.3


def test_ideal_controller_fail_safe(linear_setup, monkeypatch):
    import koopnmpc.baseline as bl
    p, sc, cfg, _ = linear_setup
    ideal = IdealController(p, sc, cfg, dt=DT)
    ideal.reset(u_prev=[0.7])

    def boom(*a, **k):
        raise RuntimeError("injected")

    monkeypatch.setattr(bl, "solve_fullorder", boom)
    u, info = ideal.step(np.array([0.2]), np.array([0.2]))
    assert info.failed and u[0] == 0.7


def test_fullorder_time_grows_with_plant_size():
    lin = linear_plant(-0.3, 1.0)
    cfg1 = OcpConfig([[0.0, 1.0]], N_c=6, cost=[(1, 1.0, 1.5)])
    t_lin = min(solve_fullorder(ShootingOcp(lin, unit_scaling(), cfg1, [0.2], dt=DT)).wall_time
                for _ in range(3))
    col = column_plant()
    x0 = steady_state(col, COLUMN_NOMINAL_INPUT)
    sc = ScalingSpec(ChannelScaling(["linear"] * 22, np.zeros(22), np.full(22, 50.0)),
                     ChannelScaling(["linear"] * 3, np.zeros(3), np.full(3, 50.0)),
                     ChannelScaling(["linear"] * 4, np.zeros(4), np.full(4, 60.0)))
    cfg = OcpConfig([[30, 50], [34.5, 37.5], [48.5, 53.5], [5, 45]], N_c=6, cost=[(23, 1.0, 16.0)])
    res = solve_fullorder(ShootingOcp(col, sc, cfg, x0))
    assert res.wall_time > 0
    assert res.wall_time / max(res.iterations + 1, 1) > t_lin


def test_koopman_solve_time_independent_of_plant_size():
    import time
    from koopnmpc.model import init_model

    def median_time(n_x):
        m = init_model(n_x, 3, 4, 6, seed=1)
        m.B[:] = np.random.default_rng(0).normal(scale=0.1, size=m.B.shape)
        cfg = OcpConfig(np.tile([0.0, 1.0], (4, 1)), N_c=24, cost=[(n_x + 1, 1.0, 0.5)],
                        bounds=[(n_x, 0.1, 0.9)])
        ctrl = KoopmanController(m, cfg)
        times = []
        for _ in range(5):
            ctrl.reset()
            t0 = time.perf_counter()
            _, info = ctrl.step(np.full(n_x, 0.5), np.full(3, 0.5))
            times.append((time.perf_counter() - t0) / (info.result.iterations + 1))
        return np.median(times)

    small, large = median_time(5), median_time(118)
    assert large < 3.0 * small
