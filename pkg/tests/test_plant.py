import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopnmpc.plant import (COLUMN_NOMINAL_INPUT, IntegrationError, PControllerConfig, PlantModel,
                            SteadyStateNotFound, column_p_config, column_plant, cubic_plant, cstr_plant,
                            integrate_step, integrate_step_averaged, integrate_step_sensitivity, linear_plant,
                            make_plant, p_control_law, read_trajectory_csv, simulate_profile, steady_state,
                            wrap_p_controller, write_trajectory_csv)


def zero_plant():
    return PlantModel("zero", 2, 1, 2, drift=lambda x: np.zeros(2), input_maps=lambda x: np.zeros((2, 1)),
                      output_map=lambda x: np.array(x, float), input_bounds=[[-1, 1]])


@pytest.fixture(scope="module")
def column():
    return column_plant()


@pytest.fixture(scope="module")
def column_ss(column):
    return steady_state(column, COLUMN_NOMINAL_INPUT)


# -- integrate_step ---------------------------------------------------------

def test_zero_drift_leaves_state_unchanged():
    x = np.array([0.3, -1.7])
    assert np.array_equal(integrate_step(zero_plant(), x, [0.0], 1.0, 1), x)


def test_decay_single_substep():
    x = integrate_step(linear_plant(-1.0, 0.0), [1.0], [0.0], 0.1, 1)
    assert abs(x[0] - 0.9048375) < 1e-6


def test_constant_rate_is_exact():
    x = integrate_step(linear_plant(0.0, 1.0), [0.0], [2.0], 0.5, 1)
    assert x[0] == 1.0


def test_fourth_order_convergence():
    p = linear_plant(-1.0, 0.0)
    errs = [abs(integrate_step(p, [1.0], [0.0], 0.2, n)[0] - np.exp(-0.2)) for n in (1, 2, 4, 8)]
    ratios = [errs[i] / errs[i + 1] for i in range(3)]
    for r in ratios:
        assert abs(r - 16.0) < 0.2 * 16.0


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_state_names_component():
    p = PlantModel("blow", 2, 1, 1, drift=lambda x: np.array([0.0, x[1] ** 3]),
                   input_maps=lambda x: np.zeros((2, 1)), output_map=lambda x: x[:1], input_bounds=[[-1, 1]])
    with pytest.raises(IntegrationError) as err:
        integrate_step(p, [0.0, 1e5], [0.0], 10.0, 1)
    assert err.value.component == 1


def test_bad_step_arguments():
    with pytest.raises(ValueError):
        integrate_step(linear_plant(), [0.0], [0.0], 0.0)
    with pytest.raises(ValueError):
        integrate_step(linear_plant(), [0.0], [0.0], 1.0, 0)


def test_substep_count_validated_against_halved_step(column, column_ss):
    x0 = column_ss.copy()
    u = np.array([45.0, 35.0, 52.0, 30.0])
    ref = integrate_step(column, x0, u, 300.0, 20)
    x = integrate_step(column, x0, u, 300.0, 10)
    assert np.max(np.abs(x - ref)) <= 1e-6


# -- sensitivities -----------------------------------------------------------

def test_step_sensitivity_matches_finite_differences(column, column_ss):
    u = np.array([44.0, 35.5, 52.0, 28.0])
    x1, Phi, Gam = integrate_step_sensitivity(column, column_ss, u, 300.0)
    assert np.array_equal(x1, integrate_step(column, column_ss, u, 300.0))
    h = 1e-6
    for j in range(4):
        du = np.zeros(4)
        du[j] = h
        fd = (integrate_step(column, column_ss, u + du, 300.0) - integrate_step(column, column_ss, u - du, 300.0)) / (2 * h)
        assert np.allclose(Gam[:, j], fd, rtol=1e-4, atol=1e-9)
    for i in (0, 5, 21):
        dx = np.zeros(22)
        dx[i] = 1e-6 * (1 + abs(column_ss[i]))
        fd = (integrate_step(column, column_ss + dx, u, 300.0) - integrate_step(column, column_ss - dx, u, 300.0)) / (2 * dx[i])
        assert np.allclose(Phi[:, i], fd, rtol=1e-4, atol=1e-8)


def test_linear_sensitivity_closed_form():
    a, b, dt = -0.3, 2.0, 1.5
    _, Phi, Gam = integrate_step_sensitivity(linear_plant(a, b), [0.4], [1.0], dt, 50)
    assert abs(Phi[0, 0] - np.exp(a * dt)) < 1e-8
    assert abs(Gam[0, 0] - b * (np.exp(a * dt) - 1) / a) < 1e-8


def test_column_analytic_jacobian(column, column_ss):
    from koopnmpc.plant import _central_jacobian
    u = np.array([38.0, 36.5, 50.0, 22.0])
    x = column_ss * (1 + 0.01 * np.sin(np.arange(22)))
    J = column.state_jacobian(x, u)
    fd = _central_jacobian(lambda v: column.rhs(v, u), x)
    assert np.allclose(J, fd, rtol=1e-6, atol=1e-10)


# -- simulate_profile --------------------------------------------------------

def test_zero_horizon_single_snapshot():
    tr = simulate_profile(linear_plant(), [0.5], [(0.0, [1.0])], 1.0, 0.0)
    assert len(tr) == 1
    assert tr.x[0, 0] == 0.5 and tr.y[0, 0] == 0.5


def test_linear_step_response():
    tr = simulate_profile(linear_plant(-1.0, 1.0), [0.0], [(0.0, [1.0])], 0.5, 10.0)
    assert abs(tr.x[-1, 0] - 1.0) < 1e-4
    assert tr.t[0] == 0.0 and np.allclose(np.diff(tr.t), 0.5)
    assert tr.u[0, 0] == 1.0


def test_column_fractions_stay_in_unit_interval(column, column_ss):
    tr = simulate_profile(column, column_ss, [(0.0, [48.0, 34.5, 53.0, 26.0])], 300.0, 7200.0)
    fr = tr.x[:, :20]
    assert np.all(fr > 0) and np.all(fr < 1)


def test_profile_callable_and_steps_agree():
    p = linear_plant(-0.5, 1.0)
    steps = [(0.0, [1.0]), (2.0, [-1.0])]
    a = simulate_profile(p, [0.0], steps, 1.0, 4.0)
    b = simulate_profile(p, [0.0], lambda t: [1.0] if t < 2.0 else [-1.0], 1.0, 4.0)
    assert np.array_equal(a.x, b.x)


def test_profile_validation():
    with pytest.raises(ValueError):
        simulate_profile(linear_plant(), [0.0], [(1.0, [1.0])], 1.0, 2.0)
    with pytest.raises(ValueError):
        simulate_profile(linear_plant(), [0.0], [(0.0, [1.0]), (0.5, [2.0])], 1.0, 2.0)
    with pytest.raises(ValueError):
        simulate_profile(linear_plant(), [0.0], [(0.0, [1.0])], 1.0, 2.5)


def test_simulation_is_deterministic(column, column_ss):
    prof = [(0.0, [45.0, 35.0, 52.0, 30.0]), (1800.0, [35.0, 37.0, 49.0, 20.0])]
    a = simulate_profile(column, column_ss, prof, 300.0, 3600.0)
    b = simulate_profile(column, column_ss, prof, 300.0, 3600.0)
    assert a.x.tobytes() == b.x.tobytes() and a.u.tobytes() == b.u.tobytes()


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_integration_failure_carries_time():
    p = PlantModel("blow", 1, 1, 1, drift=lambda x: x ** 3, input_maps=lambda x: np.zeros((1, 1)),
                   output_map=lambda x: x, input_bounds=[[-1, 1]])
    with pytest.raises(IntegrationError) as err:
        simulate_profile(p, [1.0], [(0.0, [0.0])], 1.0, 5.0)
    assert err.value.time is not None


def test_trajectory_csv_roundtrip(tmp_path):
    tr = simulate_profile(cstr_plant(), [0.5, 350.0], [(0.0, [1.0, 300.0])], 1.0, 5.0)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, tr)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["t", "x_1", "x_2", "y_1", "y_2", "u_1", "u_2"]
    back = read_trajectory_csv(path)
    assert np.array_equal(back.x, tr.x) and np.array_equal(back.u, tr.u)


# -- steady_state ------------------------------------------------------------

def test_steady_state_linear():
    x = steady_state(linear_plant(-1.0, 1.0), [2.0])
    assert abs(x[0] - 2.0) < 1e-12


def test_steady_state_cubic():
    x = steady_state(cubic_plant(), [8.0])
    assert abs(x[0] - 2.0) < 1e-9
    assert abs(-x[0] ** 3 + 8.0) <= 1e-10 * (1 + abs(x[0]))


def test_column_steady_state_residual_and_balance(column, column_ss):
    r = column.rhs(column_ss, COLUMN_NOMINAL_INPUT)
    assert np.max(np.abs(r) / (1 + np.abs(column_ss))) <= 1e-10
    # drain balances feed minus distillate at steady state
    F, L, V, B = COLUMN_NOMINAL_INPUT
    D = column.output_map(column_ss)[1]
    assert abs(F - D - B) < 1e-8
    # with another drain the inventory integrates
    r2 = column.rhs(column_ss, COLUMN_NOMINAL_INPUT + [0, 0, 0, 2.0])
    assert abs(r2[21] + 2e-3) < 1e-12


def test_steady_state_not_found():
    p = PlantModel("drift", 1, 1, 1, drift=lambda x: np.ones(1), input_maps=lambda x: np.zeros((1, 1)),
                   output_map=lambda x: x, input_bounds=[[-1, 1]])
    with pytest.raises(SteadyStateNotFound):
        steady_state(p, [0.0], fallback_horizon=10.0, fallback_dt=1.0)


# -- invariants --------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.floats(0.1, 5.0))
def test_column_rhs_affine_in_u(perturb, scale):
    p = column_plant()
    x = p.x_guess * (1 + 0.1 * np.array(perturb[:1] * 22))
    u0 = np.array([40.0, 36.0, 51.0, 25.0])
    du = scale * np.array(perturb)
    lhs = p.rhs(x, u0 + du) - p.rhs(x, u0)
    rhs = p.input_maps(x) @ du
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-15)


def test_linear_rhs_affine_in_u():
    p = linear_plant(-0.7, 3.0)
    x = np.array([0.2])
    assert p.rhs(x, [1.5]) - p.rhs(x, [0.5]) == pytest.approx(3.0, abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.001, 0.5), min_size=20, max_size=20), st.floats(1, 20), st.floats(10, 40),
       st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_column_total_moles_balance(fracs, mc, mr, w):
    p = column_plant()
    x = np.concatenate([fracs, [mc, mr]])
    lo, hi = p.input_bounds[:, 0], p.input_bounds[:, 1]
    u = lo + (hi - lo) * np.array(w)
    r = p.rhs(x, u)
    D = p.output_map(x)[1]
    total_rate = (r[20] + r[21]) * 1000.0  # tray holdups are constant
    expected = u[0] - D - u[3]
    assert abs(total_rate - expected) <= 1e-9 * max(1.0, abs(expected))


def test_evaluators_deterministic(column, column_ss):
    u = COLUMN_NOMINAL_INPUT
    assert column.rhs(column_ss, u).tobytes() == column.rhs(column_ss.copy(), u.copy()).tobytes()


def test_bounds_validation():
    with pytest.raises(ValueError):
        PlantModel("bad", 1, 1, 1, lambda x: x, lambda x: np.ones((1, 1)), lambda x: x, [[1.0, 1.0]])


def test_registry():
    assert make_plant("column").n_x == 22
    with pytest.raises(KeyError):
        make_plant("nope")


# -- P-controller ------------------------------------------------------------

def test_p_law_at_setpoint_gives_zero_correction():
    cfg = PControllerConfig(controlled_input_index=0, measured_state_index=0, gain=5.0)
    assert p_control_law(cfg, (-100.0, 100.0), np.array([30.0]), 30.0) == 0.0


def test_p_law_gain_arithmetic():
    cfg = PControllerConfig(controlled_input_index=0, measured_state_index=0, gain=5.0)
    assert p_control_law(cfg, (-100.0, 100.0), np.array([29.9]), 30.0) == pytest.approx(0.5, abs=1e-12)


def test_p_law_clamps():
    cfg = PControllerConfig(controlled_input_index=0, measured_state_index=0, gain=5.0, bias=25.0)
    assert p_control_law(cfg, (0.0, 60.0), np.array([0.0]), 30.0) == 60.0
    assert p_control_law(cfg, (0.0, 60.0), np.array([60.0]), 30.0) == 0.0


def test_wrapper_index_checks(column):
    with pytest.raises(IndexError):
        wrap_p_controller(column, PControllerConfig(4, 21, 5.0))
    with pytest.raises(IndexError):
        wrap_p_controller(column, PControllerConfig(3, 22, 5.0))
    with pytest.raises(ValueError):
        wrap_p_controller(column, PControllerConfig(3, 21, np.inf))


def test_wrapped_column_inventory_converges(column, column_ss):
    wp = wrap_p_controller(column, column_p_config())
    x0 = column_ss.copy()
    x0[21] = 36.0
    sp = 30.0
    tr = simulate_profile(wp, x0, [(0.0, [40.0, 36.0, 51.0, sp])], 300.0, 7200.0)
    err = np.abs(tr.x[:, 21] - sp)
    assert err[-1] < 0.05 * err[0]
    assert np.all(np.diff(err[2:]) <= 1e-9)
    # the recorded drain is the realized, clamped controller output
    assert np.all((tr.u[:, 3] >= 0.0) & (tr.u[:, 3] <= 60.0))
    assert tr.u[0, 3] > 25.0


def test_averaged_step_matches_plain_step_when_unwrapped(column, column_ss):
    u = np.array([42.0, 36.0, 52.0, 27.0])
    x1, ubar = integrate_step_averaged(column, column_ss, u, 300.0)
    assert np.array_equal(x1, integrate_step(column, column_ss, u, 300.0))
    assert np.allclose(ubar, u)
