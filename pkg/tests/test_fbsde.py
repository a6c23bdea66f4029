import math

import numpy as np
import pytest

from conftest import constant_history, make_ensemble, sine_history
from pme_lab.errors import EnsembleError, InterpolationError, RegimeError
from pme_lab.fbsde import (
    DENSITY_WEIGHTS, TILTED_DRIFT, CoefficientField, RegimeCoefficients, SimParams, bmo_probe, brownian_increments,
    bsde_drift_coefficient, bsde_residual, flow_z_check, girsanov_weights, q_expectation, raw_frame,
    simulate_forward, summary_frame, tangent_coefficient_gap, z_equation_residual,
)
from pme_lab.transform import SUB, SUPER, to_pressure


def test_sim_params_validation():
    assert SimParams(m=2.0, regime=SUPER, T=0.01, dt=1e-3).steps == 10
    assert SimParams(m=2.0, regime=SUPER, T=0.0, dt=1e-3).steps == 0
    with pytest.raises(RegimeError):
        SimParams(m=2.0, regime=SUB)
    with pytest.raises(ValueError):
        SimParams(m=2.0, regime=SUPER, T=0.01, dt=3e-3)
    with pytest.raises(ValueError):
        SimParams(m=2.0, regime=SUPER, tilt_mode="sideways")


def test_tilted_only_with_nonzero_epsilon():
    assert not SimParams(m=2.0, regime=SUPER, tilt_mode=TILTED_DRIFT).tilted
    assert SimParams(m=2.0, regime=SUPER, epsilon=1.0, tilt_mode=TILTED_DRIFT).tilted
    assert not SimParams(m=2.0, regime=SUPER, epsilon=1.0).tilted


def test_regime_coefficients():
    U = np.array([0.5, 2.0])
    np.testing.assert_allclose(RegimeCoefficients(2.0, SUPER).sigma(U), np.sqrt(U))
    np.testing.assert_allclose(RegimeCoefficients(0.5, SUB).sigma(U), 0.5 * math.sqrt(2) / np.sqrt(U))
    # tilt adds eps sigma^2 grad f / U
    assert RegimeCoefficients(2.0, SUPER, tilt=0.7).drift_scale(U)[0] == pytest.approx(0.5 + 0.7)
    sub = RegimeCoefficients(0.5, SUB, tilt=0.7)
    np.testing.assert_allclose(sub.drift_scale(U), (2 * 0.25 * 0.7 - 0.25 * 0.5 / 2) / U**2)


@pytest.mark.parametrize("m,regime,eps,expected", [
    (2.0, SUPER, 0.0, -0.5),
    (3.0, SUPER, 1.0, 1.0),
    (0.5, SUB, 0.0, -0.125),
    (0.5, SUB, 0.5, 0.375),
])
def test_bsde_drift_coefficient(m, regime, eps, expected):
    assert bsde_drift_coefficient(m, regime, eps) == pytest.approx(expected)


def test_brownian_streams_are_per_path():
    small = brownian_increments(SimParams(m=2.0, regime=SUPER, T=0.01, dt=1e-3, n_paths=4, seed=5), 2)
    large = brownian_increments(SimParams(m=2.0, regime=SUPER, T=0.01, dt=1e-3, n_paths=9, seed=5), 2)
    np.testing.assert_array_equal(small, large[:4])
    other = brownian_increments(SimParams(m=2.0, regime=SUPER, T=0.01, dt=1e-3, n_paths=4, seed=6), 2)
    assert not np.array_equal(small, other)


def test_brownian_increment_scale():
    dW = brownian_increments(SimParams(m=2.0, regime=SUPER, T=0.1, dt=1e-3, n_paths=200, seed=1), 1)
    assert dW.std() == pytest.approx(math.sqrt(1e-3), rel=0.05)


@pytest.mark.parametrize("m,c,variance_rate", [
    (2.0, 1.5, 6.0),  # f = 1, U = 2((m-1) f + m) = 6
    (0.5, 1.0, 1.0),  # f = 0, U = m, sigma = m sqrt2 / sqrt(U) = 1
])
def test_constant_field_paths_are_scaled_brownian_motion(m, c, variance_rate):
    T, n = 0.01, 10_000
    field = to_pressure(constant_history(m, c, 32, T), m)
    paths = simulate_forward(field, SimParams(m=m, regime=field.regime, T=T, dt=1e-3, n_paths=n, seed=3), [0.5])
    expected = variance_rate * T
    se = expected * math.sqrt(2.0 / (n - 1))
    assert abs(paths.X[:, -1, 0].var(ddof=1) - expected) <= 3 * se


def test_zero_horizon_gives_constant_paths(history_m2):
    field = to_pressure(history_m2, 2.0)
    paths = simulate_forward(field, SimParams(m=2.0, regime=SUPER, T=0.0, dt=1e-3, n_paths=5), [0.3])
    assert paths.X.shape == (5, 1, 1)
    np.testing.assert_array_equal(paths.X, 0.3)


def test_coefficient_field_needs_long_enough_history(history_m2):
    field = to_pressure(history_m2, 2.0)
    with pytest.raises(EnsembleError):
        CoefficientField(field, 1.0)
    with pytest.raises(EnsembleError):
        CoefficientField(to_pressure(history_m2.values[0], 2.0), 0.01)


def test_coefficients_are_exact_on_grid_nodes(history_m2):
    field = to_pressure(history_m2, 2.0)
    coeff = CoefficientField(field, 0.02)
    node = history_m2.grid.axes()[0][16]
    sample = coeff.sample(0.0, np.array([[node]]))
    assert sample["f"][0] == pytest.approx(field.f[0][16], rel=1e-13)


def test_forward_start_must_lie_inside(history_m2):
    field = to_pressure(history_m2, 2.0)
    params = SimParams(m=2.0, regime=SUPER, T=0.01, dt=1e-3, n_paths=3)
    with pytest.raises(RegimeError):
        simulate_forward(field, SimParams(m=3.0, regime=SUPER, T=0.01, dt=1e-3), [0.5])
    paths = simulate_forward(field, params, [0.5])
    assert paths.X.shape == (3, 11, 1)
    assert not paths.escaped.any()


def test_yz_on_constant_field(history_const):
    paths = make_ensemble(history_const, n_paths=20)
    f = to_pressure(np.array([1.5]), 2.0).f[0]
    np.testing.assert_allclose(paths.Y, f, rtol=1e-14)
    assert np.all(paths.Z == 0.0)
    residual = bsde_residual(paths)
    assert residual.rms_cumulative == pytest.approx(0.0, abs=1e-14)
    assert residual.within_band


def test_terminal_value_reads_initial_slice(history_m2):
    paths = make_ensemble(history_m2, n_paths=50)
    field = to_pressure(history_m2, 2.0)
    expected = CoefficientField(field, 0.01).sample(0.0, paths.X[:, -1])["f"]
    np.testing.assert_array_equal(paths.Y[:, -1], expected)
    start = CoefficientField(field, 0.01).sample(0.01, np.array([[0.5]]))["f"][0]
    np.testing.assert_allclose(paths.Y[:, 0], start)


def test_bsde_residual_rate_under_dt_halving(history_m2):
    coarse = bsde_residual(make_ensemble(history_m2, n_paths=1000, dt=1e-3))
    fine = bsde_residual(make_ensemble(history_m2, n_paths=1000, dt=5e-4))
    assert 1.1 <= coarse.rms_cumulative / fine.rms_cumulative <= 1.8


def test_bsde_residual_measure_must_match(history_m2):
    paths = make_ensemble(history_m2, n_paths=20)
    with pytest.raises(EnsembleError):
        bsde_residual(paths, measure="Q")


def test_girsanov_density_has_unit_mean(history_m2):
    paths = make_ensemble(history_m2, n_paths=1000, epsilon=1.5)
    assert paths.weight_epsilon == 1.5
    mean, se = q_expectation(paths, np.ones(paths.n_paths))
    assert abs(mean - 1.0) <= 4 * se


def test_girsanov_weights_need_paths_under_p(history_m2):
    paths = make_ensemble(history_m2, n_paths=20, epsilon=1.5, tilt_mode=TILTED_DRIFT)
    assert paths.measure == "Q"
    with pytest.raises(EnsembleError):
        girsanov_weights(paths, 1.5)


def test_q_expectation_without_weights_is_plain_mean(history_m2):
    paths = make_ensemble(history_m2, n_paths=30)
    values = paths.Y[:, -1]
    mean, se = q_expectation(paths, values)
    assert mean == pytest.approx(values.mean())
    assert se == pytest.approx(values.std(ddof=1) / math.sqrt(30))


def test_checkpoint_indices(history_m2):
    paths = make_ensemble(history_m2, n_paths=5, T=0.02)
    np.testing.assert_array_equal(paths.checkpoint_indices(10), np.arange(2, 21, 2))


def test_tangent_flows_on_constant_field(history_const):
    paths = make_ensemble(history_const, n_paths=10, tangent=True)
    np.testing.assert_allclose(paths.J, 1.0)
    np.testing.assert_allclose(paths.K, 1.0)
    assert not paths.tangent_flagged.any()


@pytest.mark.parametrize("fixture", ["tangent_paths_m2", "tangent_paths_m05"])
def test_tangent_inverse_stays_near_identity(fixture, request):
    paths = request.getfixturevalue(fixture)
    assert paths.tangent_flagged.mean() <= 0.1


@pytest.mark.parametrize("fixture,history", [("tangent_paths_m2", "history_m2"), ("tangent_paths_m05", "history_m05")])
def test_generic_tangent_coefficient_matches_displayed_one(fixture, history, request):
    paths = request.getfixturevalue(fixture)
    field = to_pressure(request.getfixturevalue(history), paths.params.m)
    assert tangent_coefficient_gap(paths, field) < 1e-9


@pytest.mark.parametrize("m", [2.0, 0.5])
def test_flow_representation_of_z(m):
    history = sine_history(m, 1, 256, 0.02)
    paths = make_ensemble(history, n_paths=300, T=0.02, dt=1e-4, tangent=True)
    result = flow_z_check(paths, to_pressure(history, m))
    assert result.discrepancy < 0.05
    assert result.n_used + result.n_excluded == 300


def test_z_equation_is_reported_under_p_only(tangent_paths_m2, tangent_paths_m05):
    report = z_equation_residual(tangent_paths_m2)
    assert set(report) >= {"rms_residual", "relative_rms", "mean_drift_residual"}
    with pytest.raises(EnsembleError):
        z_equation_residual(tangent_paths_m05)


def test_bmo_probe_decreases_to_zero(history_m2):
    frame = bmo_probe(make_ensemble(history_m2, n_paths=50), 5)
    assert frame["t"].iloc[0] == 0.0
    assert frame["mean"].iloc[-1] == 0.0
    assert frame["mean"].is_monotonic_decreasing


def test_summary_and_raw_frames(history_m2):
    paths = make_ensemble(history_m2, n_paths=40, epsilon=1.0)
    summary = summary_frame(paths, 5)
    assert len(summary) == 6
    assert {"t", "Y_mean", "Z2_se", "M_var", "L_mean"} <= set(summary.columns)
    raw = raw_frame(paths)
    assert len(raw) == 40 * 11
    assert {"path", "step", "X0", "Y", "Z0", "logL"} <= set(raw.columns)


def test_missing_components_are_reported(history_m2):
    field = to_pressure(history_m2, 2.0)
    paths = simulate_forward(field, SimParams(m=2.0, regime=SUPER, T=0.01, dt=1e-3, n_paths=3), [0.5])
    with pytest.raises(EnsembleError):
        bsde_residual(paths)


def test_escaped_paths_are_excluded(history_m2):
    from pme_lab.grid_pde import DIRICHLET, GridSpec, ScalarFieldHistory

    grid = GridSpec(1, ((0.0, 1.0),), (64,), DIRICHLET)
    clipped = ScalarFieldHistory(grid, history_m2.mesh, history_m2.values, 2.0)
    field = to_pressure(clipped, 2.0)
    params = SimParams(m=2.0, regime=SUPER, T=0.02, dt=1e-3, n_paths=50)
    paths = simulate_forward(field, params, [0.02])
    assert paths.escaped.any()
    assert not paths.valid
    with pytest.raises(InterpolationError):
        simulate_forward(field, params, [1.5])
