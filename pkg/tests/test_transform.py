import numpy as np
import pytest

from conftest import periodic_grid, sine_history
from pme_lab.errors import GridError, RegimeError
from pme_lab.transform import (
    SUB, SUPER, PressureField, aronson_benilan_alpha, aronson_benilan_margin, from_pressure,
    gradient_identity_error, log_transform, positivity_identity_error, pressure_pde_residual, regime_of,
    to_pressure, v_pde_residual, v_transform,
)

U_SAMPLES = np.array([0.2, 0.7, 1.0, 1.3, 4.0])


def test_regime_of():
    assert regime_of(2.0) == SUPER
    assert regime_of(0.5) == SUB
    with pytest.raises(RegimeError):
        regime_of(1.0)
    with pytest.raises(RegimeError):
        regime_of(0.0)


@pytest.mark.parametrize("m", [0.3, 0.5, 0.9, 1.5, 2.0, 3.0])
def test_pressure_round_trip(m):
    np.testing.assert_allclose(from_pressure(to_pressure(U_SAMPLES, m)), U_SAMPLES, rtol=1e-12)
    assert positivity_identity_error(U_SAMPLES, m) <= 1e-12


def test_coefficient_field_in_each_regime():
    np.testing.assert_allclose(to_pressure(U_SAMPLES, 2.0).U, 2 * 2.0 * U_SAMPLES, rtol=1e-12)
    np.testing.assert_allclose(to_pressure(U_SAMPLES, 0.5).U, 0.5 * U_SAMPLES**0.5, rtol=1e-12)


def test_pressure_of_one_is_zero():
    assert to_pressure(np.ones(3), 2.0).f == pytest.approx(0.0)


@pytest.mark.parametrize("gap", [1e-8, -1e-8])
def test_pressure_tends_to_log(gap):
    np.testing.assert_allclose(to_pressure(U_SAMPLES, 1.0 + gap).f, log_transform(U_SAMPLES), atol=1e-7)


def test_transforms_need_positive_u():
    with pytest.raises(RegimeError):
        to_pressure(np.array([1.0, 0.0]), 2.0)
    with pytest.raises(RegimeError):
        log_transform(np.array([-1.0]))


def test_positivity_invariant_is_enforced_on_the_way_back():
    with pytest.raises(RegimeError):
        from_pressure(PressureField.from_f(np.array([-10.0]), 2.0))


def test_v_transform():
    np.testing.assert_allclose(v_transform(U_SAMPLES, 3.0), 1.5 * U_SAMPLES**2)
    with pytest.raises(RegimeError):
        v_transform(U_SAMPLES, 1.0)


@pytest.mark.parametrize("m", [0.5, 2.0])
def test_gradient_identity_on_smooth_data(m):
    grid = periodic_grid(1, 256)
    (x,) = grid.mesh()
    u = 1.0 + 0.3 * np.sin(2 * np.pi * x)
    assert gradient_identity_error(u, m, grid) < 1e-2


@pytest.mark.parametrize("m", [0.5, 2.0])
def test_pressure_residual_decreases_under_refinement(m):
    residuals = []
    for points in (32, 64):
        history = sine_history(m, 1, points, 0.01)
        residuals.append(np.max(np.abs(pressure_pde_residual(to_pressure(history, m)))))
    assert residuals[0] / residuals[1] >= 1.7


def test_v_residual_is_small(history_m2):
    v = v_transform(history_m2.values, 2.0)
    assert np.max(np.abs(v_pde_residual(history_m2))) < 5e-2 * np.max(np.abs(np.diff(v, axis=0))) / history_m2.mesh.dt


def test_residual_needs_a_history():
    with pytest.raises(GridError):
        pressure_pde_residual(to_pressure(U_SAMPLES, 2.0))


def test_aronson_benilan_alpha():
    assert aronson_benilan_alpha(2.0, 1) == pytest.approx(1.0 / 3.0)
    assert aronson_benilan_alpha(0.5, 1) == pytest.approx(-1.0 / 3.0)


def test_aronson_benilan_margin_on_constant(history_const):
    t = history_const.times[-1]
    assert np.all(aronson_benilan_margin(history_const, 2.0, t) >= 0)
    with pytest.raises(RegimeError):
        aronson_benilan_margin(history_const, 2.0, 0.0)
