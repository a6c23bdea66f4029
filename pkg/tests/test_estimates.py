import math

import pytest

from conftest import sine_history
from pme_lab.errors import RegimeError
from pme_lab.estimates import (
    DISPLAY_CASES, aronson_benilan_check, bound_value, display_bound_check, equivalence_audit,
    log_gradient_constant, pressure_bound_check, regime_valid,
)
from pme_lab.transform import to_pressure


@pytest.mark.parametrize("case,m,n,expected", [
    ("case1", 1.5, 1, True),
    ("case1", 3.0, 2, False),
    ("case1", 2.0, 2, False),
    ("est1", 2.0, 2, True),
    ("case2", 2.0, 1, True),
    ("case2", 2.0, 2, False),
    ("case3", 0.5, 1, True),
    ("case3", 0.2, 1, False),
    ("e671", 0.8, 2, True),
    ("case4", 0.5, 1, True),
    ("case4", 0.0, 1, False),
    ("thm6", 0.2, 2, True),
    ("ab", 0.5, 1, True),
    ("ab", 0.5, 4, False),
])
def test_regime_table(case, m, n, expected):
    assert regime_valid(case, m, n) is expected


def test_bound_values():
    assert bound_value("est1", 1.5, 1, 0.5, 0.1) == pytest.approx(2 * 0.25 / 0.1)
    assert bound_value("thm3", 2.0, 1, 0.5, 0.1) == pytest.approx(2 * 0.5 / 0.2)
    assert bound_value("case2", 2.0, 1, 0.3, 0.5) == pytest.approx(math.sqrt(0.6) / (2 * math.sqrt(0.5)))
    # beta2 = 0 at (m, n) = (1/2, 1): |2m - 4| = 3
    assert log_gradient_constant(0.5, 1) == pytest.approx(3.0)
    assert bound_value("thm6", 0.5, 1, 1.0, 1.0) == pytest.approx(2 / (0.25 * math.sqrt(3)))
    with pytest.raises(RegimeError):
        bound_value("est1", 1.5, 1, 0.5, 0.0)
    with pytest.raises(KeyError):
        bound_value("case9", 1.5, 1, 0.5, 1.0)


@pytest.mark.parametrize("case", ["case2", "case3"])
def test_audit_reproduces_displays(case):
    report = equivalence_audit(case, samples=100, seed=3)
    assert report.exact
    assert report.pattern_residual <= 1e-12


def test_audit_records_norm_over_t_factor_for_case1():
    report = equivalence_audit("case1", samples=100, seed=3)
    assert not report.exact
    assert report.pattern == "display / derived = norm / t"
    assert report.pattern_residual <= 1e-10


def test_audit_records_derivation_chain_factor_for_case4():
    report = equivalence_audit("case4", samples=100, seed=3)
    assert report.factor_min == pytest.approx(1.0, rel=1e-12)
    assert report.factor_max == pytest.approx(1.0, rel=1e-12)
    assert report.pattern_residual <= 1e-10
    assert report.chain_factor_max > 1.0
    assert "chain_factor_min" in report.to_dict()


def test_display_bound_holds_on_solved_field(history_m15):
    report = display_bound_check("case1", history_m15)
    assert report.regime_valid
    assert report.graded
    assert report.passed
    assert min(report.margins[i] for i in report.graded) > 0
    frame = report.to_frame()
    assert list(frame.columns) == ["t", "bound", "observed", "margin"]
    assert len(frame) == history_m15.mesh.steps


def test_early_times_are_not_graded(history_m2):
    report = display_bound_check("case2", history_m2)
    assert report.graded == []
    assert report.min_margin is None
    assert report.passed


def test_regime_invalid_display_is_flagged():
    history = sine_history(3.0, 2, 8, 0.06)
    report = display_bound_check("case1", history)
    assert not report.regime_valid
    assert report.to_dict()["regime_valid"] is False


@pytest.mark.parametrize("which,m,n", [("est1", 1.5, 1), ("thm3", 2.0, 1), ("e671", 0.5, 1), ("thm6", 0.5, 1)])
def test_pressure_forms_hold_on_solved_fields(which, m, n):
    history = sine_history(m, n, 32, 0.1)
    report = pressure_bound_check(which, to_pressure(history, m))
    assert report.regime_valid
    assert report.passed
    assert report.norm == pytest.approx(to_pressure(history, m).initial_sup())


def test_pressure_form_in_the_wrong_regime_is_flagged(history_m2):
    report = pressure_bound_check("e671", to_pressure(history_m2, 2.0))
    assert not report.regime_valid
    assert report.times == []
    assert report.to_dict()["passed"] is None
    with pytest.raises(KeyError):
        pressure_bound_check("est9", to_pressure(history_m2, 2.0))


def test_out_of_regime_bounds_are_nan_not_errors(history_m2):
    report = display_bound_check("case4", history_m2)
    assert not report.regime_valid
    assert len(report.times) == history_m2.mesh.steps
    assert all(math.isnan(b) for b in report.bounds)
    assert all(o >= 0 for o in report.observed)
    assert report.min_margin is None


@pytest.mark.parametrize("case,m,n", [("case4", 2.0, 1), ("case2", 0.5, 1), ("e671", 1.5, 1), ("thm6", 0.1, 2)])
def test_undefined_bound_formulas_raise_regime_error(case, m, n):
    with pytest.raises(RegimeError):
        bound_value(case, m, n, 0.5, 1.0)


def test_log_gradient_bound_below_its_exponent_range():
    # (n-1)/(n+3) = 0.2 for n = 2: no real beta roots at m = 0.1
    history = sine_history(0.1, 2, 8, 0.06)
    report = pressure_bound_check("thm6", to_pressure(history, 0.1))
    assert not report.regime_valid
    assert report.times
    assert all(math.isnan(b) for b in report.bounds)


def test_pressure_bound_up_to_a_horizon(history_m15):
    report = pressure_bound_check("est1", to_pressure(history_m15, 1.5), T=history_m15.times[-2])
    assert len(report.times) == history_m15.mesh.steps - 1


def test_aronson_benilan_on_solved_field(history_m15):
    report = aronson_benilan_check(history_m15)
    assert report.regime_valid
    assert report.passed


def test_display_cases():
    assert DISPLAY_CASES == ("case1", "case2", "case3", "case4")
