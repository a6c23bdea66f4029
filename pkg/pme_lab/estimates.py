"""
Explicit gradient bounds for positive solutions and their checks on solved fields.

Display forms (on u):                       Pressure forms (on f):
  case1  |grad u^(3(m-1)/2)|                  est1  ((m-1) f + m) |grad f|^2 <= 2 ||f0||^2 / t
  case2  |grad u^(m-1)|        (n = 1)        thm3  |grad f|^2 <= 2 ||f0|| / (m t)
  case3  |grad u^(1-m)|                       e671  |grad f| <= sqrt2 ||f0|| sqrt((1-m)||f0|| + m) / (m sqrt t)
  case4  |grad log u|                         thm6  |grad log u| <= 2 sqrt||f0|| / (m^2 sqrt(t |2m - 4 - sqrt2 beta2 / m|))
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from pme_lab.config import DISCRETIZATION_TOL_FACTOR, EARLY_TIME_CUTOFF
from pme_lab.errors import RegimeError
from pme_lab.grid_pde import ScalarFieldHistory, gradient
from pme_lab.martingale_checks import beta_roots
from pme_lab.transform import SUB, SUPER, PressureField, aronson_benilan_margin, to_pressure

logger = logging.getLogger(__name__)

DISPLAY_CASES = ("case1", "case2", "case3", "case4")
PRESSURE_FORMS = ("est1", "thm3", "e671", "thm6")
PRESSURE_FOR_CASE = dict(zip(DISPLAY_CASES, PRESSURE_FORMS))


@dataclass
class EstimateReport:
    case: str
    m: float
    n: int
    T: float
    norm: float
    regime_valid: bool
    tolerance: float
    times: list[float] = field(default_factory=list)
    bounds: list[float] = field(default_factory=list)
    observed: list[float] = field(default_factory=list)

    @property
    def margins(self) -> list[float]:
        return [b - o for b, o in zip(self.bounds, self.observed)]

    @property
    def graded(self) -> list[int]:
        return [i for i, t in enumerate(self.times) if t >= EARLY_TIME_CUTOFF - 1e-12]

    @property
    def min_margin(self) -> Optional[float]:
        margins = self.margins
        finite = [margins[i] for i in self.graded if math.isfinite(margins[i])]
        return min(finite) if finite else None

    @property
    def passed(self) -> bool:
        margin = self.min_margin
        return margin is None or margin >= -self.tolerance

    def to_dict(self) -> dict:
        return {
            "case": self.case,
            "m": self.m,
            "n": self.n,
            "T": self.T,
            "norm": self.norm,
            "regime_valid": self.regime_valid,
            "tolerance": self.tolerance,
            "graded_times": len(self.graded),
            "min_margin": self.min_margin,
            "passed": self.passed if self.regime_valid else None,
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.times, "bound": self.bounds, "observed": self.observed, "margin": self.margins})


def regime_valid(case: str, m: float, n: int) -> bool:
    """The hypothesis of each statement, strict where the statement is strict."""
    if case == "case1":
        return 1.0 < m < 1.0 + 2.0 / n
    if case == "est1":
        return 1.0 < m <= 1.0 + 2.0 / n
    if case in ("case2", "thm3"):
        return n == 1 and m > 1.0
    if case in ("case3", "e671"):
        return 1.0 - 6.0 / (n + 8.0) <= m < 1.0
    if case == "case4":
        return (n - 1.0) / (n + 3.0) < m < 1.0
    if case == "thm6":
        return (n - 1.0) / (n + 3.0) <= m < 1.0
    if case == "ab":
        return m > 1.0 - 2.0 / n and m != 1.0
    raise KeyError(case)


def log_gradient_constant(m: float, n: int) -> float:
    """|2m - 4 - sqrt2 beta2 / m|."""
    _, beta2 = beta_roots(m, n)
    return abs(2.0 * m - 4.0 - math.sqrt(2.0) * beta2 / m)


def bound_value(case: str, m: float, n: int, norm: float, t: float) -> float:
    """
    Right-hand side at time t. `norm` is ||u0^(m-1) - 1|| (case1, case2), ||u0^(1-m) - 1|| (case3, case4)
    or ||f0|| (pressure forms). Regime hypotheses are not enforced here, but a formula that is
    undefined at m raises RegimeError.
    """
    if not t > 0:
        raise RegimeError(f"Bounds are stated for t > 0, got t={t}")
    if case == "case2" and not m > 1.0:
        raise RegimeError(f"case2 bound needs m > 1, got m={m}")
    if case in ("case4", "e671", "thm6") and not 0.0 < m < 1.0:
        raise RegimeError(f"{case} bound needs 0 < m < 1, got m={m}")
    N = norm
    if case == "case1":
        return 3.0 * N**2 / (math.sqrt(2.0 * m) * t**1.5)
    if case == "case2":
        return math.sqrt(2.0 * (m - 1.0) * N) / (m * math.sqrt(t))
    if case == "case3":
        return math.sqrt(2.0) * N * math.sqrt(N + 1.0) / (math.sqrt(m) * math.sqrt(t))
    if case == "case4":
        return 2.0 * math.sqrt(m * N / (1.0 - m)) / (m**2 * math.sqrt(log_gradient_constant(m, n) * t))
    if case == "est1":
        return 2.0 * N**2 / t
    if case == "thm3":
        return 2.0 * N / (m * t)
    if case == "e671":
        return math.sqrt(2.0) * N * math.sqrt((1.0 - m) * N + m) / (m * math.sqrt(t))
    if case == "thm6":
        return 2.0 * math.sqrt(N) / (m**2 * math.sqrt(t * log_gradient_constant(m, n)))
    raise KeyError(case)


# --- Observed left-hand sides ---

def _display_power(case: str, u, m: float):
    if case == "case1":
        return u ** (1.5 * (m - 1.0))
    if case == "case2":
        return u ** (m - 1.0)
    if case == "case3":
        return u ** (1.0 - m)
    if case == "case4":
        return np.log(u)
    raise KeyError(case)


def observed_lhs(case: str, history: ScalarFieldHistory, t: float) -> float:
    """Grid supremum of |grad w| at time t with w the power (or log) of u named by the case."""
    u = history.at(t)
    grid, m = history.grid, history.m
    ghost = None
    if not grid.is_periodic and grid.oracle is not None:
        ghost = lambda *x: _display_power(case, np.asarray(grid.oracle(t, *x), dtype=float), m)
    grad = gradient(_display_power(case, u, m), grid, ghost)
    return float(np.sqrt(np.sum(grad**2, axis=0)).max())


def display_norm(case: str, u0: np.ndarray, m: float) -> float:
    power = (m - 1.0) if case in ("case1", "case2") else (1.0 - m)
    return float(np.max(np.abs(np.asarray(u0) ** power - 1.0)))


def _tolerance(grid, mesh) -> float:
    return DISCRETIZATION_TOL_FACTOR * (grid.h**2 + mesh.dt)


def _horizon_indices(mesh, T: Optional[float]) -> range:
    last = mesh.steps if T is None else mesh.index_of(T)
    return range(1, last + 1)


def _bound_or_nan(report: "EstimateReport", t: float) -> float:
    """Bound at t; outside the hypothesis a formula undefined at (m, n) gives NaN."""
    if report.regime_valid:
        return bound_value(report.case, report.m, report.n, report.norm, t)
    try:
        return bound_value(report.case, report.m, report.n, report.norm, t)
    except RegimeError:
        return float("nan")


def display_bound_check(case: str, history: ScalarFieldHistory, T: Optional[float] = None,
                        norm: Optional[float] = None) -> EstimateReport:
    """The display bound at every mesh time in (0, T], each time used as its own horizon."""
    m, n = history.m, history.grid.dim
    norm = display_norm(case, history.values[0], m) if norm is None else norm
    report = EstimateReport(
        case=case, m=m, n=n, T=T if T is not None else history.mesh.T, norm=norm,
        regime_valid=regime_valid(case, m, n), tolerance=_tolerance(history.grid, history.mesh),
    )
    if not report.regime_valid:
        logger.warning(f"{case}: m={m}, n={n} is outside the hypothesis; report is regime-invalid")
    for k in _horizon_indices(history.mesh, T):
        t = float(history.times[k])
        report.times.append(t)
        report.bounds.append(_bound_or_nan(report, t))
        report.observed.append(observed_lhs(case, history, t))
    return report


def _pressure_lhs(which: str, field: PressureField, k: int, ghost) -> float:
    f = field.f[k]
    grad = gradient(f, field.grid, ghost)
    grad_sq = np.sum(grad**2, axis=0)
    m = field.m
    if which == "est1":
        values = ((m - 1.0) * f + m) * grad_sq
    elif which == "thm3":
        values = grad_sq
    elif which == "e671":
        values = np.sqrt(grad_sq)
    else:
        # |grad log u| = |grad f| / ((1-m) f + m)
        values = np.sqrt(grad_sq) / ((1.0 - m) * f + m)
    return float(values.max())


def pressure_bound_check(which: str, field: PressureField, T: Optional[float] = None) -> EstimateReport:
    if which not in PRESSURE_FORMS:
        raise KeyError(which)
    if not field.is_history:
        raise RegimeError("Pressure bounds need a pressure history")
    grid, mesh, m, n = field.grid, field.mesh, field.m, field.grid.dim
    f0 = field.initial_sup()
    report = EstimateReport(
        case=which, m=m, n=n, T=T if T is not None else mesh.T, norm=f0,
        regime_valid=regime_valid(which, m, n), tolerance=_tolerance(grid, mesh),
    )
    if not report.regime_valid:
        logger.warning(f"{which}: m={m}, n={n} is outside the hypothesis; report is regime-invalid")
    expected = SUPER if which in ("est1", "thm3") else SUB
    if field.regime != expected:
        # the left-hand side is written in the other pressure variable
        return report
    for k in _horizon_indices(mesh, T):
        t = float(mesh.times[k])
        ghost = None
        if not grid.is_periodic and grid.oracle is not None:
            ghost = lambda *x, t=t: to_pressure(grid.oracle(t, *x), m).f
        report.times.append(t)
        report.bounds.append(_bound_or_nan(report, t))
        report.observed.append(_pressure_lhs(which, field, k, ghost))
    return report


def aronson_benilan_check(history: ScalarFieldHistory, T: Optional[float] = None) -> EstimateReport:
    """|grad v|^2 - dv/dt <= alpha v / t on every slice; `observed` holds the worst pointwise excess."""
    m, n = history.m, history.grid.dim
    report = EstimateReport(
        case="ab", m=m, n=n, T=T if T is not None else history.mesh.T, norm=float("nan"),
        regime_valid=regime_valid("ab", m, n), tolerance=_tolerance(history.grid, history.mesh),
    )
    if not report.regime_valid:
        return report
    for k in _horizon_indices(history.mesh, T):
        t = float(history.times[k])
        report.times.append(t)
        report.bounds.append(0.0)
        report.observed.append(float(-aronson_benilan_margin(history, m, t).min()))
    return report


# --- Equivalence audit ---

@dataclass
class AuditReport:
    case: str
    samples: int
    factor_min: float
    factor_max: float
    pattern: str
    pattern_residual: float
    chain_factor_min: Optional[float] = None
    chain_factor_max: Optional[float] = None

    @property
    def exact(self) -> bool:
        return abs(self.factor_min - 1.0) <= 1e-12 and abs(self.factor_max - 1.0) <= 1e-12

    def to_dict(self) -> dict:
        out = {
            "case": self.case,
            "samples": self.samples,
            "factor_min": self.factor_min,
            "factor_max": self.factor_max,
            "exact": self.exact,
            "pattern": self.pattern,
            "pattern_residual": self.pattern_residual,
        }
        if self.chain_factor_min is not None:
            out["chain_factor_min"] = self.chain_factor_min
            out["chain_factor_max"] = self.chain_factor_max
        return out


def _sample_exponent(case: str, n: int, rng: np.random.Generator) -> float:
    if case == "case1":
        return rng.uniform(1.0 + 1e-3, 1.0 + 2.0 / n)
    if case == "case2":
        return rng.uniform(1.0 + 1e-3, 4.0)
    if case == "case3":
        return rng.uniform(1.0 - 6.0 / (n + 8.0), 1.0 - 1e-3)
    return rng.uniform((n - 1.0) / (n + 3.0) + 1e-3, 1.0 - 1e-3)


def equivalence_audit(case: str, samples: int = 100, seed: int = 0) -> AuditReport:
    """
    For random admissible (u, grad u, m, n, t, norm) translate the pressure-form bound into a bound on
    the display's left-hand side through the chain rule, and return display / translated.
    `pattern` names the factor the displays are expected to carry; `pattern_residual` is the
    largest relative deviation from it.
    """
    if case not in DISPLAY_CASES:
        raise KeyError(case)
    rng = np.random.default_rng(seed)
    factors, expected, chain = [], [], []
    for _ in range(samples):
        n = 1 if case == "case2" else int(rng.integers(1, 4))
        m = _sample_exponent(case, n, rng)
        u = rng.uniform(0.2, 5.0)
        grad_u = rng.normal(size=n)
        g = float(np.linalg.norm(grad_u))
        N = rng.uniform(0.05, 2.0)
        t = rng.uniform(0.05, 2.0)
        f0 = m * N / abs(m - 1.0)

        if case == "case1":
            # |grad f| = m u^(m-2) |grad u|, display w = u^(3(m-1)/2)
            lhs_p = m * u ** (m - 1.0) * (m * u ** (m - 2.0) * g) ** 2
            lhs_d = 1.5 * (m - 1.0) * u ** (1.5 * (m - 1.0) - 1.0) * g
            translated = lhs_d * math.sqrt(bound_value("est1", m, n, f0, t) / lhs_p)
        elif case == "case2":
            lhs_p = (m * u ** (m - 2.0) * g) ** 2
            lhs_d = (m - 1.0) * u ** (m - 2.0) * g
            translated = lhs_d * math.sqrt(bound_value("thm3", m, n, f0, t) / lhs_p)
        elif case == "case3":
            lhs_p = m * u ** (-m) * g
            lhs_d = (1.0 - m) * u ** (-m) * g
            translated = lhs_d * bound_value("e671", m, n, f0, t) / lhs_p
        else:
            lhs_d = g / u
            translated = bound_value("thm6", m, n, f0, t)
            # M = 2 m^2 |grad log u|^2 and T M_0 |c| / 4 <= 2 ||f0||
            chain_bound = 2.0 * math.sqrt(f0) / (m * math.sqrt(t * log_gradient_constant(m, n)))
            chain.append(bound_value(case, m, n, N, t) / chain_bound)
            expected_chain = 1.0 / m
        factor = bound_value(case, m, n, N, t) / translated
        factors.append(factor)
        if case == "case1":
            expected.append(N / t)
        elif case == "case4":
            expected.append(expected_chain)
        else:
            expected.append(1.0)

    factors = np.array(factors)
    expected = np.array(expected)
    if case == "case1":
        pattern, observed = "display / derived = norm / t", factors
    elif case == "case4":
        pattern, observed = "display / derivation chain = 1 / m", np.array(chain)
    else:
        pattern, observed = "display = derived", factors
    report = AuditReport(
        case=case,
        samples=samples,
        factor_min=float(factors.min()),
        factor_max=float(factors.max()),
        pattern=pattern,
        pattern_residual=float(np.max(np.abs(observed / expected - 1.0))),
    )
    if chain:
        report.chain_factor_min = float(min(chain))
        report.chain_factor_max = float(max(chain))
    return report
