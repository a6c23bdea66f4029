"""
Pressure-type changes of variable for u > 0 and residual checks of the transformed PDEs.

    m > 1:  f = m/(m-1) (u^(m-1) - 1),  U = 2((m-1) f + m)
    m < 1:  f = m/(1-m) (u^(1-m) - 1),  U = (1-m) f + m
    v = m/(m-1) u^(m-1)  (unshifted, Aronson-Benilan diagnostic only)
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from pme_lab.errors import GridError, RegimeError
from pme_lab.grid_pde import GridSpec, ScalarFieldHistory, TimeMesh, gradient, laplacian

logger = logging.getLogger(__name__)

SUPER = "super"
SUB = "sub"


def regime_of(m: float) -> str:
    if not m > 0:
        raise RegimeError(f"Exponent m must be positive, got {m}")
    if m == 1:
        raise RegimeError("m = 1 has no pressure transform; use log_transform")
    return SUPER if m > 1 else SUB


def positivity_term(f: np.ndarray, m: float, regime: str) -> np.ndarray:
    """(m-1) f + m in the super regime (= m u^(m-1)), (1-m) f + m in the sub regime (= m u^(1-m))."""
    if regime == SUPER:
        return (m - 1.0) * f + m
    return (1.0 - m) * f + m


def coefficient_u(f: np.ndarray, m: float, regime: str) -> np.ndarray:
    p = positivity_term(f, m, regime)
    return 2.0 * p if regime == SUPER else p


@dataclass
class PressureField:
    regime: str
    m: float
    f: np.ndarray
    U: np.ndarray
    grid: Optional[GridSpec] = None
    mesh: Optional[TimeMesh] = None

    @classmethod
    def from_f(cls, f: np.ndarray, m: float, grid: Optional[GridSpec] = None,
               mesh: Optional[TimeMesh] = None) -> "PressureField":
        regime = regime_of(m)
        f = np.asarray(f, dtype=float)
        return cls(regime=regime, m=float(m), f=f, U=coefficient_u(f, m, regime), grid=grid, mesh=mesh)

    @property
    def is_history(self) -> bool:
        return self.mesh is not None and self.grid is not None and self.f.ndim == self.grid.dim + 1

    def positivity(self) -> np.ndarray:
        return positivity_term(self.f, self.m, self.regime)

    def initial_sup(self) -> float:
        """||f_0||_inf over the grid."""
        first = self.f[0] if self.is_history else self.f
        return float(np.max(np.abs(first)))

    def at_index(self, k: int) -> np.ndarray:
        return self.f[k] if self.is_history else self.f


def to_pressure(u: Union[np.ndarray, ScalarFieldHistory], m: float) -> PressureField:
    grid = mesh = None
    if isinstance(u, ScalarFieldHistory):
        grid, mesh, u = u.grid, u.mesh, u.values
    u = np.asarray(u, dtype=float)
    if u.min() <= 0:
        raise RegimeError(f"Pressure transform needs u > 0 everywhere (min={u.min():.3e})")
    regime = regime_of(m)
    # expm1 keeps the m -> 1 limit (log u) accurate
    power = (m - 1.0) if regime == SUPER else (1.0 - m)
    f = m * np.expm1(power * np.log(u)) / power
    return PressureField(regime=regime, m=float(m), f=f, U=coefficient_u(f, m, regime), grid=grid, mesh=mesh)


def from_pressure(field: PressureField) -> np.ndarray:
    p = field.positivity()
    if np.any(p <= 0):
        raise RegimeError(f"Positivity invariant violated in the {field.regime} regime (min={p.min():.3e})")
    m = field.m
    power = (m - 1.0) if field.regime == SUPER else (1.0 - m)
    return np.exp(np.log1p(power * field.f / m) / power)


def log_transform(u: np.ndarray) -> np.ndarray:
    """The m = 1 (Hopf) limit of both pressure transforms."""
    u = np.asarray(u, dtype=float)
    if u.min() <= 0:
        raise RegimeError("log transform needs u > 0")
    return np.log(u)


def v_transform(u: np.ndarray, m: float) -> np.ndarray:
    if m == 1:
        raise RegimeError("v = m/(m-1) u^(m-1) is undefined at m = 1")
    return m / (m - 1.0) * np.asarray(u, dtype=float) ** (m - 1.0)


# --- Identities ---

def positivity_identity_error(u: np.ndarray, m: float) -> float:
    """max |positivity term - m u^(+-(m-1))| / m; zero up to round-off."""
    field = to_pressure(u, m)
    power = (m - 1.0) if field.regime == SUPER else (1.0 - m)
    return float(np.max(np.abs(field.positivity() - m * np.asarray(u) ** power)) / m)


def gradient_identity_error(u: np.ndarray, m: float, grid: GridSpec) -> float:
    """max |grad f - m u^(m-2) grad u| (super) or |grad f - m u^(-m) grad u| (sub) between discrete gradients."""
    field = to_pressure(u, m)
    power = (m - 2.0) if field.regime == SUPER else -m
    lhs = gradient(field.f, grid)
    rhs = m * np.asarray(u) ** power * gradient(u, grid)
    return float(np.max(np.abs(lhs - rhs)))


# --- PDE residuals ---

def _rhs(f: np.ndarray, lap: np.ndarray, grad_sq: np.ndarray, m: float, regime: str) -> np.ndarray:
    if regime == SUPER:
        return ((m - 1.0) * f + m) * lap + grad_sq
    p = (1.0 - m) * f + m
    return m**2 / p * lap + m**2 * (2.0 * m - 1.0) / p**2 * grad_sq


def _spatial_terms(slices: np.ndarray, times: np.ndarray, grid: GridSpec, ghost_of):
    """Laplacian and |grad|^2 of every slice; ghost_of(t) returns a ghost callable on Dirichlet grids."""
    if grid.is_periodic:
        return laplacian(slices, grid), np.sum(gradient(slices, grid) ** 2, axis=0)
    if grid.oracle is None:
        raise GridError("Dirichlet residuals need the grid oracle for ghost values")
    lap = np.empty_like(slices)
    grad_sq = np.empty_like(slices)
    for i, (s, t) in enumerate(zip(slices, times)):
        ghost = ghost_of(t)
        lap[i] = laplacian(s, grid, ghost)
        grad_sq[i] = np.sum(gradient(s, grid, ghost) ** 2, axis=0)
    return lap, grad_sq


def _check_history(values: np.ndarray, mesh: Optional[TimeMesh], grid: Optional[GridSpec]):
    if mesh is None or grid is None:
        raise GridError("Residuals need a field history with its grid and time mesh")
    if values.shape[0] < 3:
        raise GridError("History too short for central time differences (need at least 3 slices)")


def pressure_pde_residual(field: PressureField, mesh: Optional[TimeMesh] = None,
                          grid: Optional[GridSpec] = None) -> np.ndarray:
    """
    Discrete df/dt (central in time) minus the regime's right-hand side, on slices 1..steps-1:
    super: ((m-1) f + m) Lap f + |grad f|^2;  sub: m^2/((1-m) f + m) Lap f + m^2 (2m-1)/((1-m) f + m)^2 |grad f|^2.
    """
    mesh = mesh or field.mesh
    grid = grid or field.grid
    _check_history(field.f, mesh, grid)
    m, regime = field.m, field.regime
    inner = field.f[1:-1]
    dfdt = (field.f[2:] - field.f[:-2]) / (2.0 * mesh.dt)

    def ghost_of(t):
        return lambda *x: to_pressure(grid.oracle(t, *x), m).f

    lap, grad_sq = _spatial_terms(inner, mesh.times[1:-1], grid, ghost_of)
    return dfdt - _rhs(inner, lap, grad_sq, m, regime)


def v_pde_residual(history: ScalarFieldHistory) -> np.ndarray:
    """Residual of dv/dt = (m-1) v Lap v + |grad v|^2 for v = m/(m-1) u^(m-1)."""
    m, grid, mesh = history.m, history.grid, history.mesh
    _check_history(history.values, mesh, grid)
    v = v_transform(history.values, m)
    inner = v[1:-1]
    dvdt = (v[2:] - v[:-2]) / (2.0 * mesh.dt)

    def ghost_of(t):
        return lambda *x: v_transform(grid.oracle(t, *x), m)

    lap, grad_sq = _spatial_terms(inner, mesh.times[1:-1], grid, ghost_of)
    return dvdt - ((m - 1.0) * inner * lap + grad_sq)


# --- Aronson-Benilan diagnostic ---

def aronson_benilan_alpha(m: float, n: int) -> float:
    return n * (m - 1.0) / ((m - 1.0) * n + 2.0)


def aronson_benilan_margin(history: ScalarFieldHistory, m: float, t: float) -> np.ndarray:
    """
    alpha v / t - (|grad v|^2 - dv/dt) pointwise at mesh time t, v = m/(m-1) u^(m-1).
    Nonnegative where |grad v|^2 - dv/dt <= alpha v / t holds.
    """
    n = history.grid.dim
    if not m > 1.0 - 2.0 / n or m == 1:
        raise RegimeError(f"Aronson-Benilan needs m > 1 - 2/n and m != 1, got m={m}, n={n}")
    if not t > 0:
        raise RegimeError("Aronson-Benilan margin needs t > 0")
    mesh, grid = history.mesh, history.grid
    k = mesh.index_of(t)
    v = v_transform(history.values, m)
    if k < mesh.steps:
        dvdt = (v[k + 1] - v[k - 1]) / (2.0 * mesh.dt)
    else:
        dvdt = (v[k] - v[k - 1]) / mesh.dt
    ghost = None
    if not grid.is_periodic and grid.oracle is not None:
        ghost = lambda *x: v_transform(grid.oracle(t, *x), m)
    grad_sq = np.sum(gradient(v[k], grid, ghost) ** 2, axis=0)
    alpha = aronson_benilan_alpha(m, n)
    return alpha * v[k] / t - (grad_sq - dvdt)
