"""
Monte Carlo simulation of the forward-backward systems attached to the pressure PDEs.

All coefficients are read from a precomputed pressure history: f, grad f and
Hess f at (T - t, X) come from nearest-slice time lookup and multilinear space
interpolation. In both regimes Z = sigma * grad f with
    super: U = 2((m-1) f + m), sigma = sqrt(U),       drift (m-1)/2 grad f
    sub:   U = (1-m) f + m,     sigma = m sqrt(2/U),   drift -m^2 (1-m)/2 grad f / U^2
and the Girsanov tilt dW = dW~ + eps Z/U dt adds sigma eps Z/U to the drift.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy.ndimage import map_coordinates

from pme_lab.config import ESCAPE_LIMIT, FLOW_FD_STEP, FLOW_TOLERANCE, LOGL_CLIP, TANGENT_TOLERANCE
from pme_lab.errors import EnsembleError, InterpolationError, RegimeError
from pme_lab.grid_pde import GridSpec, gradient, hessian
from pme_lab.transform import SUB, SUPER, PressureField, coefficient_u, regime_of

logger = logging.getLogger(__name__)

TILTED_DRIFT = "tilted_drift"
DENSITY_WEIGHTS = "density_weights"


@dataclass(frozen=True)
class SimParams:
    m: float
    regime: str
    epsilon: float = 0.0
    T: float = 0.1
    dt: float = 1e-3
    n_paths: int = 1000
    seed: int = 0
    tilt_mode: str = DENSITY_WEIGHTS

    def __post_init__(self):
        if self.regime != regime_of(self.m):
            raise RegimeError(f"Regime '{self.regime}' does not match m={self.m}")
        if self.tilt_mode not in (TILTED_DRIFT, DENSITY_WEIGHTS):
            raise ValueError(f"Unknown tilt mode '{self.tilt_mode}'")
        if self.n_paths < 1:
            raise ValueError(f"Need at least one path, got {self.n_paths}")
        if self.T < 0 or not self.dt > 0:
            raise ValueError(f"Need T >= 0 and dt > 0, got T={self.T}, dt={self.dt}")
        if self.T > 0 and abs(round(self.T / self.dt) * self.dt - self.T) > 1e-9 * self.T:
            raise ValueError(f"dt={self.dt} does not divide T={self.T}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt)) if self.T > 0 else 0

    @property
    def tilted(self) -> bool:
        """True when paths are simulated directly under Q."""
        return self.tilt_mode == TILTED_DRIFT and self.epsilon != 0

    def to_dict(self) -> dict:
        return {
            "m": self.m, "regime": self.regime, "epsilon": self.epsilon, "T": self.T, "dt": self.dt,
            "n_paths": self.n_paths, "seed": self.seed, "tilt_mode": self.tilt_mode,
        }


@dataclass
class PathEnsemble:
    params: SimParams
    grid: GridSpec
    x0: np.ndarray
    times: np.ndarray
    X: np.ndarray                       # (paths, steps + 1, dim)
    dW: np.ndarray                      # (paths, steps, dim), increments of the driving Brownian motion
    stream_ids: np.ndarray              # (paths,)
    escaped: np.ndarray                 # (paths,)
    logL: np.ndarray = None             # (paths, steps + 1)
    Y: Optional[np.ndarray] = None      # (paths, steps + 1)
    Z: Optional[np.ndarray] = None      # (paths, steps + 1, dim)
    U: Optional[np.ndarray] = None      # (paths, steps + 1)
    J: Optional[np.ndarray] = None      # (paths, steps + 1, dim, dim)
    K: Optional[np.ndarray] = None
    grad_z: Optional[np.ndarray] = None  # d_a Z^k at X: (paths, steps + 1, a, k)
    tangent_flagged: Optional[np.ndarray] = None
    weight_epsilon: float = 0.0

    def __post_init__(self):
        if self.logL is None:
            self.logL = np.zeros(self.X.shape[:2])

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[2]

    @property
    def usable(self) -> np.ndarray:
        mask = ~self.escaped
        if self.tangent_flagged is not None:
            mask = mask & ~self.tangent_flagged
        return mask

    @property
    def escape_fraction(self) -> float:
        return float(self.escaped.mean())

    @property
    def valid(self) -> bool:
        return self.escape_fraction <= ESCAPE_LIMIT

    @property
    def measure(self) -> str:
        return "Q" if self.params.tilted else "P"

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise EnsembleError(f"Ensemble is missing {', '.join(missing)}")

    def checkpoint_indices(self, count: int) -> np.ndarray:
        """`count` equispaced mesh indices in (0, T]."""
        steps = len(self.times) - 1
        if steps == 0:
            return np.zeros(1, dtype=int)
        return np.unique(np.round(np.linspace(0, steps, count + 1)[1:]).astype(int))


# --- Coefficients ---

@dataclass(frozen=True)
class RegimeCoefficients:
    """Pointwise coefficient formulas; tilt is the eps applied to the drift (0 under P)."""
    m: float
    regime: str
    tilt: float = 0.0

    def U(self, f):
        return coefficient_u(f, self.m, self.regime)

    def sigma(self, U):
        if self.regime == SUPER:
            return np.sqrt(U)
        return self.m * math.sqrt(2.0) / np.sqrt(U)

    def dU_df(self) -> float:
        return 2.0 * (self.m - 1.0) if self.regime == SUPER else 1.0 - self.m

    def drift_scale(self, U):
        """c(U) with drift = c(U) grad f; includes the tilt sigma eps Z / U = eps sigma^2 grad f / U."""
        m = self.m
        if self.regime == SUPER:
            return np.full_like(U, (m - 1.0) / 2.0 + self.tilt)
        return (2.0 * m**2 * self.tilt - m**2 * (1.0 - m) / 2.0) / U**2

    def drift(self, U, g):
        return self.drift_scale(U)[:, None] * g

    def dsigma(self, U, g):
        """grad sigma = sigma'(U) U'(f) grad f."""
        if self.regime == SUPER:
            dsig_dU = 0.5 / np.sqrt(U)
        else:
            dsig_dU = -self.m * math.sqrt(2.0) / (2.0 * U**1.5)
        return (dsig_dU * self.dU_df())[:, None] * g

    def drift_jacobian(self, U, g, H):
        """d_j b_i = c(U) H_ij + c'(U) U'(f) g_i g_j."""
        jac = self.drift_scale(U)[:, None, None] * H
        if self.regime == SUB:
            m = self.m
            dc_dU = -2.0 * (2.0 * m**2 * self.tilt - m**2 * (1.0 - m) / 2.0) / U**3
            jac = jac + (dc_dU * self.dU_df())[:, None, None] * np.einsum("ni,nj->nij", g, g)
        return jac


def bsde_drift_coefficient(m: float, regime: str, epsilon: float = 0.0) -> float:
    """a in dY = Z.dW + a |Z|^2/U dt: (m-3)/2 (super), -(3m-1)/4 (sub); Q adds eps."""
    base = (m - 3.0) / 2.0 if regime == SUPER else -(3.0 * m - 1.0) / 4.0
    return base + epsilon


class CoefficientField:
    """Samples f, grad f and Hess f of a pressure history at (s, X) with s = T - t."""

    def __init__(self, field: PressureField, horizon: float):
        if not field.is_history:
            raise EnsembleError("Coefficients need a pressure history with grid and time mesh")
        if horizon > field.mesh.T * (1.0 + 1e-12):
            raise EnsembleError(f"Pressure history covers [0, {field.mesh.T}], shorter than T={horizon}")
        self.field = field
        self.grid = field.grid
        self.mesh = field.mesh
        self._mode = "grid-wrap" if self.grid.is_periodic else "nearest"
        self._cache: dict[int, tuple] = {}

    def slice_index(self, s: float) -> int:
        return min(max(int(round(s / self.mesh.dt)), 0), self.mesh.steps)

    def _derived(self, k: int) -> tuple:
        if k not in self._cache:
            f = self.field.f[k]
            self._cache[k] = (f, gradient(f, self.grid), hessian(f, self.grid))
        return self._cache[k]

    def _interp(self, values: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return map_coordinates(values, idx, order=1, mode=self._mode, prefilter=False)

    def sample(self, s: float, X: np.ndarray, with_hessian: bool = False) -> dict:
        f, g, H = self._derived(self.slice_index(s))
        idx = self.grid.to_index(X)
        dim = self.grid.dim
        out = {
            "f": self._interp(f, idx),
            "g": np.stack([self._interp(g[i], idx) for i in range(dim)], axis=-1),
        }
        if with_hessian:
            out["H"] = np.stack([np.stack([self._interp(H[i, j], idx) for j in range(dim)], axis=-1)
                                 for i in range(dim)], axis=-2)
        return out


def brownian_increments(params: SimParams, dim: int) -> np.ndarray:
    """Per-path streams derived from (seed, path index); identical params give identical noise."""
    out = np.empty((params.n_paths, params.steps, dim))
    scale = math.sqrt(params.dt)
    for i in range(params.n_paths):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=params.seed, spawn_key=(i,)))
        out[i] = rng.standard_normal((params.steps, dim)) * scale
    return out


# --- Forward and backward components ---

def simulate_forward(f_hist: PressureField, p: SimParams, x0) -> PathEnsemble:
    """
    Euler-Maruyama for dX = sigma dW + b dt in either regime.
    With tilt_mode = tilted_drift the driving noise is the Q-Brownian motion and the drift gains sigma eps Z/U.
    """
    if f_hist.regime != p.regime or f_hist.m != p.m:
        raise RegimeError(f"Pressure history (m={f_hist.m}) does not match SimParams (m={p.m})")
    grid = f_hist.grid
    x0 = np.asarray(x0, dtype=float).reshape(grid.dim)
    if not grid.inside(x0[None, :])[0]:
        raise InterpolationError(f"Initial point {x0} lies outside the domain")

    coeff = CoefficientField(f_hist, p.T)
    rc = RegimeCoefficients(p.m, p.regime, p.epsilon if p.tilted else 0.0)
    steps, n = p.steps, p.n_paths
    noise = brownian_increments(p, grid.dim)

    X = np.empty((n, steps + 1, grid.dim))
    X[:, 0] = x0
    escaped = np.zeros(n, dtype=bool)
    for k in range(steps):
        sample = coeff.sample(p.T - k * p.dt, X[:, k])
        U = rc.U(sample["f"])
        X[:, k + 1] = X[:, k] + rc.drift(U, sample["g"]) * p.dt + rc.sigma(U)[:, None] * noise[:, k]
        if not grid.is_periodic:
            escaped |= ~grid.inside(X[:, k + 1])
            X[escaped, k + 1] = X[escaped, k]

    paths = PathEnsemble(
        params=p, grid=grid, x0=x0, times=np.arange(steps + 1) * p.dt, X=X, dW=noise,
        stream_ids=np.arange(n), escaped=escaped,
    )
    if escaped.any():
        logger.warning(f"{int(escaped.sum())} of {n} paths left the Dirichlet subdomain and are excluded")
    if not paths.valid:
        logger.warning(f"Escape fraction {paths.escape_fraction:.2%} exceeds {ESCAPE_LIMIT:.0%}; run is invalid")
    return paths


def evaluate_yz(paths: PathEnsemble, f_hist: PressureField) -> PathEnsemble:
    """Y_t = f(T - t, X_t), U from Y, Z = sigma grad f(T - t, X_t); Y_T = f(0, X_T) since s = 0 hits slice 0."""
    p = paths.params
    grid = f_hist.grid
    coeff = CoefficientField(f_hist, p.T)
    rc = RegimeCoefficients(p.m, p.regime)
    inside = grid.inside(paths.X[~paths.escaped])
    if not inside.all():
        raise InterpolationError("Unflagged path points fall outside the interpolation range")

    steps = len(paths.times) - 1
    Y = np.empty((paths.n_paths, steps + 1))
    Z = np.empty_like(paths.X)
    for k in range(steps + 1):
        sample = coeff.sample(p.T - paths.times[k], paths.X[:, k])
        Y[:, k] = sample["f"]
        Z[:, k] = rc.sigma(rc.U(sample["f"]))[:, None] * sample["g"]
    paths.Y = Y
    paths.U = rc.U(Y)
    paths.Z = Z
    return paths


@dataclass
class BsdeResidual:
    residuals: np.ndarray  # (paths, steps)
    measure: str
    mean_cumulative: float
    se_cumulative: float
    rms_cumulative: float
    rms_step: float

    @property
    def within_band(self) -> bool:
        return abs(self.mean_cumulative) <= 3.0 * self.se_cumulative + 1e-14

    def to_dict(self) -> dict:
        return {
            "measure": self.measure,
            "mean_cumulative": self.mean_cumulative,
            "se_cumulative": self.se_cumulative,
            "rms_cumulative": self.rms_cumulative,
            "rms_step": self.rms_step,
            "within_3se": self.within_band,
        }


def bsde_residual(paths: PathEnsemble, measure: Optional[str] = None) -> BsdeResidual:
    """r_k = dY_k - Z_k . dW_k - a |Z_k|^2 / U_k dt with the drift of the simulation measure."""
    paths.require("Y", "Z", "U")
    if measure is not None and measure != paths.measure:
        raise EnsembleError(f"Paths were simulated under {paths.measure}, residual requested under {measure}")
    p = paths.params
    a = bsde_drift_coefficient(p.m, p.regime, p.epsilon if p.tilted else 0.0)
    Z, U = paths.Z[:, :-1], paths.U[:, :-1]
    r = np.diff(paths.Y, axis=1) - np.einsum("nkd,nkd->nk", Z, paths.dW) - a * np.sum(Z**2, axis=2) / U * p.dt
    r = r[paths.usable]
    if r.shape[0] == 0:
        raise EnsembleError("No usable paths for the BSDE residual")
    cumulative = r.sum(axis=1)
    return BsdeResidual(
        residuals=r,
        measure=paths.measure,
        mean_cumulative=float(cumulative.mean()),
        se_cumulative=float(cumulative.std(ddof=1) / math.sqrt(len(cumulative))) if len(cumulative) > 1 else 0.0,
        rms_cumulative=float(np.sqrt(np.mean(cumulative**2))),
        rms_step=float(np.sqrt(np.mean(r**2))) if r.size else 0.0,
    )


def girsanov_weights(paths: PathEnsemble, epsilon: float) -> np.ndarray:
    """logL_t = sum eps (Z/U).dW - 1/2 sum eps^2 |Z|^2/U^2 dt; Q-expectations become weighted P-averages."""
    paths.require("Z", "U")
    if paths.params.tilted:
        raise EnsembleError("Density weights need paths simulated under P (tilt_mode = density_weights)")
    dt = paths.params.dt
    ratio = paths.Z[:, :-1] / paths.U[:, :-1, None]
    increments = epsilon * np.einsum("nkd,nkd->nk", ratio, paths.dW) - 0.5 * epsilon**2 * np.sum(ratio**2, axis=2) * dt
    logL = np.concatenate([np.zeros((paths.n_paths, 1)), np.cumsum(increments, axis=1)], axis=1)
    clipped = np.abs(logL) > LOGL_CLIP
    if clipped.any():
        logger.warning(f"Girsanov log-density exceeds {LOGL_CLIP} on {int(clipped.any(axis=1).sum())} paths; "
                       f"clipped, tilt eps={epsilon} is poorly conditioned")
        logL = np.clip(logL, -LOGL_CLIP, LOGL_CLIP)
    paths.logL = logL
    paths.weight_epsilon = float(epsilon)
    return logL


def q_expectation(paths: PathEnsemble, values: np.ndarray, k: Optional[int] = None) -> tuple[float, float]:
    """
    Mean and standard error of a per-path functional under the measure the ensemble represents.
    Density-weighted ensembles use the weight at index k (the final one by default);
    excluded paths are dropped without renormalising the remaining weights.
    """
    mask = paths.usable
    values = np.asarray(values, dtype=float)[mask]
    k = -1 if k is None else k
    weighted = values * np.exp(paths.logL[mask, k])
    if len(weighted) == 0:
        raise EnsembleError("No usable paths for an expectation")
    se = float(weighted.std(ddof=1) / math.sqrt(len(weighted))) if len(weighted) > 1 else 0.0
    return float(weighted.mean()), se


# --- Tangent processes ---

def simulate_tangent(paths: PathEnsemble, f_hist: PressureField) -> PathEnsemble:
    """
    Euler integration of the Jacobian flow J = dX/dx and its inverse K:
        dJ = sum_k A_k J dW^k + grad b J dt,  dK = -sum_k K A_k dW^k + K (grad sigma grad sigma^T - grad b) dt
    with (A_k)_il = delta_ik d_l sigma. This is the displayed tangent system written for a scalar diffusion.
    Paths whose K.J drifts from the identity by more than TANGENT_TOLERANCE are flagged.
    """
    p = paths.params
    coeff = CoefficientField(f_hist, p.T)
    rc = RegimeCoefficients(p.m, p.regime, p.epsilon if p.tilted else 0.0)
    n, steps, dim = paths.n_paths, len(paths.times) - 1, paths.dim
    eye = np.eye(dim)

    J = np.empty((n, steps + 1, dim, dim))
    K = np.empty_like(J)
    grad_z = np.empty_like(J)
    J[:, 0] = eye
    K[:, 0] = eye
    for k in range(steps + 1):
        sample = coeff.sample(p.T - paths.times[k], paths.X[:, k], with_hessian=True)
        U = rc.U(sample["f"])
        g, H = sample["g"], sample["H"]
        sig = rc.sigma(U)
        dsig = rc.dsigma(U, g)
        # d_a Z^k = d_a sigma g_k + sigma H_ka
        grad_z[:, k] = np.einsum("na,nk->nak", dsig, g) + sig[:, None, None] * H
        if k == steps:
            break
        dW = paths.dW[:, k]
        B = rc.drift_jacobian(U, g, H)
        Jk, Kk = J[:, k], K[:, k]
        v = np.einsum("nl,nlj->nj", dsig, Jk)
        J[:, k + 1] = Jk + np.einsum("ni,nj->nij", dW, v) + np.einsum("nil,nlj->nij", B, Jk) * p.dt
        KdW = np.einsum("nil,nl->ni", Kk, dW)
        S = np.einsum("ni,nj->nij", dsig, dsig) - B
        K[:, k + 1] = Kk - np.einsum("ni,nj->nij", KdW, dsig) + np.einsum("nil,nlj->nij", Kk, S) * p.dt

    deviation = np.linalg.norm(np.einsum("ntij,ntjk->ntik", K, J) - eye, axis=(2, 3))
    flagged = deviation.max(axis=1) > TANGENT_TOLERANCE
    if flagged.any():
        logger.warning(f"{int(flagged.sum())} of {n} tangent paths flagged: |KJ - I| > {TANGENT_TOLERANCE}")
    paths.J, paths.K, paths.grad_z = J, K, grad_z
    paths.tangent_flagged = flagged
    return paths


def flow_derivative_of_z(paths: PathEnsemble) -> np.ndarray:
    """K_i^l Z_l^k with Z_l^k = d Z^k / d x^l along the flow; equals d_i Z^k(X) when KJ = I. Shape (n, t, i, k)."""
    paths.require("J", "K", "grad_z")
    flow_dz = np.einsum("ntal,ntak->ntlk", paths.J, paths.grad_z)
    return np.einsum("ntli,ntlk->ntik", paths.K, flow_dz)


def tangent_coefficient_gap(paths: PathEnsemble, f_hist: PressureField) -> float:
    """
    max |grad sigma - displayed coefficient| along the paths, where the displayed noise
    coefficient of the tangent SDEs is (m-1) Z/U (super) and -(1-m) Z/(2U) (sub).
    """
    paths.require("Z", "U")
    p = paths.params
    coeff = CoefficientField(f_hist, p.T)
    rc = RegimeCoefficients(p.m, p.regime)
    gap = 0.0
    for k, t in enumerate(paths.times):
        sample = coeff.sample(p.T - t, paths.X[:, k])
        U = rc.U(sample["f"])
        dsig = rc.dsigma(U, sample["g"])
        if p.regime == SUPER:
            displayed = (p.m - 1.0) * paths.Z[:, k] / paths.U[:, k, None]
        else:
            displayed = -(1.0 - p.m) * paths.Z[:, k] / (2.0 * paths.U[:, k, None])
        gap = max(gap, float(np.max(np.abs(dsig - displayed))))
    return gap


@dataclass
class FlowCheck:
    discrepancy: float
    kj_within_tolerance: float
    n_used: int
    n_excluded: int
    passed: bool

    def to_dict(self) -> dict:
        return {
            "rms_relative_discrepancy": self.discrepancy,
            "kj_within_tolerance_fraction": self.kj_within_tolerance,
            "n_used": self.n_used,
            "n_excluded": self.n_excluded,
            "passed": self.passed,
        }


def flow_z_check(paths: PathEnsemble, f_hist: PressureField, delta: float = FLOW_FD_STEP) -> FlowCheck:
    """
    Compare grid Z with the flow representation Z^i = sigma Y^l K_i^l (sigma = sqrt(U) super,
    sqrt(2) m U^(-1/2) sub). Y^l comes from common-random-number differences of Y across x0 +- delta e_l.
    """
    paths.require("Y", "Z", "U", "K")
    p, dim = paths.params, paths.dim
    excluded = ~paths.usable
    y_grad = np.empty(paths.Z.shape)
    for l in range(dim):
        shift = np.zeros(dim)
        shift[l] = delta
        plus = evaluate_yz(simulate_forward(f_hist, p, paths.x0 + shift), f_hist)
        minus = evaluate_yz(simulate_forward(f_hist, p, paths.x0 - shift), f_hist)
        excluded |= plus.escaped | minus.escaped
        y_grad[:, :, l] = (plus.Y - minus.Y) / (2.0 * delta)

    rc = RegimeCoefficients(p.m, p.regime)
    sig = rc.sigma(paths.U)
    z_flow = sig[:, :, None] * np.einsum("ntl,ntli->nti", y_grad, paths.K)
    use = ~excluded
    if use.sum() == 0:
        raise EnsembleError("Every path was excluded from the flow check")
    err = np.mean(np.sum((z_flow[use] - paths.Z[use]) ** 2, axis=2))
    scale = np.mean(np.sum(paths.Z[use] ** 2, axis=2))
    discrepancy = float(np.sqrt(err / scale)) if scale > 0 else float(np.sqrt(err))
    kj_ok = 1.0 - float(paths.tangent_flagged.mean()) if paths.tangent_flagged is not None else 1.0
    if excluded.any():
        logger.info(f"Flow check excluded {int(excluded.sum())} paths")
    return FlowCheck(
        discrepancy=discrepancy,
        kj_within_tolerance=kj_ok,
        n_used=int(use.sum()),
        n_excluded=int(excluded.sum()),
        passed=discrepancy <= FLOW_TOLERANCE and kj_ok >= 0.99,
    )


def z_equation_residual(paths: PathEnsemble) -> dict:
    """
    Residual of the displayed dZ equation (super regime, under P):
    dZ^i = sqrt(U) T_ik (dW^k + (3m-7)/2 Z^k/U dt) - (m-3)(m-1)/2 Z^i |Z|^2/U^2 dt - (m-1)/sqrt(U) Z^i theta dt
    with T_ik = K_i^l Z_l^k and theta = trace T. Reported, never asserted.
    """
    paths.require("Z", "U", "J", "K", "grad_z")
    p = paths.params
    if p.regime != SUPER or p.tilted:
        raise EnsembleError("The displayed dZ equation is checked in the super regime under P")
    m, dt = p.m, p.dt
    T_ik = flow_derivative_of_z(paths)[:, :-1]
    theta = np.trace(T_ik, axis1=2, axis2=3)
    Z, U = paths.Z[:, :-1], paths.U[:, :-1]
    z2 = np.sum(Z**2, axis=2)
    sqrt_u = np.sqrt(U)
    noise = paths.dW + (3.0 * m - 7.0) / 2.0 * Z / U[:, :, None] * dt
    predicted = (sqrt_u[:, :, None] * np.einsum("ntik,ntk->nti", T_ik, noise)
                 - (m - 3.0) * (m - 1.0) / 2.0 * Z * (z2 / U**2)[:, :, None] * dt
                 - (m - 1.0) / sqrt_u[:, :, None] * Z * theta[:, :, None] * dt)
    observed = np.diff(paths.Z, axis=1)
    use = paths.usable
    resid = (observed - predicted)[use]
    scale = float(np.sqrt(np.mean(observed[use] ** 2)))
    drift_per_time = resid.sum(axis=1) / p.T if p.T > 0 else resid.sum(axis=1)
    return {
        "rms_residual": float(np.sqrt(np.mean(resid**2))),
        "rms_increment": scale,
        "relative_rms": float(np.sqrt(np.mean(resid**2)) / scale) if scale > 0 else 0.0,
        "mean_drift_residual": drift_per_time.mean(axis=0).tolist(),
        "se_drift_residual": (drift_per_time.std(axis=0, ddof=1) / math.sqrt(len(drift_per_time))).tolist(),
    }


def bmo_probe(paths: PathEnsemble, count: int) -> pd.DataFrame:
    """Remaining integral of |Z/U|^2 from each checkpoint to T: mean and max over paths."""
    paths.require("Z", "U")
    dt = paths.params.dt
    density = np.sum((paths.Z / paths.U[:, :, None]) ** 2, axis=2)[paths.usable]
    rows = []
    for k in [0, *paths.checkpoint_indices(count)]:
        remaining = density[:, k:-1].sum(axis=1) * dt
        rows.append({"t": float(paths.times[k]), "mean": float(remaining.mean()), "max": float(remaining.max())})
    return pd.DataFrame(rows)


# --- Summaries ---

def tracked_functionals(paths: PathEnsemble) -> dict[str, np.ndarray]:
    paths.require("Y", "Z", "U")
    z2 = np.sum(paths.Z**2, axis=2)
    return {"Y": paths.Y, "Z2": z2, "M": z2 / paths.U, "L": np.exp(paths.logL)}


def summary_frame(paths: PathEnsemble, count: int) -> pd.DataFrame:
    """One row per checkpoint: mean, variance and standard error of every tracked functional."""
    rows = []
    functionals = tracked_functionals(paths)
    for k in [0, *paths.checkpoint_indices(count)]:
        row = {"t": float(paths.times[k])}
        for name, values in functionals.items():
            mean, se = q_expectation(paths, values[:, k], k) if name != "L" else _plain_stats(values[paths.usable, k])
            row[f"{name}_mean"] = mean
            row[f"{name}_var"] = float(values[paths.usable, k].var(ddof=1)) if paths.usable.sum() > 1 else 0.0
            row[f"{name}_se"] = se
        rows.append(row)
    return pd.DataFrame(rows)


def _plain_stats(values: np.ndarray) -> tuple[float, float]:
    se = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return float(values.mean()), se


def raw_frame(paths: PathEnsemble) -> pd.DataFrame:
    """Long layout for debugging dumps: one row per (path, step)."""
    n, t1 = paths.X.shape[:2]
    frame = pd.DataFrame({
        "path": np.repeat(paths.stream_ids, t1),
        "step": np.tile(np.arange(t1), n),
        "t": np.tile(paths.times, n),
    })
    for d in range(paths.dim):
        frame[f"X{d}"] = paths.X[:, :, d].ravel()
    if paths.Y is not None:
        frame["Y"] = paths.Y.ravel()
        for d in range(paths.dim):
            frame[f"Z{d}"] = paths.Z[:, :, d].ravel()
    frame["logL"] = paths.logL.ravel()
    return frame
