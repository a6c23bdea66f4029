"""
Closed-form drift coefficients of |Z|^2 and M = |Z|^2/U, the constants that tie them to the
Girsanov parameter, and Monte Carlo realizations of the resulting submartingale claims.

Super regime:  delta = 3m - 7 + 2 eps,  beta = 2 eps - 3 - m
Sub regime:    delta = 2 sqrt2 m eps - sqrt2 (5m - 1) m / 2,  beta = delta - 2 sqrt2 m (1 - m)
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from pme_lab.config import DEFAULT_CHECKPOINTS, MIN_USABLE_PATHS, MONOTONE_BAND, SIGMA_BAND
from pme_lab.errors import EnsembleError, RegimeError
from pme_lab.fbsde import PathEnsemble, flow_derivative_of_z, q_expectation
from pme_lab.transform import SUB, SUPER, aronson_benilan_alpha

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)

Z2 = "z2"
M_OVER_U = "m_over_u"


# --- Scalar formulas ---

def z2_drift_super(m: float, n: int, delta: float) -> float:
    return (n + 3.0 - (n + 1.0) * m) * (m - 1.0) + (m - 1.0) * delta - delta**2 / 4.0


def m_drift_super(m: float, n: int, beta: float) -> float:
    return (m - 1.0) ** 2 * (1.0 - n) - beta**2


def _check_sub(m: float) -> None:
    if not 0 < m <= 1:
        raise RegimeError(f"Fast-diffusion constants need 0 < m <= 1, got m={m}")


def g_delta(m: float, n: int, delta: float) -> float:
    _check_sub(m)
    return (3.0 * (3.0 * m - 1.0) * (1.0 - m) - n * (1.0 - m) ** 2
            - SQRT2 * (1.0 - m) / m * delta - delta**2 / (2.0 * m**2))


def h_beta(m: float, n: int, beta: float) -> float:
    _check_sub(m)
    return ((1.0 - m) * ((7.0 + n) * m - 3.0 - n)
            - 2.0 * SQRT2 * beta * (1.0 - m) / m - beta**2 / (2.0 * m**2))


def beta_roots(m: float, n: int) -> tuple[float, float]:
    """Roots beta_1 <= beta_2 of H; real iff m >= (n-1)/(n+3)."""
    _check_sub(m)
    disc = 2.0 * (1.0 - m) * ((3.0 + n) * m + 1.0 - n)
    if disc < 0:
        raise RegimeError(f"H has no real roots for m={m}, n={n} (needs m >= (n-1)/(n+3))")
    centre = -2.0 * SQRT2 * m * (1.0 - m)
    half = m * math.sqrt(disc)
    return centre - half, centre + half


def z2_epsilon_super(m: float) -> float:
    """delta = 2(m-1) together with delta = 3m - 7 + 2 eps gives eps = (5-m)/2."""
    return (5.0 - m) / 2.0


def m_epsilon_super(m: float) -> float:
    """beta = 0 in beta = 2 eps - 3 - m."""
    return (3.0 + m) / 2.0


def sub_gradient_delta(m: float) -> float:
    """The delta at which G(delta) = ((n+8)m - 2 - n)(1-m)."""
    return -SQRT2 * m * (1.0 - m)


def sub_epsilon_from_delta(m: float, delta: float) -> float:
    return delta / (2.0 * SQRT2 * m) + (5.0 * m - 1.0) / 4.0


def sub_epsilon_from_beta(m: float, beta: float) -> float:
    return SQRT2 * beta / (4.0 * m) + (m + 3.0) / 4.0


@dataclass(frozen=True)
class ConstantSet:
    m: float
    n: int
    regime: str
    epsilon: float
    delta: float
    beta: float
    alpha: float
    z2_drift: Optional[float] = None
    m_drift: Optional[float] = None
    g: Optional[float] = None
    h: Optional[float] = None
    beta1: Optional[float] = None
    beta2: Optional[float] = None

    @classmethod
    def super_regime(cls, m: float, n: int, epsilon: float) -> "ConstantSet":
        if not m > 1:
            raise RegimeError(f"Porous-medium constants need m > 1, got m={m}")
        delta = 3.0 * m - 7.0 + 2.0 * epsilon
        beta = 2.0 * epsilon - 3.0 - m
        return cls(
            m=m, n=n, regime=SUPER, epsilon=epsilon, delta=delta, beta=beta,
            alpha=aronson_benilan_alpha(m, n),
            z2_drift=z2_drift_super(m, n, delta),
            m_drift=m_drift_super(m, n, beta),
        )

    @classmethod
    def sub_regime(cls, m: float, n: int, *, epsilon: Optional[float] = None, delta: Optional[float] = None,
                   beta: Optional[float] = None) -> "ConstantSet":
        """Exactly one of epsilon, delta, beta fixes the other two."""
        _check_sub(m)
        if sum(v is not None for v in (epsilon, delta, beta)) != 1:
            raise ValueError("Give exactly one of epsilon, delta, beta")
        if beta is not None:
            epsilon = sub_epsilon_from_beta(m, beta)
        elif delta is not None:
            epsilon = sub_epsilon_from_delta(m, delta)
        delta = 2.0 * SQRT2 * m * epsilon - SQRT2 * (5.0 * m - 1.0) * m / 2.0
        beta = delta - 2.0 * SQRT2 * m * (1.0 - m)
        try:
            beta1, beta2 = beta_roots(m, n)
        except RegimeError:
            beta1 = beta2 = None
        alpha = aronson_benilan_alpha(m, n) if n * (m - 1.0) + 2.0 > 0 else float("nan")
        return cls(
            m=m, n=n, regime=SUB, epsilon=epsilon, delta=delta, beta=beta, alpha=alpha,
            g=g_delta(m, n, delta), h=h_beta(m, n, beta), beta1=beta1, beta2=beta2,
        )

    @classmethod
    def for_regime(cls, m: float, n: int, epsilon: float) -> "ConstantSet":
        if m > 1:
            return cls.super_regime(m, n, epsilon)
        return cls.sub_regime(m, n, epsilon=epsilon)

    def relations_error(self) -> float:
        """Largest violation of the defining relations among the stored constants."""
        m, eps = self.m, self.epsilon
        if self.regime == SUPER:
            gaps = [self.delta - (3.0 * m - 7.0 + 2.0 * eps), self.beta - (2.0 * eps - 3.0 - m)]
        else:
            gaps = [
                self.delta - (2.0 * SQRT2 * m * eps - SQRT2 * (5.0 * m - 1.0) * m / 2.0),
                eps - sub_epsilon_from_beta(m, self.beta),
            ]
        return max(abs(g) for g in gaps)

    def to_dict(self) -> dict:
        return asdict(self)


# --- Empirical tests ---

def _measure_epsilon(paths: PathEnsemble) -> float:
    return paths.params.epsilon if paths.params.tilted else paths.weight_epsilon


def _require_paths(paths: PathEnsemble) -> None:
    paths.require("Z", "U")
    usable = int(paths.usable.sum())
    if usable < MIN_USABLE_PATHS:
        raise EnsembleError(f"Only {usable} usable paths; need at least {MIN_USABLE_PATHS}")


@dataclass
class SubmartingaleReport:
    functional: str
    epsilon: float
    times: list[float]
    means: list[float]
    ses: list[float]
    violations: list[dict]

    @property
    def monotone(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "functional": self.functional,
            "epsilon": self.epsilon,
            "monotone": self.monotone,
            "violations": self.violations,
            "checkpoints": self.to_frame().to_dict(orient="records"),
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.times, "mean": self.means, "se": self.ses})


def functional_values(paths: PathEnsemble, functional: str) -> np.ndarray:
    z2 = np.sum(paths.Z**2, axis=2)
    if functional == Z2:
        return z2
    if functional == M_OVER_U:
        return z2 / paths.U
    raise ValueError(f"Unknown functional '{functional}'")


def empirical_submartingale(paths: PathEnsemble, functional: str,
                            checkpoints: Union[int, Sequence[float], None] = None) -> SubmartingaleReport:
    """
    E^Q of the functional at each checkpoint with standard errors; a decrease larger than
    MONOTONE_BAND combined standard errors between consecutive checkpoints is a violation.
    """
    _require_paths(paths)
    values = functional_values(paths, functional)
    if checkpoints is None or isinstance(checkpoints, int):
        indices = paths.checkpoint_indices(checkpoints or DEFAULT_CHECKPOINTS)
    else:
        dt = paths.params.dt
        indices = np.array([int(round(t / dt)) for t in checkpoints])
        if np.any(indices < 0) or np.any(indices >= len(paths.times)):
            raise EnsembleError(f"Checkpoints {list(checkpoints)} fall outside [0, {paths.params.T}]")

    means, ses = [], []
    for k in indices:
        mean, se = q_expectation(paths, values[:, k], k)
        means.append(mean)
        ses.append(se)

    violations = []
    for i in range(len(indices) - 1):
        drop = means[i] - means[i + 1]
        band = MONOTONE_BAND * math.hypot(ses[i], ses[i + 1])
        if drop > band + 1e-14:
            violations.append({"from_t": float(paths.times[indices[i]]), "to_t": float(paths.times[indices[i + 1]]),
                               "drop": drop, "band": band})
    if violations:
        logger.warning(f"{functional}: {len(violations)} significant decreases under Q")
    return SubmartingaleReport(
        functional=functional,
        epsilon=_measure_epsilon(paths),
        times=[float(paths.times[k]) for k in indices],
        means=means,
        ses=ses,
        violations=violations,
    )


@dataclass
class QIntegralReport:
    form: str
    estimate: float
    se: float
    bound: float

    @property
    def margin(self) -> float:
        return self.bound - self.estimate

    @property
    def passed(self) -> bool:
        return self.estimate - SIGMA_BAND * self.se <= self.bound

    @property
    def strict_passed(self) -> bool:
        return self.estimate + SIGMA_BAND * self.se <= self.bound

    def to_dict(self) -> dict:
        return {
            "form": self.form, "estimate": self.estimate, "se": self.se, "bound": self.bound,
            "margin": self.margin, "passed": self.passed, "strict_passed": self.strict_passed,
        }


def q_integral_bound(paths: PathEnsemble, f0_sup: float, form: Optional[str] = None) -> QIntegralReport:
    """
    Forms:
      z2  (super)  E^Q int |Z|^2 dt <= 4 ||f0||^2
      m   (super)  |(m - 3 + 2 eps)/2| E^Q int |Z|^2/U dt <= 2 ||f0||
      sub          |2m - 4 - sqrt2 beta / m| E^Q int |Z|^2/(4U) dt <= 2 ||f0||
    """
    paths.require("Z", "U")
    p = paths.params
    eps = _measure_epsilon(paths)
    form = form or ("z2" if p.regime == SUPER else "sub")
    z2 = np.sum(paths.Z[:, :-1] ** 2, axis=2)
    if form == "z2":
        integrand, bound = z2, 4.0 * f0_sup**2
    elif form == "m":
        integrand, bound = abs((p.m - 3.0 + 2.0 * eps) / 2.0) * z2 / paths.U[:, :-1], 2.0 * f0_sup
    elif form == "sub":
        beta = (eps - (p.m + 3.0) / 4.0) * 4.0 * p.m / SQRT2
        weight = abs(2.0 * p.m - 4.0 - SQRT2 * beta / p.m)
        integrand, bound = weight * z2 / (4.0 * paths.U[:, :-1]), 2.0 * f0_sup
    else:
        raise ValueError(f"Unknown Q-integral form '{form}'")
    estimate, se = q_expectation(paths, integrand.sum(axis=1) * p.dt)
    return QIntegralReport(form=form, estimate=estimate, se=se, bound=bound)


# --- Remainders and completed squares ---

def _tangent_data(paths: PathEnsemble):
    T = flow_derivative_of_z(paths)
    theta = np.diagonal(T, axis1=2, axis2=3)
    Z, U = paths.Z, paths.U
    return T, theta, Z, U, np.sum(Z**2, axis=2)


def _off_diagonal(paths: PathEnsemble) -> np.ndarray:
    return ~np.eye(paths.dim, dtype=bool)


def remainder_terms(paths: PathEnsemble, consts: ConstantSet, diagonal_sign: float = -1.0) -> dict[str, np.ndarray]:
    """
    Sum-of-squares remainders along every path and time, shape (paths, steps + 1).
    Super: A (|Z|^2 equation, diagonal term taken with `diagonal_sign`, -1 as displayed) and B (M equation).
    Sub: A and B of the |Z|^2 equation and L of the U dM equation.
    """
    paths.require("Z", "U", "J", "K", "grad_z")
    T, theta, Z, U, z2 = _tangent_data(paths)
    m = consts.m
    off = _off_diagonal(paths)
    zz = np.einsum("nti,ntk->ntik", Z, Z)
    if consts.regime == SUPER:
        u32 = U**1.5
        c_delta = consts.delta * Z**2 - 2.0 * (m - 1.0) * z2[..., None]
        c_beta = consts.beta * Z**2 - 2.0 * (m - 1.0) * z2[..., None]
        cross_a = (T + consts.delta * zz / (2.0 * u32[..., None, None])) ** 2
        cross_b = (T + consts.beta * zz / (2.0 * u32[..., None, None])) ** 2
        A = U * np.sum(cross_a * off, axis=(2, 3)) \
            + U * np.sum((theta + diagonal_sign * c_delta / (2.0 * u32[..., None])) ** 2, axis=2)
        B = np.sum((theta + c_beta / (2.0 * u32[..., None])) ** 2, axis=2) + np.sum(cross_b * off, axis=(2, 3))
        return {"A": A, "B": B}

    sqrt_u = np.sqrt(U)[..., None]

    def squares(coef: float):
        c = coef * Z**2 + SQRT2 * (1.0 - m) * m * z2[..., None]
        diag = 2.0 * m**2 * np.sum((theta / sqrt_u + c / (4.0 * m**2 * U[..., None])) ** 2, axis=2)
        cross = (T / sqrt_u[..., None] + coef * zz / (4.0 * m**2 * U[..., None, None])) ** 2
        return diag, 2.0 * m**2 * np.sum(cross * off, axis=(2, 3))

    b_delta, a_delta = squares(consts.delta)
    l_diag, l_cross = squares(consts.beta)
    return {"A": a_delta, "B": b_delta, "L": l_diag + l_cross}


def _pre_completed(paths: PathEnsemble, consts: ConstantSet) -> dict[str, np.ndarray]:
    """Drift densities before completing the squares: d|Z|^2 and dM (super), d|Z|^2 and U dM (sub)."""
    T, theta, Z, U, z2 = _tangent_data(paths)
    m = consts.m
    off = _off_diagonal(paths)
    zzT = np.einsum("nti,ntk,ntik->ntik", Z, Z, T)
    diag_sq = np.sum(theta**2, axis=2)
    cross_sq = np.sum(T**2 * off, axis=(2, 3))
    cross_mix = np.sum(zzT * off, axis=(2, 3))
    if consts.regime == SUPER:
        u32 = U**1.5
        out = {}
        for name, coef in (("z2", consts.delta), ("m", consts.beta)):
            c = coef * Z**2 - 2.0 * (m - 1.0) * z2[..., None]
            body = np.sum(theta * c, axis=2) / u32 + diag_sq + cross_sq + coef * cross_mix / u32
            out[name] = body
        out["z2"] = (3.0 - m) * (m - 1.0) * z2**2 / U**2 + U * out["z2"]
        out["m"] = 2.0 * (m + 1.0 - consts.epsilon) * (m - 1.0) * z2**2 / U**3 + out["m"]
        return out

    u32 = U**1.5
    out = {}
    for name, coef in (("z2", consts.delta), ("m", consts.beta)):
        c = coef * Z**2 + SQRT2 * (1.0 - m) * m * z2[..., None]
        out[name] = (np.sum(theta * c, axis=2) / u32 + 2.0 * m**2 * diag_sq / U
                     + 2.0 * m**2 * cross_sq / U + coef * cross_mix / u32)
    out["z2"] = out["z2"] + 0.75 * (3.0 * m - 1.0) * (1.0 - m) * z2**2 / U**2
    out["m"] = out["m"] + (1.0 - m) * (2.0 * m - consts.epsilon) * z2**2 / U**2
    return out


def completed_square_gaps(paths: PathEnsemble, consts: ConstantSet) -> dict[str, float]:
    """
    Max relative gap between the pre-completed drift densities and the displayed
    "coefficient * |Z|^4 / U^k + remainder" forms, evaluated on sampled tangent data.
    """
    pre = _pre_completed(paths, consts)
    rem = remainder_terms(paths, consts)
    U = paths.U
    z4 = np.sum(paths.Z**2, axis=2) ** 2
    if consts.regime == SUPER:
        completed = {"z2": consts.z2_drift * z4 / U**2 + rem["A"], "m": consts.m_drift * z4 / U**3 + rem["B"]}
    else:
        completed = {"z2": consts.g / 4.0 * z4 / U**2 + rem["A"] + rem["B"], "m": consts.h / 4.0 * z4 / U**2 + rem["L"]}
    use = paths.usable
    gaps = {}
    for key in ("z2", "m"):
        scale = float(np.max(np.abs(pre[key][use]))) if use.any() else 0.0
        diff = float(np.max(np.abs(pre[key][use] - completed[key][use]))) if use.any() else 0.0
        gaps[key] = diff / scale if scale > 0 else diff
    return gaps
