"""
Catalog of verification checks. Every check is a function of (context, params) returning a CheckResult;
the runner resolves parameters against the defaults registered here.
"""

import copy
import json
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np
import pandas as pd

from pme_lab.config import DEFAULT_CHECKPOINTS, SIGMA_BAND
from pme_lab.errors import ConfigError, EnsembleError, UnknownCheckError
from pme_lab.estimates import (
    DISPLAY_CASES, aronson_benilan_check, equivalence_audit, pressure_bound_check, regime_valid, display_bound_check,
)
from pme_lab.fbsde import (
    DENSITY_WEIGHTS, TILTED_DRIFT, PathEnsemble, SimParams, bmo_probe, bsde_residual, evaluate_yz, flow_z_check,
    girsanov_weights, q_expectation, raw_frame, simulate_forward, simulate_tangent, summary_frame,
    tangent_coefficient_gap, z_equation_residual,
)
from pme_lab.grid_pde import DIRICHLET, PERIODIC, GridSpec, ScalarFieldHistory, TimeMesh, solve
from pme_lab.martingale_checks import (
    M_OVER_U, Z2, ConstantSet, beta_roots, completed_square_gaps, empirical_submartingale, g_delta, h_beta,
    z2_epsilon_super, m_epsilon_super, q_integral_bound, remainder_terms, sub_epsilon_from_beta,
    sub_epsilon_from_delta, sub_gradient_delta, z2_drift_super,
)
from pme_lab.oracles import Barenblatt, ConstantSolution, TravelingWave, sine_data
from pme_lab.transform import (
    SUPER, from_pressure, gradient_identity_error, log_transform, positivity_identity_error, pressure_pde_residual,
    regime_of, to_pressure, v_pde_residual,
)

logger = logging.getLogger(__name__)

PASS = "pass"
FAIL = "fail"
REGIME_INVALID = "regime_invalid"
REPORT = "report"
ERROR = "error"

# residuals below this are treated as exact
ROUNDOFF = 1e-12


@dataclass
class CheckResult:
    id: str
    status: str
    metrics: dict = field(default_factory=dict)
    series: Optional[pd.DataFrame] = None
    frames: dict[str, pd.DataFrame] = field(default_factory=dict)
    error: Optional[str] = None

    def to_dict(self) -> dict:
        out = {"id": self.id, "status": self.status, "metrics": self.metrics}
        if self.error:
            out["error"] = self.error
        return out


@dataclass(frozen=True)
class CheckSpec:
    id: str
    description: str
    params: dict
    func: Callable[["CheckContext", dict], CheckResult]

    def resolve_params(self, given: dict, where: str) -> dict:
        resolved = dict(self.params)
        for key, value in (given or {}).items():
            if key not in self.params:
                raise ConfigError(f"{where}.{key}", f"unknown parameter for check '{self.id}'")
            default = self.params[key]
            if isinstance(default, bool) and not isinstance(value, bool):
                raise ConfigError(f"{where}.{key}", "expected a boolean")
            if isinstance(default, (int, float)) and not isinstance(default, bool):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{where}.{key}", "expected a number")
                value = float(value) if isinstance(default, float) else value
            if isinstance(default, list) and not isinstance(value, list):
                raise ConfigError(f"{where}.{key}", "expected a list")
            if isinstance(default, dict) and not isinstance(value, dict):
                raise ConfigError(f"{where}.{key}", "expected an object")
            resolved[key] = value
        return resolved

    def describe(self) -> dict:
        return {"id": self.id, "description": self.description, "params": self.params}


CATALOG: dict[str, CheckSpec] = {}


def check(check_id: str, description: str, **params):
    def register(func):
        CATALOG[check_id] = CheckSpec(check_id, description, params, func)
        return func
    return register


def get_check(check_id: str) -> CheckSpec:
    if check_id not in CATALOG:
        raise UnknownCheckError(check_id)
    return CATALOG[check_id]


def list_checks() -> list[dict]:
    return [CATALOG[k].describe() for k in sorted(CATALOG)]


# --- Problem construction ---

def build_problem(solver: dict) -> tuple[GridSpec, TimeMesh, np.ndarray]:
    """Grid, time mesh and initial slice for a resolved solver block."""
    m = solver["m"]
    grid_cfg, mesh_cfg, init = solver["grid"], solver["mesh"], solver["initial"]
    T = mesh_cfg["T"]
    kind = init["kind"]
    points = tuple(grid_cfg["points"])
    if kind == "traveling_wave":
        oracle = TravelingWave(m, init["c"])
        grid = GridSpec(1, (oracle.extent(init["margin"], init["length"]),), points, DIRICHLET, oracle)
    elif kind == "barenblatt":
        oracle = Barenblatt(m, grid_cfg["dim"], init["C"], init["t0"])
        grid = GridSpec(grid_cfg["dim"], oracle.extents(T, init["margin"]), points, DIRICHLET, oracle)
    elif kind == "constant":
        oracle = ConstantSolution(init["c"])
        grid = GridSpec(grid_cfg["dim"], tuple(map(tuple, grid_cfg["extents"])), points, grid_cfg["boundary"], oracle)
    else:
        oracle = None
        grid = GridSpec(grid_cfg["dim"], tuple(map(tuple, grid_cfg["extents"])), points, PERIODIC)

    if kind == "sine":
        u0 = sine_data(grid, init["amplitude"], init["base"])
    else:
        u0 = np.asarray(oracle(0.0, *grid.mesh()), dtype=float)

    if mesh_cfg.get("steps"):
        mesh = TimeMesh.from_steps(T, mesh_cfg["steps"])
    elif mesh_cfg.get("dt"):
        mesh = TimeMesh.from_dt(T, mesh_cfg["dt"])
    else:
        fields = [u0]
        if oracle is not None:
            fields.append(np.asarray(oracle(T, *grid.mesh()), dtype=float))
        mesh = TimeMesh.stable(T, m, grid, *fields, safety=mesh_cfg["safety"])
    return grid, mesh, u0


def merge(base: dict, override: Optional[dict]) -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


class CheckContext:
    """Shared state of one run: resolved blocks, seed and a cache of solved fields."""

    def __init__(self, solver: dict, fbsde: dict, seed: int):
        self.solver = solver
        self.fbsde = fbsde
        self.seed = seed
        self._histories: dict[str, ScalarFieldHistory] = {}
        self._key_locks: dict[str, threading.Lock] = {}
        self._lock = threading.Lock()

    def history(self, solver: Optional[dict] = None) -> ScalarFieldHistory:
        solver = solver or self.solver
        key = json.dumps(solver, sort_keys=True)
        with self._lock:
            key_lock = self._key_locks.setdefault(key, threading.Lock())
        # one solve per key; different keys solve concurrently
        with key_lock:
            if key not in self._histories:
                grid, mesh, u0 = build_problem(solver)
                self._histories[key] = solve(u0, solver["m"], mesh, grid)
            return self._histories[key]

    def ensemble(self, solver: dict, fbsde: dict, *, epsilon: float = 0.0, tilt_mode: str = DENSITY_WEIGHTS,
                 dt: Optional[float] = None, tangent: bool = False) -> tuple[PathEnsemble, Any]:
        history = self.history(solver)
        field_ = to_pressure(history, solver["m"])
        params = SimParams(
            m=solver["m"], regime=field_.regime, epsilon=epsilon, T=fbsde["T"], dt=dt or fbsde["dt"],
            n_paths=fbsde["n_paths"], seed=self.seed, tilt_mode=tilt_mode,
        )
        x0 = fbsde["x0"] if fbsde["x0"] is not None else [(a + b) / 2.0 for a, b in history.grid.extents]
        paths = evaluate_yz(simulate_forward(field_, params, x0), field_)
        if tilt_mode == DENSITY_WEIGHTS and epsilon != 0:
            girsanov_weights(paths, epsilon)
        if tangent:
            simulate_tangent(paths, field_)
        if not paths.valid:
            raise EnsembleError(f"{paths.escape_fraction:.2%} of paths escaped the subdomain")
        return paths, field_


def _status(ok: bool, valid: bool = True) -> str:
    if not valid:
        return REGIME_INVALID
    return PASS if ok else FAIL


def _frames(fbsde: dict, paths: PathEnsemble) -> dict[str, pd.DataFrame]:
    frames = {"summary": summary_frame(paths, DEFAULT_CHECKPOINTS)}
    if fbsde.get("dump_raw"):
        frames["raw_paths"] = raw_frame(paths)
    return frames


# --- Solver and transform checks ---

@check("solver_oracle", "Traveling-wave refinement study on a Dirichlet subdomain",
       m=3.0, c=1.0, margin=0.2, length=1.0, T=0.05, levels=[64, 128, 256], min_ratio=1.7, max_ratio=None)
def check_solver_oracle(ctx: CheckContext, p: dict) -> CheckResult:
    errors = []
    for cells in p["levels"]:
        solver = {
            "m": p["m"],
            "grid": {"dim": 1, "points": [cells + 1]},
            "mesh": {"T": p["T"], "safety": 0.9},
            "initial": {"kind": "traveling_wave", "c": p["c"], "margin": p["margin"], "length": p["length"]},
        }
        history = ctx.history(solver)
        exact = np.stack([history.grid.oracle(t, *history.grid.mesh()) for t in history.times])
        errors.append(float(np.max(np.abs(history.values - exact))))
    ratios = [a / b for a, b in zip(errors, errors[1:]) if b > 0]
    exact_scheme = max(errors) < 1e-10
    in_window = len(ratios) == len(errors) - 1 and min(ratios) >= p["min_ratio"]
    if p["max_ratio"] is not None:
        in_window = in_window and max(ratios) <= p["max_ratio"]
    ok = exact_scheme or in_window
    series = pd.DataFrame({"h": [p["length"] / c for c in p["levels"]], "linf_error": errors})
    # second order gives ratios near 4; the upper end is open unless max_ratio is set
    metrics = {"errors": errors, "ratios": ratios, "exact_to_roundoff": exact_scheme,
               "ratio_window": [p["min_ratio"], p["max_ratio"]], "expected_ratio": 4.0}
    return CheckResult("solver_oracle", _status(ok), metrics, series)


@check("conservation", "Discrete mass and maximum principle on periodic runs",
       cases=[[0.5, 1], [1.5, 1], [2.0, 1], [0.5, 2], [1.5, 2], [2.0, 2]],
       amplitude=0.3, points=32, T=0.01, mass_tol=1e-12)
def check_conservation(ctx: CheckContext, p: dict) -> CheckResult:
    rows = []
    for m, n in p["cases"]:
        n = int(n)
        solver = {
            "m": float(m),
            "grid": {"dim": n, "extents": [[0.0, 1.0]] * n, "points": [p["points"]] * n, "boundary": PERIODIC},
            "mesh": {"T": p["T"], "safety": 0.9},
            "initial": {"kind": "sine", "amplitude": p["amplitude"], "base": 1.0},
        }
        history = ctx.history(solver)
        mass = history.mass()
        drift = float(np.max(np.abs(np.diff(mass)) / mass[:-1]))
        flat = history.values.reshape(len(mass), -1)
        scale = float(flat.max())
        max_ok = bool(np.all(np.diff(flat.max(axis=1)) <= 1e-14 * scale))
        min_ok = bool(np.all(np.diff(flat.min(axis=1)) >= -1e-14 * scale))
        rows.append({"m": float(m), "n": n, "mass_drift": drift, "max_principle": max_ok and min_ok})
    frame = pd.DataFrame(rows)
    ok = bool((frame["mass_drift"] <= p["mass_tol"]).all() and frame["max_principle"].all())
    return CheckResult("conservation", _status(ok), {"cases": rows}, frame)


@check("pressure_residual", "Pressure PDE residual under grid refinement",
       m=2.0, dim=1, amplitude=0.3, T=0.01, levels=[32, 64], min_ratio=1.7)
def check_pressure_residual(ctx: CheckContext, p: dict) -> CheckResult:
    residuals, v_residuals = [], []
    for points in p["levels"]:
        solver = {
            "m": p["m"],
            "grid": {"dim": p["dim"], "extents": [[0.0, 1.0]] * p["dim"], "points": [points] * p["dim"],
                     "boundary": PERIODIC},
            "mesh": {"T": p["T"], "safety": 0.9},
            "initial": {"kind": "sine", "amplitude": p["amplitude"], "base": 1.0},
        }
        history = ctx.history(solver)
        residuals.append(float(np.max(np.abs(pressure_pde_residual(to_pressure(history, p["m"]))))))
        if p["m"] > 1:
            v_residuals.append(float(np.max(np.abs(v_pde_residual(history)))))
    ratios = [a / b for a, b in zip(residuals, residuals[1:])]
    ok = all(r >= p["min_ratio"] for r in ratios)
    metrics = {"residuals": residuals, "ratios": ratios}
    if v_residuals:
        metrics["v_residuals"] = v_residuals
    return CheckResult("pressure_residual", _status(ok), metrics)


@check("pressure_roundtrip", "Pressure transform round trip, identities and the m -> 1 limit",
       tol=1e-12, limit_gap=1e-5)
def check_pressure_roundtrip(ctx: CheckContext, p: dict) -> CheckResult:
    history = ctx.history()
    u = history.values[0]
    m = history.m
    roundtrip = float(np.max(np.abs(from_pressure(to_pressure(u, m)) - u) / u))
    positivity = positivity_identity_error(u, m)
    grad_gap = gradient_identity_error(u, m, history.grid)
    limit = max(float(np.max(np.abs(to_pressure(u, 1.0 + s * p["limit_gap"]).f - log_transform(u))))
                for s in (-1.0, 1.0))
    log_u = np.abs(np.log(u))
    # f - log u = (m-1)(log u + log^2 u / 2) + O((m-1)^2)
    limit_tol = 2.0 * p["limit_gap"] * float(np.max(log_u * (1.0 + log_u))) + p["tol"]
    ok = roundtrip <= p["tol"] and positivity <= p["tol"] and limit <= limit_tol
    return CheckResult("pressure_roundtrip", _status(ok), {
        "roundtrip_error": roundtrip, "positivity_identity_error": positivity,
        "gradient_identity_error": grad_gap, "log_limit_error": limit,
    })


# --- Estimate checks ---

def _pressure_check(which: str):
    def run(ctx: CheckContext, p: dict) -> CheckResult:
        history = ctx.history(merge(ctx.solver, p["solver"]))
        report = pressure_bound_check(which, to_pressure(history, history.m), p["T"] or None)
        return CheckResult(which, _status(report.passed, report.regime_valid), report.to_dict(), report.to_frame())
    return run


for _which, _desc in (("est1", "((m-1)f+m)|grad f|^2 <= 2||f0||^2/t"), ("thm3", "|grad f|^2 <= 2||f0||/(m t), n = 1"),
                      ("e671", "|grad f| bound for fast diffusion"), ("thm6", "|grad log u| bound for fast diffusion")):
    check(_which, _desc, solver={}, T=0.0)(_pressure_check(_which))


def _display_check(case: str):
    def run(ctx: CheckContext, p: dict) -> CheckResult:
        history = ctx.history(merge(ctx.solver, p["solver"]))
        report = display_bound_check(case, history, p["T"] or None)
        return CheckResult(f"thm1_{case}", _status(report.passed, report.regime_valid), report.to_dict(),
                           report.to_frame())
    return run


for _i, _case in enumerate(DISPLAY_CASES, start=1):
    check(f"thm1_case{_i}", f"Displayed gradient bound, case {_i}", solver={}, T=0.0)(_display_check(_case))


@check("ab_diagnostic", "Aronson-Benilan one-sided bound on the v variable", solver={}, T=0.0)
def check_ab(ctx: CheckContext, p: dict) -> CheckResult:
    history = ctx.history(merge(ctx.solver, p["solver"]))
    report = aronson_benilan_check(history, p["T"] or None)
    return CheckResult("ab_diagnostic", _status(report.passed, report.regime_valid), report.to_dict(),
                       report.to_frame())


@check("equivalence_audit", "Chain-rule audit of pressure forms against the displayed bounds",
       cases=list(DISPLAY_CASES), samples=100, pattern_tol=1e-10)
def check_equivalence(ctx: CheckContext, p: dict) -> CheckResult:
    reports = {case: equivalence_audit(case, p["samples"], ctx.seed).to_dict() for case in p["cases"]}
    ok = all(r["pattern_residual"] <= p["pattern_tol"] for r in reports.values())
    return CheckResult("equivalence_audit", _status(ok), reports)


@check("constant_algebra", "Closed-form constants, roots and identities", samples=20, sweep=100, seed_offset=0)
def check_constants(ctx: CheckContext, p: dict) -> CheckResult:
    rng = np.random.default_rng(ctx.seed + p["seed_offset"])
    beta2_gap = abs(beta_roots(0.5, 1)[1])

    root_gap = 0.0
    for _ in range(p["samples"]):
        n = int(rng.integers(1, 5))
        m = rng.uniform((n - 1.0) / (n + 3.0), 1.0)
        b1, b2 = beta_roots(m, n)
        root_gap = max(root_gap, abs(h_beta(m, n, b1)), abs(h_beta(m, n, b2)))

    poly_gap = 0.0
    g_gap = 0.0
    relation_gap = 0.0
    for _ in range(p["samples"]):
        n = int(rng.integers(1, 5))
        m = rng.uniform(1.0, 3.0)
        poly_gap = max(poly_gap, abs(z2_drift_super(m, n, 2.0 * (m - 1.0)) - (n + 2.0 - n * m) * (m - 1.0)))
        relation_gap = max(relation_gap, ConstantSet.super_regime(m, n, rng.uniform(0, 4)).relations_error())
        ms = rng.uniform(0.05, 1.0)
        g_gap = max(g_gap, abs(g_delta(ms, n, sub_gradient_delta(ms)) - ((n + 8.0) * ms - 2.0 - n) * (1.0 - ms)))
        relation_gap = max(relation_gap, ConstantSet.sub_regime(ms, n, epsilon=rng.uniform(0, 2)).relations_error())

    sweep_ok = True
    for n in (1, 2, 3):
        for m in np.linspace(1.0, 1.0 + 4.0 / n, p["sweep"]):
            nonneg = z2_drift_super(m, n, 2.0 * (m - 1.0)) >= -1e-14
            sweep_ok &= bool(nonneg == (m <= 1.0 + 2.0 / n + 1e-12))

    metrics = {"beta2_gap": beta2_gap, "root_gap": root_gap, "polynomial_gap": poly_gap, "g_identity_gap": g_gap,
               "relations_gap": relation_gap, "z2_sign_sweep": sweep_ok}
    ok = beta2_gap <= 1e-12 and root_gap <= 1e-10 and poly_gap <= 1e-12 and g_gap <= 1e-12 \
        and relation_gap <= 1e-12 and sweep_ok
    return CheckResult("constant_algebra", _status(ok), metrics)


# --- Monte Carlo checks ---

def _blocks(ctx: CheckContext, p: dict) -> tuple[dict, dict]:
    return merge(ctx.solver, p["solver"]), merge(ctx.fbsde, p["fbsde"])


@check("bsde_residual", "BSDE increment residual and its dt-refinement rate",
       solver={}, fbsde={}, epsilon=0.0, tilted=False, ratio_low=1.2, ratio_high=1.8)
def check_bsde(ctx: CheckContext, p: dict) -> CheckResult:
    solver, fbsde = _blocks(ctx, p)
    mode = TILTED_DRIFT if p["tilted"] else DENSITY_WEIGHTS
    results, frames = [], {}
    for level in range(2):
        paths, _ = ctx.ensemble(solver, fbsde, epsilon=p["epsilon"], tilt_mode=mode, dt=fbsde["dt"] / 2**level)
        results.append(bsde_residual(paths))
        if level == 0:
            frames = _frames(fbsde, paths)
    coarse, fine = results
    ratio = coarse.rms_cumulative / fine.rms_cumulative if fine.rms_cumulative > 0 else float("inf")
    exact = max(coarse.rms_cumulative, fine.rms_cumulative) <= ROUNDOFF
    ok = fine.within_band and (exact or p["ratio_low"] <= ratio <= p["ratio_high"])
    metrics = {"coarse": coarse.to_dict(), "fine": fine.to_dict(), "rms_ratio": None if exact else ratio}
    return CheckResult("bsde_residual", _status(ok), metrics, frames=frames)


def _default_epsilon(functional: str, m: float, n: int) -> tuple[float, str]:
    """Girsanov parameter and regime key of the submartingale statement for the functional."""
    if regime_of(m) == SUPER:
        return (z2_epsilon_super(m), "est1") if functional == Z2 else (m_epsilon_super(m), "thm3")
    if functional == Z2:
        return sub_epsilon_from_delta(m, sub_gradient_delta(m)), "e671"
    return sub_epsilon_from_beta(m, beta_roots(m, n)[1]), "thm6"


def _submartingale_check(check_id: str, functional: str):
    def run(ctx: CheckContext, p: dict) -> CheckResult:
        solver, fbsde = _blocks(ctx, p)
        n = solver["grid"]["dim"]
        eps, regime_key = _default_epsilon(functional, solver["m"], n)
        eps = p["epsilon"] if p["epsilon"] is not None else eps
        paths, _ = ctx.ensemble(solver, fbsde, epsilon=eps, tilt_mode=p["tilt_mode"])
        report = empirical_submartingale(paths, functional, p["checkpoints"])
        valid = regime_valid(regime_key, solver["m"], n)
        return CheckResult(check_id, _status(report.monotone, valid), report.to_dict(), report.to_frame(),
                           frames=_frames(fbsde, paths))
    return run


for _cid, _functional, _desc in (("submartingale_z2", Z2, "E^Q|Z|^2 is nondecreasing"),
                                 ("submartingale_m", M_OVER_U, "E^Q|Z|^2/U is nondecreasing")):
    check(_cid, _desc, solver={}, fbsde={}, epsilon=None, tilt_mode=TILTED_DRIFT,
          checkpoints=DEFAULT_CHECKPOINTS)(_submartingale_check(_cid, _functional))


@check("q_integral", "Q-expectation of the time integral against its closed-form bound",
       solver={}, fbsde={}, form="", tilt_mode=TILTED_DRIFT)
def check_q_integral(ctx: CheckContext, p: dict) -> CheckResult:
    solver, fbsde = _blocks(ctx, p)
    m, n = solver["m"], solver["grid"]["dim"]
    form = p["form"] or ("z2" if regime_of(m) == SUPER else "sub")
    eps, regime_key = _default_epsilon(Z2 if form == "z2" else M_OVER_U, m, n)
    paths, field_ = ctx.ensemble(solver, fbsde, epsilon=eps, tilt_mode=p["tilt_mode"])
    report = q_integral_bound(paths, field_.initial_sup(), form)
    status = _status(report.passed, regime_valid(regime_key, m, n))
    return CheckResult("q_integral", status, {**report.to_dict(), "epsilon": eps})


@check("flow_z", "Z against its tangent-flow representation", solver={}, fbsde={}, delta=1e-4)
def check_flow(ctx: CheckContext, p: dict) -> CheckResult:
    solver, fbsde = _blocks(ctx, p)
    paths, field_ = ctx.ensemble(solver, fbsde, tangent=True)
    result = flow_z_check(paths, field_, p["delta"])
    metrics = {**result.to_dict(), "tangent_coefficient_gap": tangent_coefficient_gap(paths, field_)}
    return CheckResult("flow_z", _status(result.passed), metrics)


@check("measure_consistency", "Tilted-drift and density-weight estimates of E^Q|Z_T|^2",
       solver={}, fbsde={}, epsilon=None)
def check_measure(ctx: CheckContext, p: dict) -> CheckResult:
    solver, fbsde = _blocks(ctx, p)
    eps = p["epsilon"] if p["epsilon"] is not None else _default_epsilon(Z2, solver["m"], solver["grid"]["dim"])[0]
    tilted, _ = ctx.ensemble(solver, fbsde, epsilon=eps, tilt_mode=TILTED_DRIFT)
    weighted, _ = ctx.ensemble(solver, fbsde, epsilon=eps, tilt_mode=DENSITY_WEIGHTS)
    q_mean, q_se = q_expectation(tilted, np.sum(tilted.Z[:, -1] ** 2, axis=1))
    w_mean, w_se = q_expectation(weighted, np.sum(weighted.Z[:, -1] ** 2, axis=1))
    unit_mean, unit_se = q_expectation(weighted, np.ones(weighted.n_paths))
    agree = abs(q_mean - w_mean) <= SIGMA_BAND * math.hypot(q_se, w_se) + 1e-14
    unit = abs(unit_mean - 1.0) <= SIGMA_BAND * unit_se + 1e-14
    metrics = {"epsilon": eps, "tilted": [q_mean, q_se], "weighted": [w_mean, w_se],
               "density_mean": [unit_mean, unit_se], "agree": bool(agree), "unit_mean": bool(unit)}
    return CheckResult("measure_consistency", _status(agree and unit), metrics)


@check("remainders", "Sum-of-squares remainders and completed-square decompositions on tangent data",
       solver={}, fbsde={}, epsilon=None)
def check_remainders(ctx: CheckContext, p: dict) -> CheckResult:
    solver, fbsde = _blocks(ctx, p)
    m, n = solver["m"], solver["grid"]["dim"]
    eps = p["epsilon"] if p["epsilon"] is not None else _default_epsilon(Z2, m, n)[0]
    paths, _ = ctx.ensemble(solver, fbsde, tangent=True)
    consts = ConstantSet.for_regime(m, n, eps)
    terms = remainder_terms(paths, consts)
    minima = {k: float(v[paths.usable].min()) for k, v in terms.items()}
    gaps = completed_square_gaps(paths, consts)
    ok = all(v >= -1e-12 for v in minima.values())
    return CheckResult("remainders", _status(ok), {"constants": consts.to_dict(), "minima": minima,
                                                   "completed_square_gaps": gaps})


@check("z_equation", "Residual of the displayed dZ equation (reported)", solver={}, fbsde={})
def check_z_equation(ctx: CheckContext, p: dict) -> CheckResult:
    solver, fbsde = _blocks(ctx, p)
    if regime_of(solver["m"]) != SUPER:
        return CheckResult("z_equation", REGIME_INVALID, {"reason": "stated for m > 1"})
    paths, _ = ctx.ensemble(solver, fbsde, tangent=True)
    return CheckResult("z_equation", REPORT, z_equation_residual(paths))


@check("bmo_probe", "Remaining integral of |Z/U|^2 from each checkpoint (reported)",
       solver={}, fbsde={}, checkpoints=DEFAULT_CHECKPOINTS)
def check_bmo(ctx: CheckContext, p: dict) -> CheckResult:
    solver, fbsde = _blocks(ctx, p)
    paths, _ = ctx.ensemble(solver, fbsde)
    frame = bmo_probe(paths, p["checkpoints"])
    return CheckResult("bmo_probe", REPORT, {"max_remaining": float(frame["max"].max())}, frame)
