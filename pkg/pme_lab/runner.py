"""
Experiment orchestration: validates a JSON config, executes the requested checks in order
and turns the outcome into a RunReport and a process exit status.
"""

import asyncio
import json
import logging
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
import scipy

from pme_lab import config as settings
from pme_lab.checks import ERROR, FAIL, CheckContext, CheckResult, get_check, merge
from pme_lab.errors import ConfigError, PmeLabError, UnknownCheckError

logger = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

INITIAL_DEFAULTS = {
    "constant": {"c": 1.0},
    "sine": {"amplitude": 0.3, "base": 1.0},
    "traveling_wave": {"c": 1.0, "margin": 0.2, "length": 1.0},
    "barenblatt": {"C": 1.0, "t0": 1.0, "margin": 0.2},
}


@dataclass(frozen=True)
class CheckRequest:
    id: str
    params: dict


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    seed: int
    solver: dict
    fbsde: dict
    checks: tuple[CheckRequest, ...]
    output_dir: Optional[str] = None
    parallel: bool = False

    def to_dict(self) -> dict:
        """Fully resolved echo; running it again reproduces the run."""
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "solver": self.solver,
            "fbsde": self.fbsde,
            "checks": [{"id": c.id, "params": c.params} for c in self.checks],
            "parallel": self.parallel,
        }


class _Validator:
    """Collects (field, reason) pairs so one pass reports every problem."""

    def __init__(self):
        self.problems: list[tuple[str, str]] = []

    def fail(self, where: str, reason: str) -> None:
        self.problems.append((where, reason))

    def number(self, d: dict, key: str, where: str, default: Any = None, positive: bool = False,
               integer: bool = False) -> Any:
        value = d.get(key, default)
        if value is None:
            if default is None and key not in d:
                self.fail(f"{where}.{key}", "required")
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(f"{where}.{key}", "expected a number")
            return default
        if integer and int(value) != value:
            self.fail(f"{where}.{key}", "expected an integer")
            return default
        if positive and not value > 0:
            self.fail(f"{where}.{key}", "must be positive")
        return int(value) if integer else float(value)

    def raise_if_any(self) -> None:
        if self.problems:
            field_, reason = self.problems[0]
            raise ConfigError(field_, reason, self.problems)


def _interval(e: Any) -> bool:
    return isinstance(e, list) and len(e) == 2 and all(isinstance(x, (int, float)) for x in e) and e[1] > e[0]


def _object(d: dict, key: str, v: _Validator, where: str) -> dict:
    value = d.get(key, {})
    if not isinstance(value, dict):
        v.fail(f"{where}.{key}", "expected an object")
        return {}
    return value


def _solver_block(d: Any, v: _Validator, where: str) -> dict:
    if not isinstance(d, dict):
        v.fail(where, "expected an object")
        return {}
    m = v.number(d, "m", where, positive=True)

    grid = _object(d, "grid", v, where)
    dim = v.number(grid, "dim", f"{where}.grid", default=1, integer=True)
    if dim not in (1, 2):
        v.fail(f"{where}.grid.dim", "only 1 and 2 are supported")
        dim = 1
    points = grid.get("points", 64)
    if isinstance(points, int):
        points = [points] * dim
    if not isinstance(points, list) or len(points) != dim or not all(isinstance(p, int) and p >= 4 for p in points):
        v.fail(f"{where}.grid.points", f"expected {dim} integers >= 4")
    extents = grid.get("extents", [[0.0, 1.0]] * dim)
    if not isinstance(extents, list) or len(extents) != dim or not all(_interval(e) for e in extents):
        v.fail(f"{where}.grid.extents", f"expected {dim} intervals [a, b] with b > a")
    boundary = grid.get("boundary", "periodic")
    if boundary not in ("periodic", "dirichlet_oracle"):
        v.fail(f"{where}.grid.boundary", "expected 'periodic' or 'dirichlet_oracle'")

    mesh = _object(d, "mesh", v, where)
    resolved_mesh = {
        "T": v.number(mesh, "T", f"{where}.mesh", positive=True),
        "steps": v.number(mesh, "steps", f"{where}.mesh", default=0, integer=True),
        "dt": v.number(mesh, "dt", f"{where}.mesh", default=0.0),
        "safety": v.number(mesh, "safety", f"{where}.mesh", default=settings.CFL_SAFETY, positive=True),
    }
    if resolved_mesh["steps"] is not None and resolved_mesh["steps"] < 0:
        v.fail(f"{where}.mesh.steps", "must be nonnegative")
    if resolved_mesh["dt"] is not None and resolved_mesh["dt"] < 0:
        v.fail(f"{where}.mesh.dt", "must be nonnegative")

    initial = d.get("initial", {"kind": "sine"})
    kind = initial.get("kind") if isinstance(initial, dict) else None
    if kind not in INITIAL_DEFAULTS:
        v.fail(f"{where}.initial.kind", f"expected one of {sorted(INITIAL_DEFAULTS)}")
        resolved_initial = {"kind": kind}
    else:
        resolved_initial = {"kind": kind}
        for key, default in INITIAL_DEFAULTS[kind].items():
            resolved_initial[key] = v.number(initial, key, f"{where}.initial", default=default)
        if kind == "sine" and not resolved_initial["amplitude"] < resolved_initial["base"]:
            v.fail(f"{where}.initial.amplitude", "must be smaller than base to keep u > 0")
        if kind == "traveling_wave" and dim != 1:
            v.fail(f"{where}.initial.kind", "traveling wave is one-dimensional")
        if kind == "constant" and not resolved_initial["c"] > 0:
            v.fail(f"{where}.initial.c", "must be positive")

    return {
        "m": m,
        "grid": {"dim": dim, "points": points, "extents": extents, "boundary": boundary},
        "mesh": resolved_mesh,
        "initial": resolved_initial,
    }


def _fbsde_block(d: Any, solver: dict, v: _Validator, where: str) -> dict:
    if not isinstance(d, dict):
        v.fail(where, "expected an object")
        return {}
    block = {
        "T": v.number(d, "T", where, default=settings.DEFAULT_SDE_T, positive=True),
        "dt": v.number(d, "dt", where, default=settings.DEFAULT_SDE_DT, positive=True),
        "n_paths": v.number(d, "n_paths", where, default=settings.DEFAULT_PATHS, positive=True, integer=True),
        "x0": d.get("x0"),
        "dump_raw": bool(d.get("dump_raw", False)),
    }
    dim = solver.get("grid", {}).get("dim", 1)
    if block["x0"] is not None and (not isinstance(block["x0"], list) or len(block["x0"]) != dim):
        v.fail(f"{where}.x0", f"expected a list of {dim} coordinates")
    solver_T = solver.get("mesh", {}).get("T")
    if solver_T and block["T"] and block["T"] > solver_T * (1.0 + 1e-12):
        v.fail(f"{where}.T", f"exceeds the solver horizon {solver_T}")
    return block


def validate_config(raw: Any) -> ExperimentConfig:
    v = _Validator()
    if not isinstance(raw, dict):
        raise ConfigError("config", "expected a JSON object")
    scenario = raw.get("scenario")
    if not isinstance(scenario, str) or not scenario:
        v.fail("scenario", "required non-empty string")
    seed = v.number(raw, "seed", "config", default=0, integer=True)
    if seed is not None and not 0 <= seed < 2**63:
        v.fail("config.seed", "must be a nonnegative 64-bit integer")
    solver = _solver_block(raw.get("solver"), v, "solver")
    fbsde = _fbsde_block(raw.get("fbsde", {}), solver, v, "fbsde")

    checks = []
    entries = raw.get("checks")
    if not isinstance(entries, list) or not entries:
        v.fail("checks", "expected a non-empty list")
        entries = []
    for i, entry in enumerate(entries):
        where = f"checks[{i}]"
        if isinstance(entry, str):
            entry = {"id": entry}
        if not isinstance(entry, dict) or "id" not in entry:
            v.fail(where, "expected a check id or an object with 'id'")
            continue
        try:
            spec = get_check(entry["id"])
            params = spec.resolve_params(entry.get("params", {}), f"{where}.params")
        except UnknownCheckError as e:
            v.fail(f"{where}.id", str(e))
            continue
        except ConfigError as e:
            v.problems.extend(e.problems)
            continue
        if "solver" in params:
            params["solver"] = _solver_block(merge(solver, params["solver"]), v, f"{where}.params.solver")
        if "fbsde" in params:
            params["fbsde"] = _fbsde_block(merge(fbsde, params["fbsde"]), params.get("solver", solver), v,
                                           f"{where}.params.fbsde")
        checks.append(CheckRequest(entry["id"], params))

    parallel = raw.get("parallel", False)
    if not isinstance(parallel, bool):
        v.fail("parallel", "expected a boolean")
    v.raise_if_any()
    return ExperimentConfig(
        scenario=scenario, seed=seed, solver=solver, fbsde=fbsde, checks=tuple(checks),
        output_dir=raw.get("output_dir"), parallel=parallel,
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"invalid JSON: {e}")
    return validate_config(raw)


@dataclass
class RunReport:
    config: ExperimentConfig
    results: list[CheckResult]
    timing: dict = field(default_factory=dict)

    @property
    def overall(self) -> str:
        statuses = {r.status for r in self.results}
        if ERROR in statuses:
            return ERROR
        return FAIL if FAIL in statuses else "pass"

    @property
    def exit_code(self) -> int:
        return {ERROR: EXIT_RUNTIME, FAIL: EXIT_FAIL}.get(self.overall, EXIT_PASS)

    def to_dict(self) -> dict:
        """Numeric sections only; identical across runs of the same config."""
        return {
            "scenario": self.config.scenario,
            "versions": versions(),
            "config": self.config.to_dict(),
            "checks": [r.to_dict() for r in self.results],
            "overall": self.overall,
        }


def versions() -> dict:
    return {"pme_lab": settings.VERSION, "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pd.__version__}


def execute_check(ctx: CheckContext, request: CheckRequest) -> tuple[CheckResult, float]:
    """Run one check; errors become an error result naming the check instead of aborting the run."""
    spec = get_check(request.id)
    logger.info(f"Check {request.id} started")
    start = time.perf_counter()
    try:
        result = spec.func(ctx, request.params)
    except PmeLabError as e:
        logger.error(f"Check {request.id} failed with {type(e).__name__}: {e}")
        result = CheckResult(request.id, ERROR, error=f"{type(e).__name__}: {e}")
    except Exception as e:
        logger.exception(f"Check {request.id} crashed")
        result = CheckResult(request.id, ERROR, error=f"{type(e).__name__}: {e}")
    elapsed = time.perf_counter() - start
    logger.info(f"Check {request.id} finished: {result.status} ({elapsed:.2f}s)")
    return result, elapsed


async def _execute_parallel(ctx: CheckContext, requests: tuple[CheckRequest, ...]) -> list[tuple[CheckResult, float]]:
    # gather keeps the declared order regardless of completion order
    return await asyncio.gather(*(asyncio.to_thread(execute_check, ctx, r) for r in requests))


def execute(config: ExperimentConfig, parallel: Optional[bool] = None) -> RunReport:
    ctx = CheckContext(config.solver, config.fbsde, config.seed)
    parallel = config.parallel if parallel is None else parallel
    started = datetime.now(timezone.utc).isoformat()
    start = time.perf_counter()
    if parallel:
        outcomes = asyncio.run(_execute_parallel(ctx, config.checks))
    else:
        outcomes = [execute_check(ctx, r) for r in config.checks]
    timing = {
        "started_at": started,
        "total_seconds": time.perf_counter() - start,
        "checks": [{"id": r.id, "seconds": s} for r, s in outcomes],
    }
    return RunReport(config=config, results=[r for r, _ in outcomes], timing=timing)


def output_directory(config: ExperimentConfig, override: Optional[str] = None) -> Path:
    base = override or settings.OUTPUT_DIR or config.output_dir or settings.DEFAULT_OUTPUT_DIR
    return Path(base) / config.scenario


def run(config_path, parallel: Optional[bool] = None, output_dir: Optional[str] = None) -> tuple[RunReport, int]:
    """Load, execute and write one experiment. Config errors propagate as ConfigError."""
    from pme_lab.reports import write_run_report

    config = load_config(config_path)
    logger.info(f"Running scenario '{config.scenario}' with {len(config.checks)} checks")
    report = execute(config, parallel)
    directory = output_directory(config, output_dir)
    write_run_report(report, directory)
    logger.info(f"Scenario '{config.scenario}' finished: {report.overall}")
    return report, report.exit_code
