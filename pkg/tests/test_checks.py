import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from pme_lab import checks as checks_module
from pme_lab.checks import (
    CATALOG, FAIL, PASS, REGIME_INVALID, REPORT, CheckContext, build_problem, get_check, list_checks, merge,
)
from pme_lab.errors import ConfigError, UnknownCheckError
from pme_lab.grid_pde import DIRICHLET, PERIODIC

REQUIRED_IDS = {
    "est1", "thm3", "e671", "thm6", "thm1_case1", "thm1_case2", "thm1_case3", "thm1_case4", "ab_diagnostic",
    "bsde_residual", "submartingale_z2", "submartingale_m", "q_integral", "flow_z", "equivalence_audit",
}


def solver_block(m=2.0, dim=1, points=32, T=0.02, initial=None):
    return {
        "m": m,
        "grid": {"dim": dim, "points": [points] * dim, "extents": [[0.0, 1.0]] * dim, "boundary": PERIODIC},
        "mesh": {"T": T, "steps": 0, "dt": 0.0, "safety": 0.9},
        "initial": initial or {"kind": "sine", "amplitude": 0.3, "base": 1.0},
    }


FBSDE = {"T": 0.01, "dt": 1e-3, "n_paths": 200, "x0": None, "dump_raw": False}


def run_check(check_id, ctx, **params):
    spec = get_check(check_id)
    return spec.func(ctx, spec.resolve_params(params, "params"))


def test_catalog_has_the_documented_ids():
    ids = [entry["id"] for entry in list_checks()]
    assert REQUIRED_IDS <= set(ids)
    assert ids == sorted(ids)


def test_unknown_check_is_named():
    with pytest.raises(UnknownCheckError, match="no_such_check"):
        get_check("no_such_check")


def test_resolve_params_against_defaults():
    spec = get_check("solver_oracle")
    assert spec.resolve_params({"m": 2}, "x")["m"] == 2.0
    assert spec.resolve_params({}, "x")["levels"] == [64, 128, 256]
    with pytest.raises(ConfigError, match="x.wobble"):
        spec.resolve_params({"wobble": 1}, "x")
    with pytest.raises(ConfigError):
        spec.resolve_params({"m": "three"}, "x")
    with pytest.raises(ConfigError):
        spec.resolve_params({"levels": 64}, "x")


def test_merge_is_deep_and_does_not_mutate():
    base = {"a": {"b": 1, "c": 2}, "d": 3}
    merged = merge(base, {"a": {"b": 5}})
    assert merged == {"a": {"b": 5, "c": 2}, "d": 3}
    assert base["a"]["b"] == 1


@pytest.mark.parametrize("initial,boundary,dim", [
    ({"kind": "sine", "amplitude": 0.3, "base": 1.0}, PERIODIC, 2),
    ({"kind": "constant", "c": 2.0}, PERIODIC, 1),
    ({"kind": "traveling_wave", "c": 1.0, "margin": 0.2, "length": 1.0}, DIRICHLET, 1),
    ({"kind": "barenblatt", "C": 1.0, "t0": 1.0, "margin": 0.2}, DIRICHLET, 2),
])
def test_build_problem(initial, boundary, dim):
    grid, mesh, u0 = build_problem(solver_block(dim=dim, points=16, initial=initial))
    assert grid.boundary == boundary
    assert u0.shape == grid.points
    assert u0.min() > 0
    assert mesh.T == pytest.approx(0.02)


def test_build_problem_with_fixed_steps():
    solver = solver_block()
    solver["mesh"]["steps"] = 400
    _, mesh, _ = build_problem(solver)
    assert mesh.steps == 400


def test_context_caches_histories():
    ctx = CheckContext(solver_block(), FBSDE, seed=0)
    assert ctx.history() is ctx.history(solver_block())


def test_context_solves_different_fields_concurrently(monkeypatch):
    barrier = threading.Barrier(2, timeout=10)
    real_solve = checks_module.solve

    def solve_after_meeting(*args, **kwargs):
        barrier.wait()
        return real_solve(*args, **kwargs)

    monkeypatch.setattr(checks_module, "solve", solve_after_meeting)
    ctx = CheckContext(solver_block(), FBSDE, seed=0)
    with ThreadPoolExecutor(max_workers=2) as pool:
        futures = [pool.submit(ctx.history, solver_block(m=m)) for m in (2.0, 3.0)]
        histories = [f.result() for f in futures]
    assert [h.m for h in histories] == [2.0, 3.0]


def test_context_solves_each_field_once_under_threads(monkeypatch):
    calls = []
    real_solve = checks_module.solve

    def counting_solve(*args, **kwargs):
        calls.append(args[1])
        return real_solve(*args, **kwargs)

    monkeypatch.setattr(checks_module, "solve", counting_solve)
    ctx = CheckContext(solver_block(), FBSDE, seed=0)
    with ThreadPoolExecutor(max_workers=4) as pool:
        histories = list(pool.map(lambda _: ctx.history(), range(8)))
    assert calls == [2.0]
    assert all(h is histories[0] for h in histories)


def test_solver_oracle_is_exact_for_m2():
    result = run_check("solver_oracle", CheckContext(solver_block(), FBSDE, 0), m=2.0, levels=[16, 32])
    assert result.status == PASS
    assert result.metrics["exact_to_roundoff"]


def test_solver_oracle_refinement_for_m3():
    result = run_check("solver_oracle", CheckContext(solver_block(), FBSDE, 0), levels=[32, 64])
    assert result.status == PASS
    assert result.metrics["ratios"][0] >= 1.7
    assert list(result.series.columns) == ["h", "linf_error"]
    assert result.metrics["ratio_window"] == [1.7, None]
    assert result.metrics["expected_ratio"] == 4.0


def test_solver_oracle_enforces_an_upper_ratio_when_given():
    ctx = CheckContext(solver_block(), FBSDE, 0)
    result = run_check("solver_oracle", ctx, levels=[32, 64], max_ratio=1.7)
    assert result.status == FAIL
    assert result.metrics["ratio_window"] == [1.7, 1.7]
    assert run_check("solver_oracle", ctx, levels=[32, 64], max_ratio=50.0).status == PASS


def test_conservation_check():
    result = run_check("conservation", CheckContext(solver_block(), FBSDE, 0), points=16)
    assert result.status == PASS
    assert len(result.metrics["cases"]) == 6


def test_pressure_checks():
    ctx = CheckContext(solver_block(), FBSDE, 0)
    assert run_check("pressure_residual", ctx).status == PASS
    roundtrip = run_check("pressure_roundtrip", ctx)
    assert roundtrip.status == PASS
    assert roundtrip.metrics["roundtrip_error"] <= 1e-12


def test_constant_algebra_and_audit():
    ctx = CheckContext(solver_block(), FBSDE, 4)
    algebra = run_check("constant_algebra", ctx)
    assert algebra.status == PASS
    assert algebra.metrics["beta2_gap"] <= 1e-12
    assert run_check("equivalence_audit", ctx).status == PASS


def test_regime_gate_for_display_case():
    ctx = CheckContext(solver_block(m=3.0, dim=2, points=8, T=0.06), FBSDE, 0)
    assert run_check("thm1_case1", ctx).status == REGIME_INVALID


def test_estimate_check_with_solver_override():
    ctx = CheckContext(solver_block(m=1.5, T=0.1), FBSDE, 0)
    override = merge(ctx.solver, {"m": 0.5})
    result = run_check("e671", ctx, solver=override)
    assert result.status == PASS
    assert result.metrics["m"] == 0.5
    assert run_check("est1", ctx, solver=ctx.solver).status == PASS


def test_pressure_check_outside_its_regime_is_flagged():
    ctx = CheckContext(solver_block(m=2.0), FBSDE, 0)
    result = run_check("thm6", ctx, solver=ctx.solver)
    assert result.status == REGIME_INVALID
    assert result.metrics["regime_valid"] is False


@pytest.mark.parametrize("check_id,m", [("thm1_case4", 2.0), ("thm1_case2", 0.5)])
def test_display_checks_outside_their_formula_domain_are_flagged(check_id, m):
    solver = solver_block(m=m)
    result = run_check(check_id, CheckContext(solver, FBSDE, 0), solver=solver)
    assert result.status == REGIME_INVALID
    assert result.series["bound"].isna().all()


def test_monte_carlo_checks_on_constant_field():
    solver = solver_block(initial={"kind": "constant", "c": 1.5})
    ctx = CheckContext(solver, FBSDE, 0)
    for check_id in ("bsde_residual", "submartingale_z2", "submartingale_m", "q_integral", "measure_consistency",
                     "flow_z", "remainders"):
        result = run_check(check_id, ctx, solver=solver, fbsde=FBSDE)
        assert result.status == PASS, check_id


def test_monte_carlo_frames_and_raw_dump():
    solver = solver_block()
    fbsde = {**FBSDE, "dump_raw": True}
    ctx = CheckContext(solver, fbsde, 0)
    result = run_check("submartingale_z2", ctx, solver=solver, fbsde=fbsde)
    assert set(result.frames) == {"summary", "raw_paths"}
    assert result.metrics["epsilon"] == pytest.approx(1.5)


def test_measure_consistency_on_solved_field():
    solver = solver_block()
    fbsde = {**FBSDE, "n_paths": 1000}
    result = run_check("measure_consistency", CheckContext(solver, fbsde, 2), solver=solver, fbsde=fbsde)
    assert result.metrics["unit_mean"]
    assert result.metrics["agree"]
    assert result.status == PASS


def test_measure_consistency_keeps_an_explicit_zero_epsilon():
    solver = solver_block()
    result = run_check("measure_consistency", CheckContext(solver, FBSDE, 2), solver=solver, fbsde=FBSDE,
                       epsilon=0.0)
    assert result.metrics["epsilon"] == 0.0
    assert result.metrics["density_mean"] == [1.0, 0.0]


@pytest.mark.parametrize("check_id,epsilon", [("submartingale_z2", 1.75), ("submartingale_m", 2.25)])
def test_submartingale_on_solved_field_with_default_epsilon(check_id, epsilon):
    solver = solver_block(m=1.5, points=64)
    fbsde = {**FBSDE, "T": 0.02, "n_paths": 2000}
    result = run_check(check_id, CheckContext(solver, fbsde, 7), solver=solver, fbsde=fbsde)
    assert result.metrics["epsilon"] == pytest.approx(epsilon)
    assert result.status == PASS
    assert result.metrics["violations"] == []


def test_reported_checks():
    solver = solver_block()
    ctx = CheckContext(solver, FBSDE, 0)
    z_eq = run_check("z_equation", ctx, solver=solver, fbsde=FBSDE)
    assert z_eq.status == REPORT
    bmo = run_check("bmo_probe", ctx, solver=solver, fbsde=FBSDE)
    assert bmo.status == REPORT
    assert bmo.series["mean"].iloc[-1] == 0.0
    sub = solver_block(m=0.5)
    assert run_check("z_equation", ctx, solver=sub, fbsde=FBSDE).status == REGIME_INVALID


def test_statuses_are_strings():
    assert {PASS, FAIL, REGIME_INVALID, REPORT} == {"pass", "fail", "regime_invalid", "report"}
    assert all(spec.description for spec in CATALOG.values())
