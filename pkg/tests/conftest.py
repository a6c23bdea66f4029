import numpy as np
import pytest

from pme_lab.fbsde import DENSITY_WEIGHTS, SimParams, evaluate_yz, girsanov_weights, simulate_forward, simulate_tangent
from pme_lab.grid_pde import GridSpec, TimeMesh, solve
from pme_lab.oracles import ConstantSolution, sine_data
from pme_lab.transform import regime_of, to_pressure


def periodic_grid(dim: int, points: int) -> GridSpec:
    return GridSpec(dim, ((0.0, 1.0),) * dim, (points,) * dim)


def sine_history(m: float, dim: int, points: int, T: float, amplitude: float = 0.3):
    grid = periodic_grid(dim, points)
    u0 = sine_data(grid, amplitude)
    return solve(u0, m, TimeMesh.stable(T, m, grid, u0), grid)


def constant_history(m: float, c: float, points: int, T: float):
    grid = periodic_grid(1, points)
    u0 = ConstantSolution(c)(0.0, *grid.mesh())
    return solve(u0, m, TimeMesh.stable(T, m, grid, u0), grid)


def make_ensemble(history, n_paths=300, T=0.01, dt=1e-3, epsilon=0.0, tilt_mode=DENSITY_WEIGHTS, seed=11,
                  tangent=False, x0=(0.5,)):
    field = to_pressure(history, history.m)
    params = SimParams(m=history.m, regime=regime_of(history.m), epsilon=epsilon, T=T, dt=dt,
                       n_paths=n_paths, seed=seed, tilt_mode=tilt_mode)
    paths = evaluate_yz(simulate_forward(field, params, np.array(x0)), field)
    if tilt_mode == DENSITY_WEIGHTS and epsilon != 0:
        girsanov_weights(paths, epsilon)
    if tangent:
        simulate_tangent(paths, field)
    return paths


@pytest.fixture(scope="session")
def history_m2():
    return sine_history(2.0, 1, 64, 0.02)


@pytest.fixture(scope="session")
def history_m05():
    return sine_history(0.5, 1, 64, 0.02)


@pytest.fixture(scope="session")
def history_m15():
    return sine_history(1.5, 1, 64, 0.1)


@pytest.fixture(scope="session")
def history_const():
    return constant_history(2.0, 1.5, 32, 0.02)


@pytest.fixture(scope="session")
def tangent_paths_m2(history_m2):
    return make_ensemble(history_m2, n_paths=200, tangent=True)


@pytest.fixture(scope="session")
def tangent_paths_m05(history_m05):
    return make_ensemble(history_m05, n_paths=200, tangent=True)
