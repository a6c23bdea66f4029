"""
Finite-difference solver for the porous medium / fast diffusion equation
du/dt = Laplacian(u^m) on 1D and 2D rectangular grids.
Pure numerics; the only I/O is the history serialization at the bottom.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pandas as pd

from pme_lab.config import CFL_SAFETY, CSV_FLOAT_FORMAT, MIN_POINTS_PER_AXIS, POSITIVITY_FLOOR
from pme_lab.errors import GridError, PositivityError, RegimeError, StabilityError

logger = logging.getLogger(__name__)

PERIODIC = "periodic"
DIRICHLET = "dirichlet_oracle"

# oracle(t, *coords) -> exact u at those points
Oracle = Callable[..., np.ndarray]
# ghost(*coords) -> exact values of the differentiated field at those points
Ghost = Callable[..., np.ndarray]


@dataclass(frozen=True)
class GridSpec:
    dim: int
    extents: tuple[tuple[float, float], ...]
    points: tuple[int, ...]
    boundary: str = PERIODIC
    oracle: Optional[Oracle] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise GridError(f"Only 1D and 2D grids are supported, got dim={self.dim}")
        extents = tuple((float(a), float(b)) for a, b in self.extents)
        points = tuple(int(p) for p in self.points)
        if len(extents) != self.dim or len(points) != self.dim:
            raise GridError(f"Need {self.dim} extents and point counts, got {len(extents)} and {len(points)}")
        for (a, b), n in zip(extents, points):
            if not b > a:
                raise GridError(f"Empty extent [{a}, {b}]")
            if n < MIN_POINTS_PER_AXIS:
                raise GridError(f"Need at least {MIN_POINTS_PER_AXIS} points per axis, got {n}")
        if self.boundary not in (PERIODIC, DIRICHLET):
            raise GridError(f"Unknown boundary '{self.boundary}'")
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "points", points)

    @property
    def is_periodic(self) -> bool:
        return self.boundary == PERIODIC

    @property
    def spacings(self) -> tuple[float, ...]:
        # Periodic grids drop the right endpoint (identified with the left one);
        # Dirichlet grids keep both endpoints as unknowns.
        if self.is_periodic:
            return tuple((b - a) / n for (a, b), n in zip(self.extents, self.points))
        return tuple((b - a) / (n - 1) for (a, b), n in zip(self.extents, self.points))

    @property
    def h(self) -> float:
        return max(self.spacings)

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacings)

    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(a + h * np.arange(n) for (a, _), h, n in zip(self.extents, self.spacings, self.points))

    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*self.axes(), indexing="ij"))

    def padded_mesh(self) -> tuple[np.ndarray, ...]:
        """Grid coordinates with one ghost layer on every side."""
        axes = tuple(a + h * np.arange(-1, n + 1) for (a, _), h, n in zip(self.extents, self.spacings, self.points))
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def to_index(self, x: np.ndarray) -> np.ndarray:
        """Fractional grid indices of points x[..., dim]; returns shape (dim, ...)."""
        x = np.asarray(x, dtype=float)
        return np.stack([(x[..., i] - a) / h for i, ((a, _), h) in enumerate(zip(self.extents, self.spacings))])

    def inside(self, x: np.ndarray) -> np.ndarray:
        """Mask of points inside the domain. Periodic domains contain every point."""
        x = np.asarray(x, dtype=float)
        if self.is_periodic:
            return np.ones(x.shape[:-1], dtype=bool)
        mask = np.ones(x.shape[:-1], dtype=bool)
        for i, (a, b) in enumerate(self.extents):
            mask &= (x[..., i] >= a) & (x[..., i] <= b)
        return mask

    def nearest_node(self, x) -> tuple[int, ...]:
        idx = self.to_index(np.asarray(x, dtype=float).reshape(1, self.dim))[:, 0]
        return tuple(int(round(i)) % n if self.is_periodic else int(round(i)) for i, n in zip(idx, self.points))

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "extents": [list(e) for e in self.extents],
            "points": list(self.points),
            "boundary": self.boundary,
        }

    @staticmethod
    def from_dict(d: dict, oracle: Optional[Oracle] = None) -> "GridSpec":
        return GridSpec(
            dim=int(d["dim"]),
            extents=tuple(tuple(e) for e in d["extents"]),
            points=tuple(d["points"]),
            boundary=d.get("boundary", PERIODIC),
            oracle=oracle,
        )


@dataclass(frozen=True)
class TimeMesh:
    T: float
    dt: float
    steps: int

    def __post_init__(self):
        if not self.T > 0 or not self.dt > 0:
            raise GridError(f"Need T > 0 and dt > 0, got T={self.T}, dt={self.dt}")
        if self.steps < 1 or abs(self.dt * self.steps - self.T) > 1e-12 * self.T:
            raise GridError(f"dt={self.dt!r} does not divide T={self.T!r} into {self.steps} steps")

    @classmethod
    def from_steps(cls, T: float, steps: int) -> "TimeMesh":
        return cls(T=float(T), dt=float(T) / int(steps), steps=int(steps))

    @classmethod
    def from_dt(cls, T: float, dt: float) -> "TimeMesh":
        steps = int(round(T / dt))
        if steps < 1 or abs(steps * dt - T) > 1e-9 * T:
            raise GridError(f"dt={dt!r} does not divide T={T!r}")
        return cls.from_steps(T, steps)

    @classmethod
    def stable(cls, T: float, m: float, grid: GridSpec, *fields: np.ndarray,
               safety: float = CFL_SAFETY, multiple_of: int = 1) -> "TimeMesh":
        """Smallest step count whose dt respects the stability limit for every given field."""
        limit = min(stable_dt(f, m, grid) for f in fields)
        steps = math.ceil(T / (safety * limit))
        steps = multiple_of * math.ceil(steps / multiple_of)
        return cls.from_steps(T, steps)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def index_of(self, t: float) -> int:
        k = int(round(t / self.dt))
        if k < 0 or k > self.steps or abs(k * self.dt - t) > 1e-9 * self.dt + 1e-12 * self.T:
            raise GridError(f"t={t} is not on the time mesh (dt={self.dt})")
        return k

    def to_dict(self) -> dict:
        return {"T": self.T, "dt": self.dt, "steps": self.steps}


@dataclass
class ScalarFieldHistory:
    grid: GridSpec
    mesh: TimeMesh
    values: np.ndarray  # (steps + 1, *points)
    m: float
    u_min: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.mesh.steps + 1, *self.grid.points)
        if self.values.shape != expected:
            raise GridError(f"History shape {self.values.shape} does not match {expected}")
        if not np.all(np.isfinite(self.values)):
            raise PositivityError("History contains non-finite values")
        self.u_min = float(self.values.min())
        if self.u_min <= 0:
            raise PositivityError(f"History is not strictly positive (min={self.u_min})")

    @property
    def times(self) -> np.ndarray:
        return self.mesh.times

    def at(self, t: float) -> np.ndarray:
        return self.values[self.mesh.index_of(t)]

    def mass(self) -> np.ndarray:
        """Discrete mass sum(u) * h^dim of every slice."""
        flat = self.values.reshape(self.values.shape[0], -1)
        return flat.sum(axis=1) * self.grid.cell_volume

    def header(self) -> dict:
        return {**self.grid.to_dict(), **self.mesh.to_dict(), "m": self.m}

    # --- Serialization ---

    def to_csv(self, path) -> None:
        frame = pd.DataFrame(self.values.reshape(self.values.shape[0], -1))
        frame.columns = [f"v{i}" for i in range(frame.shape[1])]
        frame.insert(0, "t", self.times)
        frame.insert(0, "step", np.arange(self.values.shape[0]))
        with open(path, "w") as fh:
            for key, value in self.header().items():
                fh.write(f"# {key}={json.dumps(value)}\n")
            frame.to_csv(fh, index=False, float_format=CSV_FLOAT_FORMAT)

    @staticmethod
    def from_csv(path, oracle: Optional[Oracle] = None) -> "ScalarFieldHistory":
        header = {}
        with open(path) as fh:
            for line in fh:
                if not line.startswith("#"):
                    break
                key, _, value = line[1:].strip().partition("=")
                header[key] = json.loads(value)
        frame = pd.read_csv(path, comment="#", float_precision="round_trip")
        return _history_from_header(header, frame.drop(columns=["step", "t"]).to_numpy(), oracle)

    def to_npz(self, path) -> None:
        np.savez(path, values=self.values, header=json.dumps(self.header()))

    @staticmethod
    def from_npz(path, oracle: Optional[Oracle] = None) -> "ScalarFieldHistory":
        with np.load(path) as data:
            header = json.loads(str(data["header"]))
            values = data["values"]
        return _history_from_header(header, values, oracle)


def _history_from_header(header: dict, values: np.ndarray, oracle: Optional[Oracle]) -> ScalarFieldHistory:
    grid = GridSpec.from_dict(header, oracle=oracle)
    mesh = TimeMesh(T=float(header["T"]), dt=float(header["dt"]), steps=int(header["steps"]))
    return ScalarFieldHistory(
        grid=grid,
        mesh=mesh,
        values=np.asarray(values, dtype=float).reshape(mesh.steps + 1, *grid.points),
        m=float(header["m"]),
    )


# --- Stencils ---

def _as_field(field: np.ndarray, grid: GridSpec) -> np.ndarray:
    values = np.asarray(field, dtype=float)
    if values.ndim < grid.dim or values.shape[-grid.dim:] != grid.points:
        raise GridError(f"Field of shape {values.shape} does not live on grid {grid.points}")
    return values


def _spatial_axes(values: np.ndarray, grid: GridSpec) -> range:
    return range(values.ndim - grid.dim, values.ndim)


def _pad_with_ghosts(values: np.ndarray, grid: GridSpec, ghost: Optional[Ghost]) -> np.ndarray:
    if ghost is None:
        raise GridError("Dirichlet grid needs ghost values from an exact solution")
    if values.shape != grid.points:
        raise GridError("Ghost padding works on a single slice, not a batch of slices")
    shape = tuple(n + 2 for n in grid.points)
    padded = np.broadcast_to(np.asarray(ghost(*grid.padded_mesh()), dtype=float), shape).copy()
    padded[(slice(1, -1),) * grid.dim] = values
    return padded


def _shifted(padded: np.ndarray, axis: int, offset: int) -> np.ndarray:
    index = [slice(1, -1)] * padded.ndim
    index[axis] = slice(1 + offset, padded.shape[axis] - 1 + offset)
    return padded[tuple(index)]


def laplacian(field: np.ndarray, grid: GridSpec, ghost: Optional[Ghost] = None) -> np.ndarray:
    """
    Second-order central-difference Laplacian.
    Periodic grids wrap around and accept a batch of slices in leading axes;
    Dirichlet grids take the outside neighbours from `ghost`.
    """
    values = _as_field(field, grid)
    out = np.zeros_like(values)
    if grid.is_periodic:
        for axis, h in zip(_spatial_axes(values, grid), grid.spacings):
            out += (np.roll(values, -1, axis) - 2.0 * values + np.roll(values, 1, axis)) / h**2
        return out
    padded = _pad_with_ghosts(values, grid, ghost)
    for axis, h in enumerate(grid.spacings):
        out += (_shifted(padded, axis, 1) - 2.0 * values + _shifted(padded, axis, -1)) / h**2
    return out


def gradient(field: np.ndarray, grid: GridSpec, ghost: Optional[Ghost] = None) -> np.ndarray:
    """
    Central-difference gradient, one component per axis: shape (dim, *field.shape).
    On a Dirichlet grid without ghosts the edges fall back to second-order one-sided differences.
    """
    values = _as_field(field, grid)
    axes = _spatial_axes(values, grid)
    if grid.is_periodic:
        return np.stack([(np.roll(values, -1, ax) - np.roll(values, 1, ax)) / (2.0 * h)
                         for ax, h in zip(axes, grid.spacings)])
    if ghost is None:
        return np.stack([np.gradient(values, h, axis=ax, edge_order=2) for ax, h in zip(axes, grid.spacings)])
    padded = _pad_with_ghosts(values, grid, ghost)
    return np.stack([(_shifted(padded, ax, 1) - _shifted(padded, ax, -1)) / (2.0 * h)
                     for ax, h in enumerate(grid.spacings)])


def hessian(field: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Second derivatives, shape (dim, dim, *field.shape). Diagonal uses the 3-point stencil."""
    values = _as_field(field, grid)
    first = gradient(values, grid)
    out = np.empty((grid.dim, grid.dim, *values.shape))
    axes = list(_spatial_axes(values, grid))
    for i in range(grid.dim):
        for j in range(grid.dim):
            if i == j:
                continue
            out[i, j] = gradient(first[j], grid)[i]
    for i, (ax, h) in enumerate(zip(axes, grid.spacings)):
        if grid.is_periodic:
            out[i, i] = (np.roll(values, -1, ax) - 2.0 * values + np.roll(values, 1, ax)) / h**2
        else:
            diag = np.gradient(first[i], h, axis=ax, edge_order=2)
            inner = [slice(None)] * values.ndim
            inner[ax] = slice(1, -1)
            fwd, back = list(inner), list(inner)
            fwd[ax], back[ax] = slice(2, None), slice(None, -2)
            diag[tuple(inner)] = (values[tuple(fwd)] - 2.0 * values[tuple(inner)] + values[tuple(back)]) / h**2
            out[i, i] = diag
    return out


# --- Time stepping ---

def check_exponent(m: float) -> None:
    if not m > 0:
        raise RegimeError(f"Exponent m must be positive, got {m}")


def stable_dt(u: np.ndarray, m: float, grid: GridSpec) -> float:
    """
    Frozen-coefficient stability limit of the explicit scheme:
    1 / (2 max(m u^(m-1)) sum 1/h_i^2), i.e. h^2 / (2 dim m u^(m-1)) on square grids.
    """
    check_exponent(m)
    diffusivity = float(np.max(m * np.asarray(u, dtype=float) ** (m - 1.0)))
    return 1.0 / (2.0 * diffusivity * sum(1.0 / h**2 for h in grid.spacings))


def step_pme(u: np.ndarray, m: float, dt: float, grid: GridSpec, t: float = 0.0) -> np.ndarray:
    """One explicit Euler step u + dt * Laplacian(u^m). Dirichlet ghosts come from the grid oracle at time t."""
    check_exponent(m)
    values = _as_field(u, grid)
    if values.shape != grid.points:
        raise GridError(f"step_pme expects a single slice of shape {grid.points}")
    if values.min() <= 0:
        raise PositivityError(f"Input field is not strictly positive (min={values.min():.3e})")
    limit = stable_dt(values, m, grid)
    if dt > limit * (1.0 + 1e-9):
        raise StabilityError(f"dt={dt:.3e} exceeds the stability limit {limit:.3e}")

    ghost = None
    if not grid.is_periodic:
        if grid.oracle is None:
            raise GridError("Dirichlet grid has no oracle to supply ghost values")
        ghost = lambda *x: np.asarray(grid.oracle(t, *x), dtype=float) ** m

    new = values + dt * laplacian(values**m, grid, ghost)
    if not np.all(np.isfinite(new)) or new.min() <= 0:
        raise PositivityError(f"Positivity lost at t={t + dt:.6g}; dt too large or regime breakdown")
    return new


def solve(u0: np.ndarray, m: float, mesh: TimeMesh, grid: GridSpec) -> ScalarFieldHistory:
    """March u0 over the mesh; aborts when min u falls below POSITIVITY_FLOOR * min u0."""
    check_exponent(m)
    u = _as_field(u0, grid).copy()
    if u.shape != grid.points:
        raise GridError(f"Initial data must have shape {grid.points}, got {u.shape}")
    if u.min() <= 0:
        raise PositivityError(f"Initial data is not strictly positive (min={u.min():.3e})")

    floor = POSITIVITY_FLOOR * float(u.min())
    values = np.empty((mesh.steps + 1, *grid.points))
    values[0] = u

    logger.info(f"Solving PME m={m} on {grid.points} ({grid.boundary}), {mesh.steps} steps of dt={mesh.dt:.3e}")
    for k in range(mesh.steps):
        u = step_pme(u, m, mesh.dt, grid, t=k * mesh.dt)
        if u.min() < floor:
            raise PositivityError(f"min u = {u.min():.3e} fell below the floor {floor:.3e} at step {k + 1}")
        values[k + 1] = u
    logger.debug(f"Solve finished: min={values.min():.6g}, max={values.max():.6g}")

    return ScalarFieldHistory(grid=grid, mesh=mesh, values=values, m=float(m))
