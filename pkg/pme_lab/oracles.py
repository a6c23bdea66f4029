"""
Exact solutions and initial data for the solver: constants, traveling waves,
Barenblatt profiles (porous medium and fast diffusion) and sine data.
Oracles are callables u(t, *coords) and double as Dirichlet ghost sources.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from pme_lab.grid_pde import GridSpec
from pme_lab.errors import RegimeError


@dataclass(frozen=True)
class ConstantSolution:
    c: float

    def __call__(self, t, *coords) -> np.ndarray:
        return np.full(np.shape(coords[0]), float(self.c))


@dataclass(frozen=True)
class TravelingWave:
    """u = ((m-1) c (c t - x) / m)^(1/(m-1)); the pressure m/(m-1) u^(m-1) is linear in x and t."""
    m: float
    c: float = 1.0

    def __post_init__(self):
        if not self.m > 1 or not self.c > 0:
            raise RegimeError(f"Traveling wave needs m > 1 and c > 0, got m={self.m}, c={self.c}")

    def __call__(self, t, *coords) -> np.ndarray:
        x = np.asarray(coords[0], dtype=float)
        base = (self.m - 1.0) * self.c * (self.c * t - x) / self.m
        return np.maximum(base, 0.0) ** (1.0 / (self.m - 1.0))

    def right_edge(self, margin: float) -> float:
        """Largest x with u(0, x) >= margin; u grows in t, so the bound holds on [0, T]."""
        return -self.m * margin ** (self.m - 1.0) / ((self.m - 1.0) * self.c)

    def extent(self, margin: float, length: float) -> tuple[float, float]:
        b = self.right_edge(margin)
        return (b - length, b)


@dataclass(frozen=True)
class Barenblatt:
    """
    Source-type self-similar solution evaluated at t + t0.
    m > 1: tau^-a (C - k r^2 tau^(-2a/n))_+^(1/(m-1)); (n-2)/n < m < 1: tau^-a (C + k r^2 tau^(-2a/n))^(-1/(1-m)).
    """
    m: float
    n: int
    C: float = 1.0
    t0: float = 1.0

    def __post_init__(self):
        if self.m == 1 or not self.m > 0:
            raise RegimeError(f"Barenblatt profile needs m > 0, m != 1, got m={self.m}")
        if self.n * (self.m - 1.0) + 2.0 <= 0:
            raise RegimeError(f"Fast-diffusion Barenblatt needs m > (n-2)/n, got m={self.m}, n={self.n}")

    @property
    def a(self) -> float:
        return self.n / (self.n * (self.m - 1.0) + 2.0)

    @property
    def k(self) -> float:
        return self.a * abs(self.m - 1.0) / (2.0 * self.m * self.n)

    def profile(self, tau, r2) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)
        scaled = self.k * np.asarray(r2, dtype=float) * tau ** (-2.0 * self.a / self.n)
        if self.m > 1:
            return tau ** (-self.a) * np.maximum(self.C - scaled, 0.0) ** (1.0 / (self.m - 1.0))
        return tau ** (-self.a) * (self.C + scaled) ** (-1.0 / (1.0 - self.m))

    def __call__(self, t, *coords) -> np.ndarray:
        r2 = sum(np.asarray(x, dtype=float) ** 2 for x in coords)
        return self.profile(t + self.t0, r2)

    def half_width(self, T: float, margin: float) -> float:
        """Half side of the centred box on which u >= margin for every t in [0, T]."""
        taus = np.linspace(self.t0, self.t0 + T, 65)

        def excess(r):
            return float(self.profile(taus, r * r).min()) - margin

        if excess(0.0) <= 0:
            raise RegimeError(f"Barenblatt profile never exceeds {margin} on [0, {T}]")
        if self.m > 1:
            upper = math.sqrt(self.C * self.t0 ** (2.0 * self.a / self.n) / self.k)
        else:
            upper = 1.0
            while excess(upper) > 0:
                upper *= 2.0
        radius = brentq(excess, 0.0, upper, xtol=1e-12)
        return radius / math.sqrt(self.n)

    def extents(self, T: float, margin: float) -> tuple[tuple[float, float], ...]:
        w = self.half_width(T, margin)
        return tuple((-w, w) for _ in range(self.n))


def sine_data(grid: GridSpec, amplitude: float, base: float = 1.0) -> np.ndarray:
    """base + amplitude * prod_i sin(2 pi (x_i - a_i) / L_i)."""
    wave = np.ones(grid.points)
    for x, (a, b) in zip(grid.mesh(), grid.extents):
        wave = wave * np.sin(2.0 * np.pi * (x - a) / (b - a))
    return base + amplitude * wave
