"""The five benchmark configurations: coefficients, data, exact solutions.

All live on the unit square with homogeneous Dirichlet conditions and the
cubic focusing-sign nonlinearity. Example 1 has the closed-form solution
u = (1/10) sin(pi x) sin(pi y) e^{-it}; its potential is tuned so the
equation balances identically. The others pair rough or multiscale
coefficients with the same scheme and are judged against fine reference
runs.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .fem import CoefficientField
from .timestepping import Nonlinearity

__all__ = ["ProblemSpec", "configure_example", "checkerboard_field", "splitmix64_stream"]


@dataclass
class ProblemSpec:
    example_id: int
    b: Optional[CoefficientField]  # None means unit diffusion
    V: Optional[CoefficientField]
    u0: Callable
    u1: Callable
    nonlinearity: Nonlinearity
    T: float = 1.0
    exact: Optional[Callable] = None        # (x, y, t) -> complex
    exact_grad: Optional[Callable] = None   # (x, y, t) -> (du/dx, du/dy)
    reference_h: int = 64
    reference_tau: float = 1e-2
    seed: int = 0
    center_domain: bool = False
    label: str = ""
    meta: dict = field(default_factory=dict)


def splitmix64_stream(seed, count):
    """Deterministic 64-bit stream; the standard shift-xor-multiply mixer."""
    mask = (1 << 64) - 1
    s = int(seed) & mask
    out = np.empty(count, dtype=np.uint64)
    for i in range(count):
        s = (s + 0x9E3779B97F4A7C15) & mask
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out[i] = z ^ (z >> 31)
    return out


def checkerboard_field(seed=0, n_cells=128, low=0.05, high=20.0):
    """Random checkerboard on a uniform cell grid, half-open cell membership.

    Cells are visited row-major (y-row outer, x fastest); each draws one
    64-bit word and takes `low` when the top bit is set, else `high`.
    """
    words = splitmix64_stream(seed, n_cells * n_cells)
    vals = np.where((words >> np.uint64(63)).astype(bool), low, high)
    table = vals.reshape(n_cells, n_cells)  # [iy, ix]

    def fn(x, y):
        ix = np.clip((np.asarray(x) * n_cells).astype(int), 0, n_cells - 1)
        iy = np.clip((np.asarray(y) * n_cells).astype(int), 0, n_cells - 1)
        return table[iy, ix]

    return CoefficientField(fn, kind="random-checkerboard",
                            bounds=(min(low, high), max(low, high)),
                            seed=int(seed), cell_size=1.0 / n_cells,
                            low=low, high=high)


def _sinsin(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def _smooth_potential():
    def fn(x, y):
        return -2 * np.pi**2 - 0.01 * np.sin(np.pi * x) ** 2 * np.sin(np.pi * y) ** 2
    return CoefficientField(fn, kind="smooth",
                            bounds=(-2 * np.pi**2 - 0.01, -2 * np.pi**2))


def _quartic_diffusion():
    def fn(x, y):
        return ((2.8 + x**2) * (2.8 + y**2)) ** 2
    return CoefficientField(fn, kind="smooth", bounds=(2.8**4, (3.8 * 3.8) ** 2))


def _two_scale_potential():
    e1, e2 = 1.0 / 8.0, 1.0 / 16.0

    def fn(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        v1 = np.abs(x - 0.5) ** 2 + np.abs(y - 0.5) ** 2
        e = np.where((x < 0.5) & (y < 0.5), e1, e2)
        v2 = (0.01 + np.cos(2 * np.pi * x / e)) * (0.01 + np.cos(2 * np.pi * y / e))
        return v1 + v2

    return CoefficientField(fn, kind="piecewise-on-grid", cell_size=0.5)


def _shifted_harmonic_potential(center_domain):
    def fn(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if center_domain:
            xs, ys = x - 0.5, y - 0.5
            return 0.1 * (xs**2 + ys**2) + 1.8 * (xs >= 0.0)
        # on the unit square the x >= 0 branch holds everywhere
        return 0.1 * (x**2 + y**2) + 1.8

    return CoefficientField(fn, kind="smooth" if not center_domain else "piecewise-on-grid",
                            cell_size=0.5 if center_domain else None)


def _multiscale_diffusion():
    e1, e2, e3, e4, e5 = 1 / 5, 1 / 13, 1 / 17, 1 / 31, 1 / 65
    tp = 2 * np.pi

    def fn(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        total = (3 + np.sin(tp * x / e1)) / (3 + np.sin(tp * y / e1)) \
            + (3 + np.sin(tp * y / e2)) / (3 + np.cos(tp * x / e2)) \
            + (3 + np.cos(tp * x / e3)) / (3 + np.sin(tp * y / e3)) \
            + (3 + np.sin(tp * x / e4)) / (3 + np.cos(tp * y / e4)) \
            + (3 + np.cos(tp * x / e5)) / (3 + np.sin(tp * y / e5)) \
            + np.sin(4 * x**2 * y**2) + 1
        return total / 6.0

    return CoefficientField(fn, kind="smooth", bounds=(0.3, 2.1))


def configure_example(example_id, seed=0, center_domain=False):
    """Coefficients, initial data and reference settings for examples 1..5."""
    nl = Nonlinearity(p=3, sign=1)
    small = lambda x, y: 0.1 * _sinsin(x, y)
    small_t = lambda x, y: -0.1j * _sinsin(x, y)

    if example_id == 1:
        def exact(x, y, t):
            return 0.1 * _sinsin(x, y) * np.exp(-1j * t)

        def exact_grad(x, y, t):
            ph = 0.1 * np.exp(-1j * t)
            gx = ph * np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)
            gy = ph * np.pi * np.sin(np.pi * x) * np.cos(np.pi * y)
            return gx, gy

        return ProblemSpec(1, None, _smooth_potential(), small, small_t, nl,
                           exact=exact, exact_grad=exact_grad,
                           label="constant diffusion, tuned smooth potential")
    if example_id == 2:
        return ProblemSpec(2, _quartic_diffusion(), _smooth_potential(),
                           small, small_t, nl,
                           label="quartic diffusion, smooth potential")
    if example_id == 3:
        big = lambda x, y: 0.4 * _sinsin(x, y)
        big_t = lambda x, y: -0.8j * np.pi * _sinsin(x, y)
        return ProblemSpec(3, None, _two_scale_potential(), big, big_t, nl,
                           label="two-scale oscillatory potential")
    if example_id == 4:
        return ProblemSpec(4, _quartic_diffusion(),
                           _shifted_harmonic_potential(center_domain),
                           small, small_t, nl, center_domain=center_domain,
                           label="shifted harmonic potential")
    if example_id == 5:
        V = checkerboard_field(seed=seed, n_cells=128, low=0.05, high=20.0)
        return ProblemSpec(5, _multiscale_diffusion(), V, small, small_t, nl,
                           reference_h=128, seed=seed,
                           label="multiscale diffusion, random checkerboard potential")
    raise ValueError(f"unknown example id: {example_id}")
