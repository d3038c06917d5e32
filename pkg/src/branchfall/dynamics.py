"""Caldeira-Leggett evolution: Strang-split unitary steps plus exact dephasing.

The generator is d rho/dt = -i [H, rho] - Lambda [X, [X, rho]] with
H = P^2/2M + V(X) and hbar = 1 (momentum diffusion only, no friction).
Each step composes a half dephasing, a full Strang unitary, and another half
dephasing.  The dephasing factor exp(-Lambda (x - x')^2 dt) is applied
elementwise, which is both exact for its generator and a Schur product with
a positive kernel, so positivity is preserved exactly; the unitary piece is
a congruence, so the whole step is completely positive up to roundoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BoundaryViolation, ExplosionGuard
from .qstate import DensityMatrix, GridSpec, WaveFunction

__all__ = [
    "Potential",
    "free_potential",
    "harmonic_potential",
    "double_well_potential",
    "Propagator",
    "EvolutionRecord",
    "unitary_step",
    "cl_step",
    "evolve",
]


@dataclass(frozen=True)
class Potential:
    """External potential V(x) with an optional analytic derivative.

    When dv is omitted, derivative values come from a 5-point centered
    stencil evaluated off-grid (exact for polynomials through degree 4).
    """

    v: Callable[[np.ndarray], np.ndarray]
    dv: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"

    def values(self, grid: GridSpec) -> np.ndarray:
        return np.asarray(self.v(grid.x), dtype=float)

    def derivative_values(self, grid: GridSpec) -> np.ndarray:
        if self.dv is not None:
            return np.asarray(self.dv(grid.x), dtype=float)
        x, h = grid.x, grid.dx
        return (
            -self.v(x + 2 * h) + 8 * self.v(x + h) - 8 * self.v(x - h) + self.v(x - 2 * h)
        ) / (12 * h)

    def slope(self, x, h: float = 1e-4):
        """V'(x) at arbitrary points (same stencil when dv is missing)."""
        x = np.asarray(x, dtype=float)
        if self.dv is not None:
            return self.dv(x)
        return (
            -self.v(x + 2 * h) + 8 * self.v(x + h) - 8 * self.v(x - h) + self.v(x - 2 * h)
        ) / (12 * h)


def free_potential() -> Potential:
    return Potential(v=lambda x: np.zeros_like(x), dv=lambda x: np.zeros_like(x), name="free")


def harmonic_potential(mass: float, omega: float) -> Potential:
    """V(x) = M omega^2 x^2 / 2."""
    k = mass * omega * omega
    return Potential(v=lambda x: 0.5 * k * x * x, dv=lambda x: k * x, name="harmonic")


def double_well_potential(barrier: float, half_separation: float) -> Potential:
    """V(x) = a (x^2 - b^2)^2 with minima at +/-b and V(0) = a b^4."""
    a, b = barrier, half_separation
    return Potential(
        v=lambda x: a * (x * x - b * b) ** 2,
        dv=lambda x: 4 * a * x * (x * x - b * b),
        name="double_well",
    )


class Propagator:
    """Precomputed one-step map for a fixed (grid, potential, lambda_rate, dt).

    The Strang unitary U = K(dt/2) V(dt) K(dt/2) is materialized as a dense
    matrix once (spectral kinetic factor), so stepping a density matrix is
    two matrix products plus two elementwise dephasing multiplies.
    """

    def __init__(
        self,
        grid: GridSpec,
        potential: Potential,
        lambda_rate: float,
        dt: float,
    ):
        if dt == 0 or (dt < 0 and lambda_rate > 0):
            raise ValueError("dt must be positive (reversal only without dephasing)")
        if lambda_rate < 0:
            raise ValueError("lambda_rate must be nonnegative")
        self.grid = grid
        self.potential = potential
        self.lambda_rate = lambda_rate
        self.dt = dt

        kin_half = np.exp(-1j * grid.p**2 / (2.0 * grid.mass) * (dt / 2.0))
        pot_full = np.exp(-1j * potential.values(grid) * dt)

        def apply_kin(mat):
            return np.fft.ifft(kin_half[:, None] * np.fft.fft(mat, axis=0), axis=0)

        self.u = apply_kin(pot_full[:, None] * apply_kin(np.eye(grid.n_points)))
        self.u_dag = self.u.conj().T

        if lambda_rate > 0:
            diff = grid.x[:, None] - grid.x[None, :]
            self.dephase_half = np.exp(-lambda_rate * diff * diff * (dt / 2.0))
        else:
            self.dephase_half = None

    def step_elements(self, elements: np.ndarray) -> np.ndarray:
        """One full step on a raw density kernel; re-symmetrized on exit."""
        if self.dephase_half is not None:
            elements = self.dephase_half * elements
        elements = (self.u @ elements) @ self.u_dag
        if self.dephase_half is not None:
            elements = self.dephase_half * elements
        return 0.5 * (elements + elements.conj().T)

    def step_wave(self, amplitudes: np.ndarray) -> np.ndarray:
        """One unitary step on pure-state amplitudes (dephasing needs a kernel)."""
        return self.u @ amplitudes


def unitary_step(state, potential: Potential, dt: float):
    """Single Strang step of the closed-system dynamics (Lambda = 0)."""
    prop = Propagator(state.grid, potential, 0.0, dt)
    if isinstance(state, WaveFunction):
        return WaveFunction(state.grid, prop.step_wave(state.amplitudes), validate=False)
    if isinstance(state, DensityMatrix):
        return DensityMatrix(state.grid, prop.step_elements(state.elements), validate=False)
    raise TypeError(f"unsupported state type {type(state).__name__}")


def cl_step(
    rho: DensityMatrix, potential: Potential, lambda_rate: float, dt: float
) -> DensityMatrix:
    """Single open-system step; prefer Propagator/evolve for long runs."""
    prop = Propagator(rho.grid, potential, lambda_rate, dt)
    return DensityMatrix(rho.grid, prop.step_elements(rho.elements), validate=False)


@dataclass
class EvolutionRecord:
    """Time series of low-order diagnostics plus the final state.

    All arrays share the length of times.  mean_dvdx is <V'(X)>, recorded so
    force-law residuals can be formed without storing state snapshots.
    """

    times: np.ndarray
    mean_x: np.ndarray
    mean_p: np.ndarray
    var_x: np.ndarray
    var_p: np.ndarray
    s_lin: np.ndarray
    purity: np.ndarray
    mean_dvdx: np.ndarray
    final: DensityMatrix
    dt: float
    lambda_rate: float
    field_names = ("t", "mean_x", "mean_p", "var_x", "var_p", "s_lin", "purity")

    def as_columns(self) -> dict:
        """Column dict in CSV order (diagnostic extras excluded)."""
        return {
            "t": self.times,
            "mean_x": self.mean_x,
            "mean_p": self.mean_p,
            "var_x": self.var_x,
            "var_p": self.var_p,
            "s_lin": self.s_lin,
            "purity": self.purity,
        }


def _moment_row(elements: np.ndarray, grid: GridSpec, dv_vals: np.ndarray):
    dx = grid.dx
    dens = np.real(np.diag(elements))
    mean_x = float(np.sum(grid.x * dens) * dx)
    mean_x2 = float(np.sum(grid.x**2 * dens) * dx)
    mom = np.real(np.diag(np.fft.ifft(np.fft.fft(elements, axis=0), axis=1))) * dx
    mean_p = float(np.sum(grid.p * mom))
    mean_p2 = float(np.sum(grid.p**2 * mom))
    purity = float(np.sum(np.abs(elements) ** 2) * dx * dx)
    mean_dv = float(np.sum(dv_vals * dens) * dx)
    trace = float(np.sum(dens) * dx)
    edge = float((dens[0] + dens[1] + dens[-2] + dens[-1]) * dx)
    return mean_x, mean_p, mean_x2, mean_p2, purity, mean_dv, trace, edge


def evolve(
    rho: DensityMatrix,
    potential: Potential,
    lambda_rate: float,
    dt: float,
    n_steps: int,
    record_every: int = 1,
    boundary_tol: float = 1e-8,
) -> EvolutionRecord:
    """Evolve rho for n_steps and record diagnostics every record_every steps.

    The t = 0 row and the final row are always recorded.  Raises
    ExplosionGuard on non-finite values or trace drift beyond 1e-6, and
    BoundaryViolation once more than boundary_tol of the mass sits in the
    outermost two grid cells on either side.
    """
    if n_steps < 1 or record_every < 1:
        raise ValueError("n_steps and record_every must be >= 1")
    grid = rho.grid
    prop = Propagator(grid, potential, lambda_rate, dt)
    dv_vals = potential.derivative_values(grid)

    rows = []
    times = []

    def record(k: int, elements: np.ndarray):
        mx, mp, mx2, mp2, pur, mdv, trace, edge = _moment_row(elements, grid, dv_vals)
        if not (math.isfinite(trace) and math.isfinite(mx2) and math.isfinite(mp2)):
            raise ExplosionGuard(f"non-finite moments at t = {k * dt:.6g}")
        if abs(trace - 1.0) > 1e-6:
            raise ExplosionGuard(f"trace drifted to {trace!r} at t = {k * dt:.6g}")
        if edge > boundary_tol:
            raise BoundaryViolation(
                f"mass {edge:.3e} within two cells of the window edge at t = {k * dt:.6g}"
            )
        times.append(k * dt)
        rows.append((mx, mp, mx2, mp2, pur, mdv))

    elements = rho.elements.copy()
    record(0, elements)
    for k in range(1, n_steps + 1):
        elements = prop.step_elements(elements)
        if k % record_every == 0 or k == n_steps:
            record(k, elements)

    t = np.asarray(times)
    mx, mp, mx2, mp2, pur, mdv = (np.asarray(col) for col in zip(*rows))
    return EvolutionRecord(
        times=t,
        mean_x=mx,
        mean_p=mp,
        var_x=np.maximum(mx2 - mx * mx, 0.0),
        var_p=np.maximum(mp2 - mp * mp, 0.0),
        s_lin=1.0 - pur,
        purity=pur,
        mean_dvdx=mdv,
        final=DensityMatrix(grid, elements, validate=False),
        dt=dt,
        lambda_rate=lambda_rate,
    )
