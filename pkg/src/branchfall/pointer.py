"""Phase-space partitions, coherent-state window POVMs, predictability sieve.

A partition tiles a rectangle of phase space with cells mu_alpha; each cell
gets the positive operator Pi_alpha = (1/2pi) int_cell |Z><Z| dQ dP built by
per-cell quadrature over coherent states of width sigma_x.  The remainder
Pi_rest = I - sum Pi_alpha is kept as the exact subtraction so completeness
is an identity; it is positive up to quadrature error only (the continuum
remainder integral is an operator <= I).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from .dynamics import Potential, evolve
from .errors import PositivityError, WindowTooSmall
from .qstate import DensityMatrix, GridSpec, PhasePoint, coherent_state

__all__ = [
    "PhasePartition",
    "POVMSet",
    "SieveResult",
    "build_povm",
    "pvm_quality",
    "predictability_sieve",
]


@dataclass(frozen=True)
class PhasePartition:
    """Rectangular window tiled by n_x * n_p equal cells.

    Cell (i, j) covers [q_i, q_{i+1}] x [p_j, p_{j+1}] and carries the flat
    index alpha = i * n_p + j.  Cell volume d_x * d_p may not drop below 1
    (a coherent-state cell has volume 2 pi sigma_x sigma_p = pi).
    """

    x_window: tuple[float, float]
    p_window: tuple[float, float]
    n_x: int
    n_p: int

    def __post_init__(self) -> None:
        if self.x_window[1] <= self.x_window[0] or self.p_window[1] <= self.p_window[0]:
            raise ValueError("windows must be ordered (lo, hi)")
        if self.n_x < 1 or self.n_p < 1:
            raise ValueError("need at least one cell per axis")
        if self.d_x * self.d_p < 1.0 - 1e-9:
            raise ValueError(
                f"cell volume {self.d_x * self.d_p:.4g} below the floor of 1"
            )

    @property
    def d_x(self) -> float:
        return (self.x_window[1] - self.x_window[0]) / self.n_x

    @property
    def d_p(self) -> float:
        return (self.p_window[1] - self.p_window[0]) / self.n_p

    @property
    def n_cells(self) -> int:
        return self.n_x * self.n_p

    def index(self, i: int, j: int) -> int:
        return i * self.n_p + j

    def ij(self, alpha: int) -> tuple[int, int]:
        return divmod(alpha, self.n_p)

    def cell_bounds(self, alpha: int) -> tuple[float, float, float, float]:
        i, j = self.ij(alpha)
        return (
            self.x_window[0] + i * self.d_x,
            self.x_window[0] + (i + 1) * self.d_x,
            self.p_window[0] + j * self.d_p,
            self.p_window[0] + (j + 1) * self.d_p,
        )

    def cell_center(self, alpha: int) -> PhasePoint:
        q1, q2, p1, p2 = self.cell_bounds(alpha)
        return PhasePoint(0.5 * (q1 + q2), 0.5 * (p1 + p2))

    def locate(self, q: float, p: float) -> int | None:
        """Flat index of the cell containing (q, p), or None outside the window."""
        i = math.floor((q - self.x_window[0]) / self.d_x)
        j = math.floor((p - self.p_window[0]) / self.d_p)
        if 0 <= i < self.n_x and 0 <= j < self.n_p:
            return self.index(i, j)
        return None

    def adjacent(self, alpha: int, beta: int) -> bool:
        """True when cells share an edge or a corner (or are equal)."""
        ia, ja = self.ij(alpha)
        ib, jb = self.ij(beta)
        return max(abs(ia - ib), abs(ja - jb)) <= 1

    def shifted(self, dq: float, dp: float) -> "PhasePartition":
        return PhasePartition(
            (self.x_window[0] + dq, self.x_window[1] + dq),
            (self.p_window[0] + dp, self.p_window[1] + dp),
            self.n_x,
            self.n_p,
        )


def _packet(grid: GridSpec, q: float, p: float, sigma_x: float) -> np.ndarray:
    """Discretely normalized Gaussian; no containment guard (quadrature nodes
    may sit near the window edge, where the escape element absorbs the loss)."""
    psi = np.exp(-((grid.x - q) ** 2) / (4.0 * sigma_x**2)) * np.exp(1j * p * grid.x)
    nrm = math.sqrt(np.sum(np.abs(psi) ** 2) * grid.dx)
    if nrm <= 0:
        raise ValueError(f"packet at ({q}, {p}) has no support on the grid")
    return psi / nrm


def _axis_nodes(lo: float, hi: float, n: int, rule: str):
    if rule == "midpoint":
        w = (hi - lo) / n
        return lo + (np.arange(n) + 0.5) * w, np.full(n, w)
    if rule == "gauss":
        nodes, weights = np.polynomial.legendre.leggauss(n)
        half = 0.5 * (hi - lo)
        return 0.5 * (hi + lo) + half * nodes, half * weights
    raise ValueError(f"unknown quadrature rule {rule!r}")


@dataclass
class POVMSet:
    """Immutable bundle of cell operators, the exact remainder, and metadata.

    operators[alpha] acts by plain matrix multiplication (one dx factor is
    absorbed), so Tr(Pi rho) = sum(Pi * rho.T) * dx and the identity is eye.
    """

    grid: GridSpec
    partition: PhasePartition
    sigma_x: float
    operators: np.ndarray
    rest: np.ndarray
    rule: str
    quadrature: tuple[int, int]

    @cached_property
    def squares(self) -> np.ndarray:
        """Pi_alpha^2 for repeated-application weights; built on first use."""
        return np.einsum("aij,ajk->aik", self.operators, self.operators)

    def trace_product(self, op: np.ndarray, rho: DensityMatrix) -> float:
        return float(np.sum(op * rho.elements.T).real * self.grid.dx)

    def probabilities(self, rho: DensityMatrix) -> tuple[np.ndarray, float]:
        """(Tr(Pi_alpha rho) per cell, Tr(Pi_rest rho)); tiny negatives clipped.

        Raises PositivityError when any weight drops below -1e-10, which
        signals a corrupted state rather than roundoff.
        """
        probs = (
            np.einsum("aij,ji->a", self.operators, rho.elements).real * self.grid.dx
        )
        escape = self.trace_product(self.rest, rho)
        low = min(probs.min(), escape)
        if low < -1e-10:
            raise PositivityError(f"cell weight {low:.3e} below -1e-10")
        return np.clip(probs, 0.0, None), max(escape, 0.0)

    def project(self, elements: np.ndarray, alpha: int) -> np.ndarray:
        """Raw (unnormalized) update Pi_alpha rho Pi_alpha on kernel elements."""
        pi = self.operators[alpha]
        return (pi @ elements) @ pi


def build_povm(
    grid: GridSpec,
    partition: PhasePartition,
    sigma_x: float,
    quadrature: tuple[int, int] | None = None,
    rule: str = "gauss",
) -> POVMSet:
    """Assemble one positive operator per cell plus the exact remainder.

    quadrature = (n_q, n_p) subsample counts per cell, each at least 2;
    None (the default) scales the counts with the cell size in coherent
    units, which keeps Gauss-Legendre at analytic-integral accuracy from
    2-sigma cells up to one cell covering the whole window.  Midpoint is
    supported as a cheaper, coarser alternative.  Raises WindowTooSmall
    when the remainder acts at more than 0.1 (operator norm) on a probe
    coherent state parked at the window center.
    """
    if sigma_x <= 0:
        raise ValueError("sigma_x must be positive")
    if sigma_x < 2.0 * grid.dx:
        raise ValueError(f"sigma_x = {sigma_x:.4g} under-resolved: dx = {grid.dx:.4g}")
    if quadrature is None:
        # ~1.7 nodes per coherent width resolves the oscillatory P factor
        sigma_p = 0.5 / sigma_x
        nq = min(48, math.ceil(1.7 * partition.d_x / sigma_x) + 3)
        npp = min(48, math.ceil(1.7 * partition.d_p / sigma_p) + 3)
    else:
        nq, npp = quadrature
    if nq < 2 or npp < 2:
        raise ValueError("quadrature must be at least (2, 2)")
    if partition.x_window[0] < grid.x_min or partition.x_window[1] > grid.x_max:
        raise ValueError("partition x_window must lie inside the grid window")
    if max(abs(partition.p_window[0]), abs(partition.p_window[1])) > grid.p_max:
        raise ValueError("partition p_window exceeds the momentum grid")

    n = grid.n_points
    ops = np.empty((partition.n_cells, n, n), dtype=np.complex128)
    for alpha in range(partition.n_cells):
        q1, q2, p1, p2 = partition.cell_bounds(alpha)
        qn, qw = _axis_nodes(q1, q2, nq, rule)
        pn, pw = _axis_nodes(p1, p2, npp, rule)
        # stack the quadrature-node packets and contract once per cell
        cols = np.empty((n, nq * npp), dtype=np.complex128)
        wts = np.empty(nq * npp)
        k = 0
        for a, wa in zip(qn, qw):
            for b, wb in zip(pn, pw):
                cols[:, k] = _packet(grid, a, b, sigma_x)
                wts[k] = wa * wb
                k += 1
        op = (cols * wts) @ cols.conj().T
        op *= grid.dx / (2.0 * math.pi)
        ops[alpha] = 0.5 * (op + op.conj().T)

    rest = np.eye(n) - ops.sum(axis=0)
    povm = POVMSet(grid, partition, sigma_x, ops, rest, rule, (nq, npp))

    center_q = 0.5 * (partition.x_window[0] + partition.x_window[1])
    center_p = 0.5 * (partition.p_window[0] + partition.p_window[1])
    probe = _packet(grid, center_q, center_p, sigma_x)
    probe_rho = np.outer(probe, probe.conj()) * grid.dx
    leak = float(np.linalg.norm(rest @ probe_rho, 2))
    if leak > 0.1:
        raise WindowTooSmall(
            f"remainder acts at {leak:.3f} on a centered probe packet "
            f"(window {partition.x_window} x {partition.p_window})"
        )
    return povm


def _opnorm_power(m: np.ndarray, iters: int = 60, tol: float = 1e-12) -> float:
    """Largest singular value by power iteration on m^H m; deterministic start."""
    n = m.shape[0]
    v = np.ones(n, dtype=np.complex128) + 1e-3 * np.cos(np.arange(n))
    v /= np.linalg.norm(v)
    last = 0.0
    for _ in range(iters):
        w = m @ v
        v = m.conj().T @ w
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        v /= nv
        s = math.sqrt(nv)
        if abs(s - last) <= tol * max(s, 1.0):
            return s
        last = s
    return last


def pvm_quality(povm: POVMSet, exact: bool = False) -> dict:
    """Approximate-PVM diagnostics.

    Returns completeness_residual (operator norm of sum + rest - I, an
    identity of the construction), the full orthogonality matrix with
    entries ||Pi_a Pi_b - delta_ab Pi_a|| / ||Pi_a||, and summary scalars:
    worst_offdiag, worst_adjacent_offdiag, worst_nonadjacent_offdiag,
    worst_diagonal_defect.  exact=True swaps power iteration for full SVDs.
    """
    norm = (lambda m: float(np.linalg.norm(m, 2))) if exact else _opnorm_power
    ops = povm.operators
    m = len(ops)
    total = ops.sum(axis=0) + povm.rest - np.eye(povm.grid.n_points)
    residual = float(np.linalg.norm(total, 2))

    base = np.array([norm(ops[a]) for a in range(m)])
    orth = np.zeros((m, m))
    for a in range(m):
        pa = ops[a]
        for b in range(m):
            prod = pa @ ops[b]
            if a == b:
                prod = prod - pa
            orth[a, b] = norm(prod) / base[a]

    part = povm.partition
    off = ~np.eye(m, dtype=bool)
    adj = np.zeros((m, m), dtype=bool)
    for a in range(m):
        for b in range(m):
            adj[a, b] = a != b and part.adjacent(a, b)
    far = off & ~adj
    return {
        "completeness_residual": residual,
        "orthogonality_matrix": orth,
        "worst_offdiag": float(orth[off].max()) if m > 1 else 0.0,
        "worst_adjacent_offdiag": float(orth[adj].max()) if adj.any() else 0.0,
        "worst_nonadjacent_offdiag": float(orth[far].max()) if far.any() else 0.0,
        "worst_diagonal_defect": float(np.diag(orth).max()),
    }


@dataclass
class SieveResult:
    """Linear-entropy curves from scanning initial packet widths."""

    sigma_list: np.ndarray
    times: np.ndarray
    curves: np.ndarray  # shape (len(sigma_list), len(times))
    argmin_width: float

    def csv_rows(self) -> Iterator[tuple[float, float, float]]:
        for sigma, curve in zip(self.sigma_list, self.curves):
            for t, s in zip(self.times, curve):
                yield (float(sigma), float(t), float(s))

    def summary(self) -> dict:
        return {"argmin_width": self.argmin_width}


def predictability_sieve(
    grid: GridSpec,
    potential: Potential,
    lambda_rate: float,
    sigma_list: Sequence[float],
    z0: PhasePoint,
    horizon: float,
    dt: float = 0.01,
    record_every: int | None = None,
) -> SieveResult:
    """Rank initial Gaussian widths by linear-entropy growth up to horizon.

    Each width in sigma_list seeds a pure packet at z0 which evolves under
    the open dynamics; the width whose S_lin(horizon) is smallest wins.
    """
    if horizon <= 0 or dt <= 0:
        raise ValueError("horizon and dt must be positive")
    widths = np.asarray(list(sigma_list), dtype=float)
    if widths.size == 0:
        raise ValueError("sigma_list must be nonempty")
    n_steps = max(1, int(round(horizon / dt)))
    cadence = record_every or max(1, n_steps // 200)

    curves = []
    times = None
    for sigma in widths:
        rho = coherent_state(grid, z0.q, z0.p, float(sigma)).to_density()
        rec = evolve(rho, potential, lambda_rate, dt, n_steps, record_every=cadence)
        curves.append(rec.s_lin)
        times = rec.times
    curves = np.asarray(curves)
    best = int(np.argmin(curves[:, -1]))
    return SieveResult(widths, times, curves, float(widths[best]))
