"""Branch decomposition of the decohering state and its stochastic unraveling.

A branch tree alternates open-system evolution over an interval Delta t with
a window-POVM split of every leaf: child weights follow the repeated-
application rule w = Tr(Pi_alpha^2 rho), child states the Lueders update
Pi rho Pi / Tr(Pi rho Pi).  Sampling one child per step instead of keeping
all of them yields a stochastic trajectory whose history distribution is the
Born weight of the corresponding branch.

The module also carries an explicit system (x) environment model — a qubit
bath coupled to position — used to check that phase-space histories of the
reduced dynamics really decohere, via the decoherence functional and
configuration-space (super)orthogonality measures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .dynamics import Potential, Propagator
from .errors import EmptyTree, EscapeMass, EscapeSampled, ExplosionGuard
from .pointer import POVMSet
from .qstate import DensityMatrix, GridSpec, PhasePoint, WaveFunction, mean_phase_point

__all__ = [
    "BranchNode",
    "BranchTree",
    "branch_step",
    "sample_trajectory",
    "mixture_consistency",
    "suggested_branch_interval",
    "ExplicitModel",
    "DecoherenceReport",
    "evolve_explicit",
    "decoherence_functional",
    "superorthogonality_overlap",
]


def suggested_branch_interval(lambda_rate: float, d_x: float) -> float:
    """Smallest Delta t for which one cell width dephases by at least e^-3."""
    if lambda_rate <= 0 or d_x <= 0:
        raise ValueError("lambda_rate and d_x must be positive")
    return 3.0 / (lambda_rate * d_x * d_x)


@dataclass
class BranchNode:
    """One branch: its cell history, Born weight, state, and phase-space label."""

    history: tuple[int, ...]
    weight_sq: float
    state: DensityMatrix
    z: PhasePoint
    parent: Optional["BranchNode"] = None
    cond_prob: float = 1.0  # P(this cell | parent branch), kept for audits


@dataclass
class BranchTree:
    """All live branches plus the mass that left the bookkeeping.

    dropped_weight collects pruned children (weight below prune_epsilon);
    escape_weight collects mass assigned to the remainder element.  Neither
    is ever renormalized back into the leaves.
    """

    povm: POVMSet
    dt: float
    prune_epsilon: float
    leaves: list[BranchNode]
    dropped_weight: float = 0.0
    escape_weight: float = 0.0
    n_steps: int = 0

    @classmethod
    def from_state(cls, rho: DensityMatrix, povm: POVMSet, dt: float, prune_epsilon: float = 0.0):
        root = BranchNode((), 1.0, rho, mean_phase_point(rho))
        return cls(povm, dt, prune_epsilon, [root])

    def weight_closure(self) -> float:
        return sum(leaf.weight_sq for leaf in self.leaves) + self.dropped_weight + self.escape_weight

    def snapshot(self) -> list[dict]:
        """JSON-ready rows, one per leaf."""
        return [
            {
                "history": list(leaf.history),
                "weight": leaf.weight_sq,
                "z": [leaf.z.q, leaf.z.p],
            }
            for leaf in self.leaves
        ]


def _rest_square(povm: POVMSet) -> np.ndarray:
    cache = getattr(povm, "_rest_square", None)
    if cache is None:
        cache = povm.rest @ povm.rest
        povm._rest_square = cache
    return cache


def _branch_weights(povm: POVMSet, elements: np.ndarray) -> tuple[np.ndarray, float]:
    """(Tr(Pi_alpha^2 rho) per cell, Tr(Pi_rest^2 rho)); clipped at zero."""
    dx = povm.grid.dx
    w = np.einsum("aij,ji->a", povm.squares, elements).real * dx
    esc = float(np.sum(_rest_square(povm) * elements.T).real * dx)
    return np.clip(w, 0.0, None), max(esc, 0.0)


def branch_step(
    tree: BranchTree,
    potential: Potential,
    lambda_rate: float,
    dt_int: float,
    escape_tol: float = 0.05,
    leaf_cap: int = 256,
) -> BranchTree:
    """Evolve every leaf for the branching interval, then split it.

    dt_int is the internal integrator step; the interval tree.dt is evolved
    in round(tree.dt / dt_int) equal substeps.  Raises EscapeMass when any
    leaf sends more than escape_tol of its conditional weight to the
    remainder, and ExplosionGuard when the live-leaf count would exceed
    leaf_cap (raise prune_epsilon or coarsen the partition instead).
    """
    if not tree.leaves:
        raise EmptyTree("branch_step needs at least one live leaf")
    grid = tree.povm.grid
    n_sub = max(1, int(round(tree.dt / dt_int)))
    prop = Propagator(grid, potential, lambda_rate, tree.dt / n_sub)

    new_leaves: list[BranchNode] = []
    dropped = tree.dropped_weight
    escaped = tree.escape_weight
    for leaf in tree.leaves:
        el = leaf.state.elements
        for _ in range(n_sub):
            el = prop.step_elements(el)
        weights, esc = _branch_weights(tree.povm, el)
        total = weights.sum() + esc
        if total <= 0:
            raise EmptyTree(f"leaf {leaf.history} has no weight anywhere")
        if esc / total > escape_tol:
            raise EscapeMass(
                f"leaf {leaf.history}: escape fraction {esc / total:.3f} > {escape_tol}"
            )
        escaped += leaf.weight_sq * esc / total
        evolved = DensityMatrix(grid, el, validate=False)
        for alpha in np.nonzero(weights)[0]:
            cond = weights[alpha] / total
            w_child = leaf.weight_sq * cond
            if w_child < tree.prune_epsilon:
                dropped += w_child
                continue
            proj = tree.povm.project(el, int(alpha))
            tr = float(np.sum(np.diag(proj)).real * grid.dx)
            if tr <= 0:
                dropped += w_child
                continue
            child_el = proj / tr
            child_el = 0.5 * (child_el + child_el.conj().T)
            child = DensityMatrix(grid, child_el, validate=False)
            new_leaves.append(
                BranchNode(
                    leaf.history + (int(alpha),),
                    w_child,
                    child,
                    mean_phase_point(child),
                    parent=leaf,
                    cond_prob=cond,
                )
            )
        if len(new_leaves) > leaf_cap:
            raise ExplosionGuard(
                f"leaf count {len(new_leaves)} exceeds cap {leaf_cap}"
            )
    return BranchTree(
        tree.povm,
        tree.dt,
        tree.prune_epsilon,
        new_leaves,
        dropped_weight=dropped,
        escape_weight=escaped,
        n_steps=tree.n_steps + 1,
    )


def sample_trajectory(
    rho0: DensityMatrix,
    potential: Potential,
    lambda_rate: float,
    povm: POVMSet,
    dt: float,
    n_steps: int,
    rng_seed,
    dt_int: float | None = None,
    stop=None,
):
    """One Born-weighted history: evolve dt, collapse to one sampled cell, repeat.

    Returns (records, final_state) where records is a list of
    (t, alpha, PhasePoint); the first entry is the t = 0 readout with
    alpha = None.  Drawing the remainder element raises EscapeSampled with
    .time and .records attached.  Deterministic for a fixed rng_seed.

    stop, when given, is called after each collapse with (t, alpha, z);
    returning True ends the run early with the records so far.
    """
    grid = rho0.grid
    if dt_int is None:
        dt_int = dt / max(1, round(dt / 0.01))
    n_sub = max(1, int(round(dt / dt_int)))
    prop = Propagator(grid, potential, lambda_rate, dt / n_sub)
    rng = np.random.default_rng(rng_seed)

    el = rho0.elements.copy()
    records = [(0.0, None, mean_phase_point(rho0))]
    for step in range(1, n_steps + 1):
        for _ in range(n_sub):
            el = prop.step_elements(el)
        weights, esc = _branch_weights(povm, el)
        total = weights.sum() + esc
        t = step * dt
        draw = rng.random() * total
        cum = np.cumsum(weights)
        alpha = int(np.searchsorted(cum, draw, side="right"))
        if alpha >= len(weights):
            err = EscapeSampled(f"escape element drawn at t = {t:.6g}")
            err.time = t
            err.records = records
            raise err
        proj = povm.project(el, alpha)
        tr = float(np.sum(np.diag(proj)).real * grid.dx)
        el = proj / tr
        el = 0.5 * (el + el.conj().T)
        state = DensityMatrix(grid, el, validate=False)
        records.append((t, alpha, mean_phase_point(state)))
        if stop is not None and stop(t, alpha, records[-1][2]):
            break
    return records, DensityMatrix(grid, el, validate=False)


def mixture_consistency(tree: BranchTree, reference: DensityMatrix) -> float:
    """Max pointwise gap between the weighted branch density and the reference.

    Both sides are position densities (kernel diagonals); the reference is
    the same initial state evolved without any collapses.  Escaped and
    pruned mass is missing from the branch side by construction.
    """
    if not tree.leaves:
        raise EmptyTree("mixture_consistency needs live leaves")
    mixed = np.zeros(reference.grid.n_points)
    for leaf in tree.leaves:
        mixed += leaf.weight_sq * leaf.state.position_density()
    return float(np.max(np.abs(mixed - reference.position_density())))


# --- explicit system (x) qubit-environment model ---------------------------


@dataclass
class ExplicitModel:
    """Pure state of the particle plus k coupled qubits.

    state has shape (n_points, 2^k); column b is the amplitude on the
    environment basis state whose bit j (LSB = qubit 0) selects the
    sigma_z eigenvalue s_j = +1 (bit 0) or -1 (bit 1).  The interaction is
    H_int = X (x) sum_j g_j sigma_z^(j); optional env_energies h_j add the
    commuting self-term sum_j h_j sigma_z^(j).
    """

    grid: GridSpec
    couplings: np.ndarray
    state: np.ndarray
    env_energies: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.couplings = np.atleast_1d(np.asarray(self.couplings, dtype=float))
        k = self.k
        if k > 12:
            raise ValueError(f"k = {k} exceeds the desk-scale cap of 12")
        self.state = np.asarray(self.state, dtype=np.complex128)
        if self.state.shape != (self.grid.n_points, 2**k):
            raise ValueError(f"state must have shape (n_points, 2^{k})")
        if self.env_energies is not None:
            self.env_energies = np.asarray(self.env_energies, dtype=float)
            if self.env_energies.shape != (k,):
                raise ValueError("env_energies must match the number of qubits")
        nrm = self.norm_squared()
        if abs(nrm - 1.0) > 1e-8:
            raise ValueError(f"joint state not normalized: {nrm!r}")

    @property
    def k(self) -> int:
        return len(self.couplings)

    def norm_squared(self) -> float:
        return float(np.sum(np.abs(self.state) ** 2) * self.grid.dx)

    @classmethod
    def from_wavefunction(cls, psi: WaveFunction, couplings, env_energies=None):
        """System state (x) environment in the uniform superposition |+>^k."""
        couplings = np.atleast_1d(np.asarray(couplings, dtype=float))
        b = 2 ** len(couplings)
        joint = np.repeat(psi.amplitudes[:, None], b, axis=1) / math.sqrt(b)
        return cls(psi.grid, couplings, joint, env_energies)

    def sigma_signs(self) -> np.ndarray:
        """s_j(b) matrix of shape (2^k, k): +1 for bit 0, -1 for bit 1."""
        b = np.arange(2**self.k)
        bits = (b[:, None] >> np.arange(self.k)[None, :]) & 1
        return 1.0 - 2.0 * bits

    def reduced_density(self) -> DensityMatrix:
        """Trace out the qubits."""
        rho = self.state @ self.state.conj().T
        return DensityMatrix(self.grid, rho, validate=False)


@dataclass
class DecoherenceReport:
    """Conditioned-environment overlaps and history-consistency diagnostics."""

    bin_bounds: Optional[list] = None
    bin_mass: Optional[np.ndarray] = None
    bin_centroids: Optional[np.ndarray] = None
    env_overlaps: Optional[np.ndarray] = None
    consistency_ratios: Optional[np.ndarray] = None
    reduced_rho: Optional[DensityMatrix] = None


class _ExplicitStepper:
    """Strang step K(dt/2) diag-phase(dt) K(dt/2) on the joint (n, 2^k) array.

    The diagonal phase covers V(x) plus the full interaction and any sigma_z
    self-terms, all of which commute; with k = 0 this is exactly the
    single-particle Strang step.
    """

    def __init__(self, model: ExplicitModel, potential: Potential, dt: float):
        grid = model.grid
        self.kin_half = np.exp(-1j * grid.p**2 / (2.0 * grid.mass) * (dt / 2.0))[:, None]
        signs = model.sigma_signs()  # (2^k, k)
        shift = signs @ model.couplings  # s_b = sum_j g_j s_j(b)
        env = signs @ model.env_energies if model.env_energies is not None else 0.0
        diag = potential.values(grid)[:, None] + grid.x[:, None] * shift[None, :] + np.broadcast_to(env, (1, len(shift)))
        self.phase = np.exp(-1j * diag * dt)

    def step(self, state: np.ndarray) -> np.ndarray:
        out = np.fft.ifft(self.kin_half * np.fft.fft(state, axis=0), axis=0)
        out = self.phase * out
        return np.fft.ifft(self.kin_half * np.fft.fft(out, axis=0), axis=0)


def evolve_explicit(
    model: ExplicitModel,
    potential: Potential,
    dt: float,
    n_steps: int,
    bins: Optional[Sequence[tuple[float, float]]] = None,
) -> tuple[ExplicitModel, DecoherenceReport]:
    """Run the joint unitary dynamics and report conditioned-env overlaps.

    bins are position intervals; each nonempty bin is represented by the
    grid point nearest its probability centroid, and the environment ket at
    that point (normalized column of the joint state) stands in for the
    branch's environment state.  Defaults to the two window halves.
    """
    grid = model.grid
    stepper = _ExplicitStepper(model, potential, dt)
    state = model.state.copy()
    for _ in range(n_steps):
        state = stepper.step(state)
    out = ExplicitModel(grid, model.couplings, state, model.env_energies)

    if bins is None:
        mid = 0.5 * (grid.x_min + grid.x_max)
        bins = [(grid.x_min, mid), (mid, grid.x_max)]
    density = np.sum(np.abs(state) ** 2, axis=1) * grid.dx
    kets, masses, kept, reps = [], [], [], []
    for lo, hi in bins:
        sel = (grid.x >= lo) & (grid.x < hi)
        mass = float(density[sel].sum())
        if mass < 1e-12:
            continue
        centroid = float(np.sum(grid.x[sel] * density[sel]) / mass)
        idx = int(np.argmin(np.abs(grid.x - centroid)))
        ket = state[idx]
        nrm = np.linalg.norm(ket)
        if nrm == 0:
            continue
        kets.append(ket / nrm)
        masses.append(mass)
        kept.append((float(lo), float(hi)))
        reps.append(grid.x[idx])
    m = len(kets)
    overlaps = np.zeros((m, m))
    for a in range(m):
        for b in range(m):
            overlaps[a, b] = min(abs(np.vdot(kets[a], kets[b])), 1.0)
    report = DecoherenceReport(
        bin_bounds=kept,
        bin_mass=np.asarray(masses),
        bin_centroids=np.asarray(reps),
        env_overlaps=overlaps,
        reduced_rho=out.reduced_density(),
    )
    return out, report


def decoherence_functional(
    model: ExplicitModel,
    projectors: Sequence[np.ndarray],
    history_set: Sequence[tuple[int, ...]],
    potential: Potential,
    dt: float,
) -> tuple[np.ndarray, DecoherenceReport]:
    """Gram matrix of history vectors C_hist |Psi0> plus consistency ratios.

    A history (a_0, ..., a_N) applies projector a_0, then alternates the
    joint unitary over dt with the next projector: C = P_aN U ... U P_a0.
    Projectors act on the particle index only.  Shared prefixes are
    evaluated once.  Cost grows with len(histories) and N; both are capped.
    """
    histories = [tuple(h) for h in history_set]
    if not histories:
        raise ValueError("history_set must be nonempty")
    if len(histories) > 64:
        raise ValueError("history_set capped at 64 histories")
    length = len(histories[0])
    if any(len(h) != length for h in histories):
        raise ValueError("all histories must share one length")
    if length > 5:
        raise ValueError("histories capped at 5 entries (4 evolution steps)")

    stepper = _ExplicitStepper(model, potential, dt)
    grid = model.grid
    cache: dict[tuple[int, ...], np.ndarray] = {(): model.state}

    def vector(prefix: tuple[int, ...]) -> np.ndarray:
        if prefix in cache:
            return cache[prefix]
        prev = vector(prefix[:-1])
        cur = prev if len(prefix) == 1 else stepper.step(prev)
        out = projectors[prefix[-1]] @ cur
        cache[prefix] = out
        return out

    vecs = [vector(h) for h in histories]
    m = len(histories)
    d = np.empty((m, m), dtype=np.complex128)
    for a in range(m):
        for b in range(m):
            d[a, b] = np.sum(vecs[b].conj() * vecs[a]) * grid.dx
    diag = np.real(np.diag(d))
    ratios = np.zeros((m, m))
    for a in range(m):
        for b in range(m):
            denom = math.sqrt(max(diag[a], 0.0) * max(diag[b], 0.0))
            ratios[a, b] = abs(d[a, b]) / denom if denom > 1e-300 else 0.0
    return d, DecoherenceReport(consistency_ratios=ratios)


def superorthogonality_overlap(branch_a: ExplicitModel, branch_b: ExplicitModel) -> float:
    """Bhattacharyya coefficient of the two configuration-space densities.

    Configuration space is (grid point, qubit basis state); 1 means the
    branches live on identical configurations (however orthogonal their
    phases), 0 means disjoint supports.
    """
    if branch_a.grid is not branch_b.grid and branch_a.grid != branch_b.grid:
        raise ValueError("branches must share a grid")
    if branch_a.state.shape != branch_b.state.shape:
        raise ValueError("branches must share the environment dimension")
    pa = np.abs(branch_a.state) ** 2 * branch_a.grid.dx
    pb = np.abs(branch_b.state) ** 2 * branch_b.grid.dx
    return float(np.sum(np.sqrt(pa * pb)))
