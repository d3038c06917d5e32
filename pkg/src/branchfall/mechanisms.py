"""Candidate collapse mechanisms run against the same decohering dynamics.

Two concrete single-world mechanisms live here: spontaneous localization
hits (GRW) applied to the simulated coordinate, and pilot-wave trajectories
guided by the phase gradient of a pure state.  Both produce objects that can
be compared with the branch decomposition: hit states against leaf states
via a fidelity score, guidance ensembles against Born weights via
equivariance and branch-occupancy statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .branching import BranchTree, ExplicitModel
from .dynamics import Potential
from .errors import EmptyTree, NodeRegion
from .qstate import GridSpec, WaveFunction

__all__ = [
    "GRWParams",
    "GRWHit",
    "GRWRun",
    "grw_evolve",
    "compatibility_score",
    "BohmEnsemble",
    "BohmRun",
    "bohm_velocity",
    "bohm_evolve",
    "sample_positions",
]


class _WaveStepper:
    """Strang split-step for wavefunctions without building dense matrices."""

    def __init__(self, grid: GridSpec, potential: Potential, dt: float):
        self.kin_half = np.exp(-1j * grid.p**2 / (2.0 * grid.mass) * (dt / 2.0))
        self.pot_full = np.exp(-1j * potential.values(grid) * dt)

    def step(self, amps: np.ndarray) -> np.ndarray:
        out = np.fft.ifft(self.kin_half * np.fft.fft(amps))
        out = self.pot_full * out
        return np.fft.ifft(self.kin_half * np.fft.fft(out))


@dataclass(frozen=True)
class GRWParams:
    """Spontaneous-hit knobs: rate per unit time and localization width."""

    hit_rate: float
    r_c: float

    def __post_init__(self) -> None:
        if self.hit_rate < 0:
            raise ValueError("hit_rate must be nonnegative")
        if self.r_c <= 0:
            raise ValueError("r_c must be positive")


@dataclass
class GRWHit:
    time: float
    center: float
    pre_state: WaveFunction
    post_state: WaveFunction


@dataclass
class GRWRun:
    hits: list[GRWHit]
    final: WaveFunction
    total_time: float

    def hit_times(self) -> list[float]:
        return [hit.time for hit in self.hits]

    def hit_rows(self) -> list[tuple[float, float]]:
        return [(hit.time, hit.center) for hit in self.hits]


def _evolve_segment(amps, grid, potential, duration, dt_int):
    if duration <= 0:
        return amps
    n_full = int(duration / dt_int)
    if n_full:
        stepper = _WaveStepper(grid, potential, dt_int)
        for _ in range(n_full):
            amps = stepper.step(amps)
    rem = duration - n_full * dt_int
    if rem > 1e-15 * max(1.0, duration):
        amps = _WaveStepper(grid, potential, rem).step(amps)
    return amps


def grw_evolve(
    psi: WaveFunction,
    potential: Potential,
    params: GRWParams,
    total_time: float,
    rng_seed,
    dt_int: float = 0.01,
) -> GRWRun:
    """Unitary evolution punctuated by Poisson-timed localization hits.

    Hit centers follow the density (|psi|^2 convolved with a Gaussian of
    variance r_c^2/2); the state is multiplied by the corresponding Gaussian
    and renormalized.  Everything is deterministic for a fixed seed.
    """
    grid = psi.grid
    rng = np.random.default_rng(rng_seed)
    amps = psi.amplitudes.copy()
    hits: list[GRWHit] = []
    t = 0.0
    while True:
        wait = rng.exponential(1.0 / params.hit_rate) if params.hit_rate > 0 else math.inf
        if t + wait >= total_time:
            amps = _evolve_segment(amps, grid, potential, total_time - t, dt_int)
            break
        amps = _evolve_segment(amps, grid, potential, wait, dt_int)
        t += wait
        pre = WaveFunction(grid, amps.copy(), validate=False)
        prob = np.abs(amps) ** 2 * grid.dx
        prob = prob / prob.sum()
        idx = int(rng.choice(len(prob), p=prob))
        center = grid.x[idx] + rng.normal(0.0, params.r_c / math.sqrt(2.0))
        amps = amps * np.exp(-((grid.x - center) ** 2) / (2.0 * params.r_c**2))
        amps = amps / math.sqrt(np.sum(np.abs(amps) ** 2) * grid.dx)
        hits.append(GRWHit(t, center, pre, WaveFunction(grid, amps.copy(), validate=False)))
    return GRWRun(hits, WaveFunction(grid, amps, validate=False), total_time)


def compatibility_score(post_hit: WaveFunction, tree: BranchTree) -> tuple[tuple[int, ...], float]:
    """Best fidelity between the post-hit state and any live branch state.

    Fidelity of a pure state against a mixed leaf is <psi|rho|psi>.  The
    score is reported, never thresholded: whether hits land on branch states
    is left as an empirical question.
    """
    if not tree.leaves:
        raise EmptyTree("compatibility_score needs live leaves")
    amps = post_hit.amplitudes
    dx = post_hit.grid.dx
    best_history, best = (), -1.0
    for leaf in tree.leaves:
        fid = float(np.real(amps.conj() @ (leaf.state.elements @ amps)) * dx * dx)
        if fid > best:
            best_history, best = leaf.history, fid
    return best_history, min(max(best, 0.0), 1.0)


# --- pilot-wave guidance ----------------------------------------------------


State = Union[WaveFunction, ExplicitModel]


def _joint_columns(state: State) -> tuple[GridSpec, np.ndarray]:
    if isinstance(state, WaveFunction):
        return state.grid, state.amplitudes[:, None]
    if isinstance(state, ExplicitModel):
        return state.grid, state.state
    raise TypeError("state must be a WaveFunction or ExplicitModel")


def _velocity_nodes(state: State) -> tuple[np.ndarray, np.ndarray]:
    """Guidance velocity and probability density sampled at the grid nodes.

    For an explicit model the current and density are summed over the
    environment components: only branches overlapping at x contribute.
    """
    grid, cols = _joint_columns(state)
    dcols = np.fft.ifft(1j * grid.p[:, None] * np.fft.fft(cols, axis=0), axis=0)
    current = np.sum(np.imag(cols.conj() * dcols), axis=1)
    density = np.sum(np.abs(cols) ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        velocity = np.where(density > 0, current / np.maximum(density, 1e-300), 0.0)
    return velocity / grid.mass, density


def bohm_velocity(state: State, x: float, density_floor: float = 1e-12) -> float:
    """Guidance velocity at one point, linearly interpolated between nodes."""
    grid, _ = _joint_columns(state)
    velocity, density = _velocity_nodes(state)
    dens = float(np.interp(x, grid.x, density))
    if dens < density_floor:
        raise NodeRegion(f"density {dens:.3e} below floor at x = {x:.6g}")
    return float(np.interp(x, grid.x, velocity))


def sample_positions(state: State, n: int, rng) -> np.ndarray:
    """Draw n positions from |psi|^2 via the piecewise-linear node CDF."""
    grid, cols = _joint_columns(state)
    density = np.sum(np.abs(cols) ** 2, axis=1)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * grid.dx)])
    cdf = cdf / cdf[-1]
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    u = rng.random(n)
    return np.interp(u, cdf, grid.x)


@dataclass
class BohmEnsemble:
    """Configuration sample in quantum equilibrium plus its seed."""

    positions: np.ndarray
    rng_seed: int

    @classmethod
    def from_state(cls, state: State, n: int, rng_seed: int):
        positions = sample_positions(state, n, np.random.default_rng(rng_seed))
        return cls(positions, rng_seed)


@dataclass
class BohmRun:
    times: np.ndarray
    positions: np.ndarray  # (n_traj, n_times)
    node_flags: np.ndarray  # bool per trajectory
    ks_distances: dict  # checkpoint time -> KS distance
    occupancy: Optional[dict] = None  # checkpoint time -> (left, right) fractions
    crossings: Optional[int] = None

    def trajectory_rows(self):
        for tid in range(self.positions.shape[0]):
            for k, t in enumerate(self.times):
                yield tid, float(t), float(self.positions[tid, k])


def _ks_distance(samples: np.ndarray, grid: GridSpec, density: np.ndarray) -> float:
    cdf_nodes = np.concatenate(
        [[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * grid.dx)]
    )
    cdf_nodes = cdf_nodes / cdf_nodes[-1]
    xs = np.sort(samples)
    f = np.interp(xs, grid.x, cdf_nodes)
    n = len(xs)
    steps = np.arange(1, n + 1) / n
    return float(np.max(np.maximum(np.abs(f - steps), np.abs(f - (steps - 1.0 / n)))))


def bohm_evolve(
    ensemble: BohmEnsemble,
    snapshots: Sequence[State],
    snapshot_times: Sequence[float],
    ode_dt: float,
    checkpoints: Optional[Sequence[float]] = None,
    branch_split: Optional[float] = None,
    disjoint_time: float = 0.0,
    density_floor: float = 1e-12,
) -> BohmRun:
    """Integrate the ensemble through a precomputed state evolution.

    The velocity field is sampled on the grid at every snapshot and
    interpolated linearly in time and position; each configuration advances
    by the explicit midpoint rule.  Trajectories that enter a density below
    density_floor are flagged and frozen, and the run continues.  With
    branch_split given, occupancy fractions left/right of the split are
    reported at each checkpoint along with the number of trajectories that
    changed sides after disjoint_time.
    """
    times = np.asarray(snapshot_times, dtype=float)
    if len(snapshots) != len(times) or len(times) < 2:
        raise ValueError("need matching snapshots and at least two times")
    dt_snap = times[1] - times[0]
    if not np.allclose(np.diff(times), dt_snap, rtol=0, atol=1e-9 * max(dt_snap, 1.0)):
        raise ValueError("snapshot times must be uniformly spaced")
    grid, _ = _joint_columns(snapshots[0])

    v_table = np.empty((len(times), grid.n_points))
    d_table = np.empty((len(times), grid.n_points))
    for k, state in enumerate(snapshots):
        v_table[k], d_table[k] = _velocity_nodes(state)

    def field(t: float, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = min(max((t - times[0]) / dt_snap, 0.0), len(times) - 1.0)
        k = min(int(s), len(times) - 2)
        w = s - k
        v_nodes = (1.0 - w) * v_table[k] + w * v_table[k + 1]
        d_nodes = (1.0 - w) * d_table[k] + w * d_table[k + 1]
        return np.interp(q, grid.x, v_nodes), np.interp(q, grid.x, d_nodes)

    n_steps = int(round((times[-1] - times[0]) / ode_dt))
    t_grid = times[0] + ode_dt * np.arange(n_steps + 1)
    q = ensemble.positions.astype(float).copy()
    n_traj = len(q)
    flags = np.zeros(n_traj, dtype=bool)
    out = np.empty((n_traj, n_steps + 1))
    out[:, 0] = q

    crossings = 0
    prev_side = np.sign(q - branch_split) if branch_split is not None else None

    for k in range(n_steps):
        t = t_grid[k]
        live = ~flags
        v1, d1 = field(t, q)
        newly = live & (d1 < density_floor)
        flags |= newly
        live = ~flags
        half = q + 0.5 * ode_dt * np.where(live, v1, 0.0)
        v2, d2 = field(t + 0.5 * ode_dt, half)
        newly = live & (d2 < density_floor)
        flags |= newly
        live = ~flags
        q = q + ode_dt * np.where(live, v2, 0.0)
        out[:, k + 1] = q
        if branch_split is not None and t_grid[k + 1] >= disjoint_time:
            side = np.sign(q - branch_split)
            if prev_side is not None and t_grid[k] >= disjoint_time:
                crossings += int(np.sum((side != prev_side) & live))
            prev_side = side

    if checkpoints is None:
        idx = np.linspace(0, len(times) - 1, min(4, len(times))).astype(int)
        checkpoints = [times[i] for i in idx]
    ks = {}
    occupancy = {} if branch_split is not None else None
    for t_ck in checkpoints:
        k_ode = int(round((t_ck - times[0]) / ode_dt))
        k_ode = min(max(k_ode, 0), n_steps)
        k_snap = int(round((t_ck - times[0]) / dt_snap))
        k_snap = min(max(k_snap, 0), len(times) - 1)
        samples = out[~flags, k_ode]
        ks[float(t_ck)] = _ks_distance(samples, grid, d_table[k_snap])
        if occupancy is not None:
            right = float(np.mean(samples > branch_split))
            occupancy[float(t_ck)] = (1.0 - right, right)

    return BohmRun(
        times=t_grid,
        positions=out,
        node_flags=flags,
        ks_distances=ks,
        occupancy=occupancy,
        crossings=crossings if branch_split is not None else None,
    )
