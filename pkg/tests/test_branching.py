"""Branch-tree bookkeeping, trajectory sampling, and the explicit-bath checks."""

import json
import math

import numpy as np
import pytest

from branchfall import (
    BranchTree,
    DensityMatrix,
    EmptyTree,
    EscapeMass,
    EscapeSampled,
    ExplicitModel,
    ExplosionGuard,
    GridSpec,
    PhasePartition,
    WaveFunction,
    branch_step,
    build_povm,
    coherent_state,
    decoherence_functional,
    evolve_explicit,
    free_potential,
    harmonic_potential,
    mixture_consistency,
    sample_trajectory,
    suggested_branch_interval,
    superorthogonality_overlap,
    unitary_step,
)
from branchfall.dynamics import Propagator


GRID = GridSpec(128, -10.0, 10.0, 1.0)


def cat_state(grid, q, sigma, p=0.0):
    amps = (
        coherent_state(grid, -q, p, sigma).amplitudes
        + coherent_state(grid, q, -p, sigma).amplitudes
    )
    amps = amps / math.sqrt(np.sum(np.abs(amps) ** 2) * grid.dx)
    return DensityMatrix(grid, np.outer(amps, amps.conj()))


@pytest.fixture(scope="module")
def povm_3x3():
    part = PhasePartition((-9.0, 9.0), (-6.0, 6.0), 3, 3)
    return build_povm(GRID, part, sigma_x=1.0)


@pytest.fixture(scope="module")
def povm_2x1():
    part = PhasePartition((-9.0, 9.0), (-6.0, 6.0), 2, 1)
    return build_povm(GRID, part, sigma_x=0.9)


def test_single_packet_one_step_dominant_child(povm_3x3):
    rho = DensityMatrix.from_pure(coherent_state(GRID, 0.0, 0.0, 1.0))
    tree = BranchTree.from_state(rho, povm_3x3, dt=0.05, prune_epsilon=1e-6)
    out = branch_step(tree, free_potential(), 0.0, dt_int=0.05)
    best = max(out.leaves, key=lambda leaf: leaf.weight_sq)
    assert best.weight_sq >= 0.95
    assert best.weight_sq == pytest.approx(0.993680, abs=1e-3)
    assert best.history == (4,)  # central cell of the 3x3 partition
    assert abs(best.z.q) < 0.05 and abs(best.z.p) < 0.05
    assert out.weight_closure() == pytest.approx(1.0, abs=1e-10)


def test_symmetric_cat_splits_evenly(povm_2x1):
    rho = cat_state(GRID, 4.0, 0.9)
    tree = BranchTree.from_state(rho, povm_2x1, dt=0.4, prune_epsilon=1e-4)
    out = branch_step(tree, free_potential(), 5.0, dt_int=0.004)
    assert len(out.leaves) == 2
    by_hist = {leaf.history: leaf for leaf in out.leaves}
    for alpha, sign in [(0, -1.0), (1, 1.0)]:
        leaf = by_hist[(alpha,)]
        assert leaf.weight_sq == pytest.approx(0.5, abs=0.02)
        assert leaf.z.q == pytest.approx(sign * 4.0, abs=0.3)
        # z stays inside the cell the history names
        assert povm_2x1.partition.locate(leaf.z.q, leaf.z.p) == alpha
    assert out.escape_weight < 0.01
    assert out.weight_closure() == pytest.approx(1.0, abs=1e-10)


def test_closure_chain_rule_and_pruning(povm_3x3):
    rho = DensityMatrix.from_pure(coherent_state(GRID, 0.0, 0.0, 1.0))
    tree = BranchTree.from_state(rho, povm_3x3, dt=0.3, prune_epsilon=1e-4)
    for _ in range(2):
        tree = branch_step(
            tree, harmonic_potential(1.0, 1.0), 0.3, dt_int=0.01, leaf_cap=512
        )
    assert len(tree.leaves) > 1
    assert tree.weight_closure() == pytest.approx(1.0, abs=1e-10)
    assert tree.dropped_weight > 0.0
    for leaf in tree.leaves:
        assert 0.0 <= leaf.cond_prob <= 1.0 + 1e-12
        prod, node = 1.0, leaf
        while node is not None:
            prod *= node.cond_prob
            node = node.parent
        assert abs(prod - leaf.weight_sq) < 1e-10
        # weights never grow down a branch line
        assert leaf.weight_sq <= leaf.parent.weight_sq + 1e-12


def test_escape_mass_raises(povm_3x3):
    # packet riding the top of the momentum window leaks into the remainder
    rho = DensityMatrix.from_pure(coherent_state(GRID, 0.0, 5.8, 1.0))
    tree = BranchTree.from_state(rho, povm_3x3, dt=0.05, prune_epsilon=0.0)
    with pytest.raises(EscapeMass):
        branch_step(tree, free_potential(), 0.0, dt_int=0.05)


def test_explosion_guard(povm_3x3):
    rho = DensityMatrix.from_pure(coherent_state(GRID, 0.0, 0.0, 1.0))
    tree = BranchTree.from_state(rho, povm_3x3, dt=0.05, prune_epsilon=0.0)
    with pytest.raises(ExplosionGuard):
        branch_step(tree, free_potential(), 0.0, dt_int=0.05, leaf_cap=5)


def test_empty_tree_raises(povm_3x3):
    tree = BranchTree(povm_3x3, 0.1, 0.0, [])
    with pytest.raises(EmptyTree):
        branch_step(tree, free_potential(), 0.0, dt_int=0.1)
    with pytest.raises(EmptyTree):
        mixture_consistency(tree, DensityMatrix.from_pure(coherent_state(GRID, 0, 0, 1)))


def test_snapshot_is_json_ready(povm_2x1):
    rho = cat_state(GRID, 4.0, 0.9)
    tree = BranchTree.from_state(rho, povm_2x1, dt=0.4, prune_epsilon=1e-4)
    out = branch_step(tree, free_potential(), 5.0, dt_int=0.01)
    rows = json.loads(json.dumps(out.snapshot()))
    assert len(rows) == 2
    assert set(rows[0]) == {"history", "weight", "z"}
    assert rows[0]["history"] == [0] and len(rows[0]["z"]) == 2


def test_mixture_consistency_single_cell_is_identity():
    # one cell covering the whole window with deep margins acts as identity
    grid = GridSpec(128, -14.0, 14.0, 1.0)
    rho = DensityMatrix.from_pure(coherent_state(grid, 0.0, 0.0, 1.0))
    part = PhasePartition((-13.0, 13.0), (-8.0, 8.0), 1, 1)
    povm = build_povm(grid, part, sigma_x=1.0, quadrature=(64, 72))
    tree = BranchTree.from_state(rho, povm, dt=0.2, prune_epsilon=0.0)
    out = branch_step(tree, free_potential(), 0.8, dt_int=0.002)
    ref = rho.elements.copy()
    prop = Propagator(grid, free_potential(), 0.8, 0.002)
    for _ in range(100):
        ref = prop.step_elements(ref)
    dev = mixture_consistency(out, DensityMatrix(grid, ref, validate=False))
    assert len(out.leaves) == 1
    assert dev < 1e-10


def test_mixture_consistency_decohered_state(povm_2x1):
    rho = cat_state(GRID, 4.0, 0.9)
    lam = 5.0
    tree = BranchTree.from_state(rho, povm_2x1, dt=0.4, prune_epsilon=1e-6)
    for _ in range(2):
        tree = branch_step(tree, free_potential(), lam, dt_int=0.008, leaf_cap=512)
    ref = rho.elements.copy()
    prop = Propagator(GRID, free_potential(), lam, 0.008)
    for _ in range(100):
        ref = prop.step_elements(ref)
    dev = mixture_consistency(tree, DensityMatrix(GRID, ref, validate=False))
    assert dev < 0.05


def test_mixture_consistency_interference_control():
    # +-p superposition inside one x cell: the momentum split erases the
    # position fringes that the collapse-free evolution keeps
    rho = cat_state(GRID, 0.0, 0.7, p=2.0)
    part = PhasePartition((-9.0, 9.0), (-6.0, 6.0), 1, 2)
    povm = build_povm(GRID, part, sigma_x=0.7)
    tree = BranchTree.from_state(rho, povm, dt=0.1, prune_epsilon=0.0)
    out = branch_step(tree, free_potential(), 0.0, dt_int=0.002)
    ref = rho.elements.copy()
    prop = Propagator(GRID, free_potential(), 0.0, 0.002)
    for _ in range(50):
        ref = prop.step_elements(ref)
    dev = mixture_consistency(out, DensityMatrix(GRID, ref, validate=False))
    weights = sorted(leaf.weight_sq for leaf in out.leaves)
    assert weights == pytest.approx([0.5, 0.5], abs=0.01)
    assert dev > 0.05


def test_sample_trajectory_deterministic(povm_2x1):
    rho = cat_state(GRID, 4.0, 0.9)
    args = (rho, free_potential(), 5.0, povm_2x1, 0.4, 3)
    recs_a, final_a = sample_trajectory(*args, rng_seed=7, dt_int=0.004)
    recs_b, final_b = sample_trajectory(*args, rng_seed=7, dt_int=0.004)
    assert recs_a == recs_b
    assert np.array_equal(final_a.elements, final_b.elements)
    assert recs_a[0][0] == 0.0 and recs_a[0][1] is None
    assert [t for t, _, _ in recs_a] == pytest.approx([0.0, 0.4, 0.8, 1.2])
    zero_steps, _ = sample_trajectory(*args[:5], 0, rng_seed=7, dt_int=0.004)
    assert len(zero_steps) == 1


def test_sample_trajectory_born_fractions(povm_2x1):
    rho = cat_state(GRID, 4.0, 0.9)
    counts = {0: 0, 1: 0, "escape": 0}
    n = 200
    for seed in range(n):
        try:
            recs, _ = sample_trajectory(
                rho, free_potential(), 5.0, povm_2x1, 0.4, 1,
                rng_seed=1000 + seed, dt_int=0.02,
            )
            counts[recs[1][1]] += 1
        except EscapeSampled:
            counts["escape"] += 1
    assert counts["escape"] < 15
    # 4 sigma band for a fair binomial with n = 200
    assert abs(counts[0] - counts[1]) < 4.0 * math.sqrt(n * 0.5)


def test_escape_sampled_carries_context(povm_3x3):
    rho = DensityMatrix.from_pure(coherent_state(GRID, 0.0, 5.8, 1.0))
    hits = 0
    for seed in range(12):
        try:
            sample_trajectory(
                rho, free_potential(), 0.0, povm_3x3, 0.05, 1,
                rng_seed=seed, dt_int=0.05,
            )
        except EscapeSampled as err:
            hits += 1
            assert err.time == pytest.approx(0.05)
            assert len(err.records) == 1
    assert hits > 0  # escape weight is ~0.35, a dozen draws must hit it


def test_suggested_branch_interval():
    assert suggested_branch_interval(2.0, 3.0) == pytest.approx(3.0 / 18.0)
    with pytest.raises(ValueError):
        suggested_branch_interval(0.0, 1.0)
    with pytest.raises(ValueError):
        suggested_branch_interval(1.0, -1.0)


# --- explicit system x qubit-bath model ------------------------------------


def test_explicit_k0_matches_unitary_step():
    psi = coherent_state(GRID, 1.0, 0.5, 0.8)
    model = ExplicitModel.from_wavefunction(psi, [])
    pot = harmonic_potential(1.0, 1.0)
    out, report = evolve_explicit(model, pot, 0.02, 25)
    wave = psi
    for _ in range(25):
        wave = unitary_step(wave, pot, 0.02)
    assert np.max(np.abs(out.state[:, 0] - wave.amplitudes)) < 1e-12
    assert report.env_overlaps == pytest.approx(np.ones((2, 2)))


def test_reduced_lobe_follows_cosine_envelope():
    # heavy mass, V = 0: interaction phases commute across steps, so the
    # off-diagonal lobe decays by exactly prod_j cos(g_j (x - x') t)
    grid = GridSpec(128, -10.0, 10.0, 1.0e9)
    rho0 = cat_state(grid, 2.0, 0.8)
    amps = coherent_state(grid, -2.0, 0.0, 0.8).amplitudes + coherent_state(
        grid, 2.0, 0.0, 0.8
    ).amplitudes
    amps = amps / math.sqrt(np.sum(np.abs(amps) ** 2) * grid.dx)
    g = np.random.default_rng(11).uniform(0.5, 1.0, 4)
    model = ExplicitModel.from_wavefunction(WaveFunction(grid, amps), g)
    t, n_steps = 0.3, 60
    out, report = evolve_explicit(model, free_potential(), t / n_steps, n_steps)
    ia = int(np.argmin(np.abs(grid.x + 2.0)))
    ib = int(np.argmin(np.abs(grid.x - 2.0)))
    ratio = report.reduced_rho.elements[ia, ib] / rho0.elements[ia, ib]
    expected = np.prod(np.cos(g * (grid.x[ia] - grid.x[ib]) * t))
    assert ratio.real == pytest.approx(expected, abs=1e-6)
    assert abs(ratio.imag) < 1e-6


def test_conditioned_env_overlap_decays_and_matches_oracle():
    grid = GridSpec(128, -10.0, 10.0, 1.0e9)
    amps = coherent_state(grid, -2.0, 0.0, 0.8).amplitudes + coherent_state(
        grid, 2.0, 0.0, 0.8
    ).amplitudes
    amps = amps / math.sqrt(np.sum(np.abs(amps) ** 2) * grid.dx)
    g = np.random.default_rng(11).uniform(0.5, 1.0, 8)
    model = ExplicitModel.from_wavefunction(WaveFunction(grid, amps), g)
    t, n_steps = 0.35, 70
    out, report = evolve_explicit(model, free_potential(), t / n_steps, n_steps)
    assert report.env_overlaps.shape == (2, 2)
    overlap = report.env_overlaps[0, 1]
    assert overlap < 0.1
    xa, xb = report.bin_centroids
    oracle = np.prod(np.abs(np.cos(g * (xa - xb) * t)))
    assert overlap == pytest.approx(oracle, abs=1e-6)


def test_decoherence_functional_identity_history():
    psi = coherent_state(GRID, 0.5, 0.0, 0.8)
    model = ExplicitModel.from_wavefunction(psi, [])
    eye = np.eye(GRID.n_points)
    d, report = decoherence_functional(
        model, [eye], [(0, 0, 0)], harmonic_potential(1.0, 1.0), 0.3
    )
    assert abs(d[0, 0] - 1.0) < 1e-12
    assert report.consistency_ratios[0, 0] == pytest.approx(1.0)


HISTORIES = [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_decoherence_functional_no_environment_control():
    # bare superposition: the leaked half-packets interfere coherently
    wave = coherent_state(GRID, -2.0, 0.0, 0.8).amplitudes + coherent_state(
        GRID, 2.0, 0.0, 0.8
    ).amplitudes
    wave = wave / math.sqrt(np.sum(np.abs(wave) ** 2) * GRID.dx)
    part = PhasePartition((-9.0, 9.0), (-6.0, 6.0), 2, 1)
    povm = build_povm(GRID, part, sigma_x=0.8)
    projs = [povm.operators[0], povm.operators[1]]
    model = ExplicitModel.from_wavefunction(WaveFunction(GRID, wave), [])
    _, report = decoherence_functional(model, projs, HISTORIES, free_potential(), 0.9)
    ratios = report.consistency_ratios.copy()
    np.fill_diagonal(ratios, 0.0)
    assert ratios.max() > 0.3
    assert ratios.max() == pytest.approx(0.820, abs=0.01)


def test_decoherence_functional_k8_decoheres():
    # packets deep inside their cells; the bath tags each branch
    grid = GridSpec(128, -10.0, 10.0, 6.0)
    wave = coherent_state(grid, -3.0, 0.0, 0.5).amplitudes + coherent_state(
        grid, 3.0, 0.0, 0.5
    ).amplitudes
    wave = wave / math.sqrt(np.sum(np.abs(wave) ** 2) * grid.dx)
    part = PhasePartition((-9.0, 9.0), (-6.0, 6.0), 2, 1)
    povm = build_povm(grid, part, sigma_x=0.5)
    projs = [povm.operators[0], povm.operators[1]]
    g = np.random.default_rng(5).uniform(1.5, 3.0, 8)
    model = ExplicitModel.from_wavefunction(WaveFunction(grid, wave), g)
    d, report = decoherence_functional(model, projs, HISTORIES, free_potential(), 1.2)
    ratios = report.consistency_ratios.copy()
    np.fill_diagonal(ratios, 0.0)
    assert ratios.max() < 0.1
    assert ratios.max() == pytest.approx(0.0471, abs=0.005)
    # realized branch histories keep unit self-consistency
    diag = np.real(np.diag(d))
    assert diag[0] > 0.1 and diag[3] > 0.1
    assert report.consistency_ratios[0, 0] == 1.0
    assert report.consistency_ratios[3, 3] == 1.0


def test_decoherence_functional_validation():
    psi = coherent_state(GRID, 0.0, 0.0, 0.8)
    model = ExplicitModel.from_wavefunction(psi, [])
    eye = np.eye(GRID.n_points)
    with pytest.raises(ValueError):
        decoherence_functional(model, [eye], [], free_potential(), 0.1)
    with pytest.raises(ValueError):
        decoherence_functional(
            model, [eye], [(0,)] * 65, free_potential(), 0.1
        )
    with pytest.raises(ValueError):
        decoherence_functional(
            model, [eye], [(0, 0, 0, 0, 0, 0)], free_potential(), 0.1
        )
    with pytest.raises(ValueError):
        decoherence_functional(
            model, [eye], [(0, 0), (0,)], free_potential(), 0.1
        )


def test_superorthogonality_overlap():
    a = ExplicitModel.from_wavefunction(coherent_state(GRID, 0.0, 3.0, 0.8), [])
    b = ExplicitModel.from_wavefunction(coherent_state(GRID, 0.0, -3.0, 0.8), [])
    # same spatial density, nearly orthogonal amplitudes
    assert abs(np.vdot(a.state[:, 0], b.state[:, 0]) * GRID.dx) < 1e-5
    assert superorthogonality_overlap(a, b) == pytest.approx(1.0, abs=1e-12)
    assert superorthogonality_overlap(a, a) == pytest.approx(1.0, abs=1e-12)
    c = ExplicitModel.from_wavefunction(coherent_state(GRID, -4.5, 0.0, 0.45), [])
    d = ExplicitModel.from_wavefunction(coherent_state(GRID, 4.5, 0.0, 0.45), [])
    assert superorthogonality_overlap(c, d) < 1e-8
    g = np.random.default_rng(11).uniform(0.5, 1.0, 3)
    ag = ExplicitModel.from_wavefunction(coherent_state(GRID, 0.0, 3.0, 0.8), g)
    bg = ExplicitModel.from_wavefunction(coherent_state(GRID, 0.0, -3.0, 0.8), g)
    assert superorthogonality_overlap(ag, bg) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        superorthogonality_overlap(a, ag)


def test_explicit_model_validation():
    psi = coherent_state(GRID, 0.0, 0.0, 0.8)
    with pytest.raises(ValueError):
        ExplicitModel.from_wavefunction(psi, np.ones(13))
    with pytest.raises(ValueError):
        ExplicitModel(GRID, np.ones(2), psi.amplitudes[:, None])  # wrong env dim
    with pytest.raises(ValueError):
        ExplicitModel(GRID, np.ones(1), np.ones((GRID.n_points, 2)) * 0.001)
    with pytest.raises(ValueError):
        ExplicitModel.from_wavefunction(psi, np.ones(2), env_energies=np.ones(3))
    model = ExplicitModel.from_wavefunction(psi, np.ones(2))
    assert model.reduced_density().trace() == pytest.approx(1.0, abs=1e-10)
