"""Planner, engine, and measurement-branch checks.

The entangling targets are verified two ways: frozen analytic amplitudes
inside the planners, and (for a sample of cases) direct matrix
exponentiation of the generator, independent of the factored propagator.
"""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.linalg import expm

from spincavity.algebra import (
    StateVector,
    basis_index,
    basis_state,
    make_space,
    permutation_op,
)
from spincavity.analysis import extract_frequency, fidelity, leg_populations
from spincavity.dynamics import DecaySpec, ThermalSpec
from spincavity.hamiltonians import DriveParams, h0_drive, h_effective, lambda_cavity
from spincavity.protocols import (
    ARCSIN_1_SQRT3,
    CollectiveDrive,
    Effective,
    FullCavity,
    Lindblad,
    LocalTransfer,
    Measurement,
    PLANNERS,
    drive_population_series,
    plan_ghz_four_level,
    plan_ghz_three_level,
    plan_ghz_two_level,
    plan_measure_reduce,
    plan_two_atom_qutrit,
    plan_unitary,
    reduce_rotation_matrix,
    run_plan,
    sample_outcome,
    swap_ef_matrix,
    swap_gf_eh_matrix,
)

LAM = 0.025


# ------------------------------------------------------------------ planners


def test_qutrit_plan_timings():
    plan = plan_two_atom_qutrit(LAM, k=2, k_prime=1)
    t = plan.timings
    assert t.t1 == pytest.approx(24.619188346815492, rel=1e-12)
    assert t.t2 == pytest.approx(math.pi / (4.0 * LAM), rel=1e-12)
    # the drive rotation closes: omega t1 = k pi, omega' t2 = 2 k' pi
    assert t.omega * t.t1 == pytest.approx(2.0 * math.pi, rel=1e-12)
    assert t.omega_prime * t.t2 == pytest.approx(2.0 * math.pi, rel=1e-12)
    # the first pulse puts sin^2(lam t1) = 1/3
    assert math.sin(LAM * t.t1) ** 2 == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_qutrit_plan_validations():
    with pytest.raises(ValueError):
        plan_two_atom_qutrit(LAM, k=3)  # odd
    with pytest.raises(ValueError):
        plan_two_atom_qutrit(LAM, k=0)
    with pytest.raises(ValueError):
        plan_two_atom_qutrit(LAM, k=2, k_prime=0)
    with pytest.raises(ValueError):
        plan_two_atom_qutrit(-LAM)


def test_qutrit_plan_auto_k_hierarchy():
    # with a detuning given, the chosen omega sits at least 10 |delta| up
    plan = plan_two_atom_qutrit(0.05, delta=10.0)
    assert plan.timings.k % 2 == 0
    assert plan.timings.omega >= 10.0 * 10.0
    assert plan.timings.omega_prime >= 10.0 * 10.0


def test_ghz_drive_closure_conditions():
    even = plan_ghz_two_level(4, LAM, n_choice=3)
    ratio = even.timings.omega * even.timings.t1 / math.pi
    assert ratio == pytest.approx(3.0, rel=1e-12)
    odd = plan_ghz_two_level(5, LAM, n_choice=2)
    ratio = odd.timings.omega * odd.timings.t1 / math.pi
    assert ratio == pytest.approx(2.0 * 2 + 0.75, rel=1e-12)


def test_ghz_auto_choice_hierarchy():
    for n_atoms in (4, 5):
        plan = plan_ghz_two_level(n_atoms, 0.05, delta=20.0)
        assert plan.timings.omega >= 10.0 * 20.0


def test_planner_validations():
    with pytest.raises(ValueError):
        plan_ghz_two_level(1, LAM)
    with pytest.raises(ValueError):
        plan_ghz_two_level(4, 0.0)
    with pytest.raises(ValueError):
        plan_ghz_three_level(3, LAM)
    with pytest.raises(ValueError):
        plan_measure_reduce(2, LAM)
    with pytest.raises(ValueError):
        plan_measure_reduce(5, LAM)
    with pytest.raises(ValueError):
        plan_ghz_four_level(3, LAM)


def test_planner_registry_names():
    assert set(PLANNERS) == {
        "two-atom-qutrit", "ghz", "ghz-three-level", "measure-reduce",
        "ghz-four-level",
    }
    for name, planner in PLANNERS.items():
        if name == "two-atom-qutrit":
            assert planner(LAM).name == name
        else:
            assert planner(4, LAM).name == name


# --------------------------------------------------------- stage validation


def test_transfer_matrices():
    swap = swap_ef_matrix(3)
    assert np.array_equal(swap @ np.array([0, 1, 0]), np.array([0, 0, 1]))
    assert np.array_equal(swap @ np.array([1, 0, 0]), np.array([1, 0, 0]))
    with pytest.raises(ValueError):
        swap_ef_matrix(2)
    both = swap_gf_eh_matrix(4)
    assert np.array_equal(both @ np.array([1, 0, 0, 0]), np.array([0, 0, 1, 0]))
    assert np.array_equal(both @ np.array([0, 1, 0, 0]), np.array([0, 0, 0, 1]))
    with pytest.raises(ValueError):
        swap_gf_eh_matrix(3)
    rot = reduce_rotation_matrix()
    assert np.max(np.abs(rot.conj().T @ rot - np.eye(3))) <= 1e-15
    assert rot[:, 0] == pytest.approx(
        [1 / math.sqrt(2), 1 / math.sqrt(10), -math.sqrt(2 / 5)], abs=1e-15
    )


def test_stage_validation():
    with pytest.raises(ValueError):
        LocalTransfer(np.array([[1.0, 1.0], [0.0, 1.0]]), "all")
    with pytest.raises(ValueError):
        Measurement(0, mode="peek")
    with pytest.raises(ValueError):
        Measurement(0, mode="postselect")
    with pytest.raises(ValueError):
        CollectiveDrive(DriveParams(omega=1.0), 0.0, None, LAM)


# ----------------------------------------------------- exact protocol runs


def test_two_atom_qutrit_exact():
    result = run_plan(plan_two_atom_qutrit(LAM))
    branch = result.branch("all")
    assert branch.probability == pytest.approx(1.0, abs=1e-12)
    assert result.branch_fidelity("all") == pytest.approx(1.0, abs=1e-10)


def test_qutrit_first_stage_populations():
    plan = plan_two_atom_qutrit(LAM)
    short = replace(plan, stages=plan.stages[:1])
    state = run_plan(short).branch("all").state
    pops = leg_populations(state, ["gg", "ee", "ge", "eg"])
    assert pops[0] == pytest.approx(2.0 / 3.0, abs=1e-10)
    assert pops[1] == pytest.approx(1.0 / 3.0, abs=1e-10)
    assert pops[2] == pytest.approx(0.0, abs=1e-10)
    assert pops[3] == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("n_atoms", [2, 3, 4, 5])
def test_ghz_two_level_exact(n_atoms):
    result = run_plan(plan_ghz_two_level(n_atoms, LAM))
    assert result.branch_fidelity("all") == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("n_atoms", [3, 4])
def test_ghz_target_from_direct_exponentiation(n_atoms):
    # independent oracle: exponentiate the full generator with expm
    # instead of the factored propagator, then compare amplitudes
    plan = plan_ghz_two_level(n_atoms, LAM)
    space = plan.space
    h = h_effective(space, LAM).matrix + h0_drive(space, plan.timings.omega).matrix
    psi = expm(-1j * plan.timings.t1 * h) @ basis_state(space, "g" * n_atoms).amplitudes
    assert np.max(np.abs(psi - plan.target.amplitudes)) <= 1e-10


@pytest.mark.parametrize("n_atoms", [2, 4])
def test_ghz_three_level_exact(n_atoms):
    result = run_plan(plan_ghz_three_level(n_atoms, LAM))
    assert result.branch_fidelity("all") == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("n_atoms", [2, 4])
def test_ghz_four_level_exact(n_atoms):
    plan = plan_ghz_four_level(n_atoms, LAM)
    result = run_plan(plan)
    assert result.branch_fidelity("all") == pytest.approx(1.0, abs=1e-10)
    legs = [lab * n_atoms for lab in "gefh"]
    assert leg_populations(plan.target, legs) == pytest.approx([0.25] * 4, abs=1e-12)


def test_four_level_target_relative_phase():
    plan = plan_ghz_four_level(4, LAM)
    amps = plan.target.amplitudes
    space = plan.space
    a_e = amps[basis_index(space, "eeee")]
    a_f = amps[basis_index(space, "ffff")]
    # the e and f legs sit at opposite phases
    assert a_e / a_f == pytest.approx(-1.0, abs=1e-12)


def test_three_level_target_structure():
    plan = plan_ghz_three_level(2, LAM)
    amps = plan.target.amplitudes
    space = plan.space
    assert abs(amps[basis_index(space, "gg")]) ** 2 == pytest.approx(0.25, abs=1e-12)
    assert abs(amps[basis_index(space, "ee")]) ** 2 == pytest.approx(0.25, abs=1e-12)
    assert abs(amps[basis_index(space, "ff")]) ** 2 == pytest.approx(0.5, abs=1e-12)


# --------------------------------------------------- measurement reduction


@pytest.mark.parametrize("n_atoms", [4, 6])
def test_measure_reduce_branch_probabilities(n_atoms):
    result = run_plan(plan_measure_reduce(n_atoms, LAM))
    probs = {b.label: b.probability for b in result.branches}
    assert set(probs) == {"g", "e", "f"}
    assert probs["g"] == pytest.approx(0.25, abs=1e-9)
    assert probs["e"] == pytest.approx(0.45, abs=1e-9)
    assert probs["f"] == pytest.approx(0.3, abs=1e-9)
    assert sum(probs.values()) == pytest.approx(1.0, abs=1e-10)
    assert result.branch_fidelity("f") == pytest.approx(1.0, abs=1e-10)


def test_measure_reduce_f_branch_is_three_leg():
    result = run_plan(plan_measure_reduce(4, LAM))
    state = result.branch("f").state
    legs = ["gggf", "eeef", "ffff"]
    assert leg_populations(state, legs) == pytest.approx([1 / 3] * 3, abs=1e-10)


def test_measure_reduce_postselect_mode():
    plan = plan_measure_reduce(4, LAM)
    post = replace(
        plan, stages=plan.stages[:-1] + (Measurement(3, "postselect", outcome=2),)
    )
    result = run_plan(post)
    assert len(result.branches) == 1
    branch = result.branches[0]
    assert branch.label == "f"
    assert branch.probability == pytest.approx(0.3, abs=1e-9)
    assert result.fidelities[0] == pytest.approx(1.0, abs=1e-10)


def test_measure_reduce_permutation_symmetry():
    # the heralded state treats the unmeasured atoms symmetrically
    plan = plan_measure_reduce(4, LAM)
    state = run_plan(plan).branch("f").state
    perm = permutation_op(plan.space, (2, 0, 1, 3)).matrix
    permuted = StateVector(plan.space, perm @ state.amplitudes)
    assert fidelity(permuted, plan.target) == pytest.approx(1.0, abs=1e-10)


def test_sample_outcome_deterministic_and_weighted():
    result = run_plan(plan_measure_reduce(4, LAM))
    assert sample_outcome(result, seed=7) == sample_outcome(result, seed=7)
    draws = [sample_outcome(result, seed=s) for s in range(300)]
    freq_f = draws.count("f") / len(draws)
    assert abs(freq_f - 0.3) < 0.08


# ------------------------------------------------------------ plan algebra


@pytest.mark.parametrize("name", sorted(PLANNERS))
def test_plan_unitary_is_unitary(name):
    planner = PLANNERS[name]
    plan = planner(LAM) if name == "two-atom-qutrit" else planner(4, LAM)
    u = plan_unitary(plan).matrix
    assert np.max(np.abs(u.conj().T @ u - np.eye(u.shape[0]))) <= 1e-10


def test_plan_unitary_matches_run():
    plan = plan_two_atom_qutrit(LAM)
    u = plan_unitary(plan).matrix
    expected = u @ basis_state(plan.space, "gg").amplitudes
    state = run_plan(plan).branch("all").state
    assert np.max(np.abs(state.amplitudes - expected)) <= 1e-12


def test_effective_engine_ignores_attached_mode():
    # a Fock factor rides along untouched: same fidelity, mode unmoved
    plan = plan_two_atom_qutrit(LAM)
    space = plan.space.with_mode(3)
    mode = np.zeros(space.mode_dim, dtype=complex)
    mode[2] = 1.0
    initial = StateVector(
        space, np.kron(basis_state(plan.space, "gg").amplitudes, mode)
    )
    result = run_plan(plan, initial=initial)
    assert result.branch_fidelity("all") == pytest.approx(1.0, abs=1e-13)
    final = result.branch("all").state
    block = final.amplitudes.reshape(space.atoms_dim, space.mode_dim)
    assert np.sum(np.abs(block[:, 2]) ** 2) == pytest.approx(1.0, abs=1e-13)


def test_run_plan_rejects_wrong_initial_type():
    plan = plan_ghz_two_level(2, LAM)
    with pytest.raises(TypeError):
        run_plan(plan, initial=np.zeros(4))


# ------------------------------------------------------------ full engines


def _cavity_params(omega=0.0):
    return DriveParams(g=1.0, delta=10.0, omega=omega)


def test_engine_plan_rate_mismatch_rejected():
    # engine parameters imply lam = 0.05; the plan was built for 0.025
    plan = plan_ghz_two_level(2, 0.025)
    engine = FullCavity(params=_cavity_params(), fock_cutoff=4)
    with pytest.raises(ValueError):
        run_plan(plan, engine=engine)


def test_full_cavity_initial_mode_validation():
    lam = lambda_cavity(1.0, 10.0)
    plan = plan_ghz_two_level(2, lam, delta=10.0)
    bad_fock = FullCavity(params=_cavity_params(), fock_cutoff=4, initial_mode=9)
    with pytest.raises(ValueError):
        run_plan(plan, engine=bad_fock)
    fat_thermal = FullCavity(
        params=_cavity_params(), fock_cutoff=4,
        initial_mode=ThermalSpec.for_nbar(1.0),
    )
    with pytest.raises(ValueError):
        run_plan(plan, engine=fat_thermal)


def test_full_cavity_ghz_close_to_target():
    lam = lambda_cavity(1.0, 10.0)  # 0.05
    plan = plan_ghz_two_level(2, lam, delta=10.0)
    engine = FullCavity(params=_cavity_params(), fock_cutoff=6)
    result = run_plan(plan, engine=engine)
    assert result.branch("all").probability == pytest.approx(1.0, abs=1e-9)
    assert result.branch_fidelity("all") >= 0.95


def test_lindblad_zero_decay_close_to_target():
    lam = lambda_cavity(1.0, 10.0)
    plan = plan_ghz_two_level(2, lam, delta=10.0)
    engine = Lindblad(params=_cavity_params(), decay=DecaySpec(kappa=0.0),
                      fock_cutoff=4)
    result = run_plan(plan, engine=engine)
    assert result.branch("all").probability == pytest.approx(1.0, abs=1e-8)
    assert result.branch_fidelity("all") >= 0.95


# ------------------------------------------------------ population series


def test_drive_population_series_frequency():
    # the co-rotating doubly-excited population oscillates at 2 lam;
    # omega must sit far above delta so the sidebands stay fast
    params = DriveParams(g=1.0, delta=5.0, omega=25.0)
    lam = lambda_cavity(params.g, params.delta)
    series = drive_population_series(params, n_start=0, duration=65.0,
                                     sample_count=700, fock_cutoff=8)
    est = extract_frequency(series)
    assert abs(est - 2.0 * lam) / (2.0 * lam) <= 0.02
