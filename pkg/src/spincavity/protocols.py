"""Staged entanglement protocols and the engines that execute them.

Each planner returns a ProtocolPlan: an ordered list of pulse stages
(collective drives, instantaneous local transfers, a final measurement)
together with the closed-form target state the schedule prepares.

Engines:

* ``Effective`` runs each drive stage through the factored propagator
  exp(-i H0 t) exp(-i 2 lam Sx^2 t), which factorizes from the mode and
  is therefore exactly photon-number independent.
* ``FullCavity`` integrates the driven interaction-picture Hamiltonian
  (or its slow frame) on an attached Fock mode.
* ``FullIon`` integrates the sideband Hamiltonian (displacement series
  or its first-order form) on the attached vibrational mode.  The ion
  system has no separate classical drive, so the rotating-frame Rabi
  bookkeeping of the stage is not part of the ion generator; with the
  planner's even-k timing both readings give the same target.
* ``Lindblad`` propagates a density matrix under the cavity Hamiltonian
  with cavity decay.

Drive stages of one plan run at consecutive absolute times so that the
e^{i delta t} drive phases stay continuous across stage boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .algebra import (
    DensityMatrix,
    NormDriftError,
    Operator,
    SpaceDescriptor,
    StateVector,
    LEVEL_LABELS,
    basis_index,
    basis_state,
    embed_atom_op,
    make_space,
)
from .analysis import TimeSeries
from .dynamics import (
    DecaySpec,
    IntegratorConfig,
    ThermalSpec,
    apply_atomic,
    evolve_lindblad,
    evolve_td_multi,
    propagator_u,
    thermal_state,
)
from .hamiltonians import (
    DriveParams,
    FrameTag,
    interaction_terms,
    ion_terms,
    lambda_cavity,
    lambda_ion,
    slow_terms,
)

# ---------------------------------------------------------------------------
# stages and plans


@dataclass(frozen=True)
class CollectiveDrive:
    """A collective-interaction pulse.

    params.omega is the classical Rabi frequency solved by the planner;
    lam is the effective collective rate the timing was derived from.
    Engines supply the remaining physical parameters (g, delta, eta, ...)
    and must agree with lam.
    """

    params: DriveParams
    duration: float
    frame: FrameTag
    lam: float

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")


@dataclass(frozen=True)
class LocalTransfer:
    """An instantaneous local unitary on one atom or on all atoms."""

    matrix: np.ndarray
    atoms: object  # "all" or an atom index
    name: str = ""

    def __post_init__(self):
        mat = np.ascontiguousarray(self.matrix, dtype=complex)
        dev = np.max(np.abs(mat.conj().T @ mat - np.eye(mat.shape[0])))
        if dev > 1e-12:
            raise ValueError(f"transfer matrix is not unitary: deviation {dev:.3e}")
        object.__setattr__(self, "matrix", mat)


@dataclass(frozen=True)
class Measurement:
    """Projective level measurement of one atom.

    mode "enumerate" keeps every outcome branch with its exact
    probability; mode "postselect" keeps only ``outcome``.
    """

    atom_index: int
    mode: str = "enumerate"
    outcome: int | None = None

    def __post_init__(self):
        if self.mode not in ("enumerate", "postselect"):
            raise ValueError("mode must be 'enumerate' or 'postselect'")
        if self.mode == "postselect" and self.outcome is None:
            raise ValueError("postselect mode needs an outcome level")


@dataclass(frozen=True)
class Timings:
    """The timing solution actually used by a plan."""

    t1: float
    t2: float | None
    omega: float
    omega_prime: float | None
    k: int
    k_prime: int | None


@dataclass(frozen=True)
class ProtocolPlan:
    name: str
    stages: tuple
    space: SpaceDescriptor
    target: StateVector
    timings: Timings


@dataclass(frozen=True)
class Branch:
    label: str
    probability: float
    state: object  # StateVector | DensityMatrix | None for empty branches


@dataclass(frozen=True)
class ProtocolResult:
    branches: tuple
    fidelities: tuple
    timings: Timings
    diagnostics: dict

    def branch(self, label: str) -> Branch:
        for b in self.branches:
            if b.label == label:
                return b
        raise KeyError(f"no branch {label!r}")

    def branch_fidelity(self, label: str) -> float:
        for b, f in zip(self.branches, self.fidelities):
            if b.label == label:
                return f
        raise KeyError(f"no branch {label!r}")


# ---------------------------------------------------------------------------
# local transfer matrices


def swap_ef_matrix(atom_dim: int) -> np.ndarray:
    """Permutation exchanging |e> and |f> (moves e-population to f)."""
    if atom_dim < 3:
        raise ValueError("swap e<->f needs at least 3 levels")
    mat = np.eye(atom_dim, dtype=complex)
    mat[[1, 2]] = mat[[2, 1]]
    return mat


def swap_gf_eh_matrix(atom_dim: int) -> np.ndarray:
    """Permutation exchanging g<->f and e<->h."""
    if atom_dim != 4:
        raise ValueError("swap g<->f, e<->h needs 4 levels")
    mat = np.eye(4, dtype=complex)
    mat[[0, 2]] = mat[[2, 0]]
    mat[[1, 3]] = mat[[3, 1]]
    return mat


def reduce_rotation_matrix() -> np.ndarray:
    """The 3x3 pre-measurement rotation of the reduction step.

    Columns are the images of |g>, |e>, |f>:
      |g> -> (|g> + |e>)/sqrt(2) ... first column (1/sqrt2, 1/sqrt10, -sqrt(2/5))
    """
    s2, s10, s5 = math.sqrt(2.0), math.sqrt(10.0), math.sqrt(5.0)
    return np.array(
        [
            [1.0 / s2, -1.0 / s2, 0.0],
            [1.0 / s10, 1.0 / s10, 2.0 / s5],
            [-math.sqrt(2.0 / 5.0), -math.sqrt(2.0 / 5.0), 1.0 / s5],
        ],
        dtype=complex,
    )


# ---------------------------------------------------------------------------
# planners

ARCSIN_1_SQRT3 = math.asin(1.0 / math.sqrt(3.0))


def _drive_params(omega: float) -> DriveParams:
    return DriveParams(omega=omega)


def _pick_k_even(t: float, delta: float | None) -> int:
    """Smallest positive even k with omega = k pi / t >= 10 |delta|."""
    if delta is None or delta == 0:
        return 2
    k = math.ceil(10.0 * abs(delta) * t / math.pi)
    return k + (k % 2) if k > 0 else 2


def _pick_k_any(t: float, delta: float | None, base: int = 1) -> int:
    """Smallest positive integer k with omega = k pi / t >= 10 |delta|."""
    if delta is None or delta == 0:
        return base
    return max(base, math.ceil(10.0 * abs(delta) * t / math.pi))


def plan_two_atom_qutrit(lam: float, k: int | None = None, k_prime: int | None = None,
                         delta: float | None = None) -> ProtocolPlan:
    """Two qutrits to the three-leg maximally entangled state.

    Stage 1 drives for t1 = arcsin(1/sqrt(3)) / lam with omega = k pi / t1
    (k even, so the drive rotation closes with the +cos branch), then a
    local e -> f transfer parks the e-population, and stage 2 drives for
    t2 = pi / (4 lam) with omega' = 2 k' pi / t2.

    Target: e^{-i lam t1} (1/sqrt3) (e^{-i lam t2}|gg> - i e^{-i lam t2}|ee> - i|ff>).

    When ``delta`` is given, default k (k') is the smallest even (any)
    integer putting omega at or above 10 |delta|.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    t1 = ARCSIN_1_SQRT3 / lam
    t2 = math.pi / (4.0 * lam)
    if k is None:
        k = _pick_k_even(t1, delta)
    if k <= 0 or k % 2 != 0:
        raise ValueError("k must be a positive even integer")
    if k_prime is None:
        k_prime = _pick_k_any(t2 / 2.0, delta)  # omega' = 2 k' pi / t2 = k' pi / (t2/2)
    if k_prime <= 0:
        raise ValueError("k_prime must be a positive integer")
    omega = k * math.pi / t1
    omega_prime = 2.0 * k_prime * math.pi / t2
    space = make_space(2, 3, 0, no_mode=True)

    amps = np.zeros(space.dim, dtype=complex)
    phase = np.exp(-1j * lam * t1) / math.sqrt(3.0)
    amps[basis_index(space, "gg")] = phase * np.exp(-1j * lam * t2)
    amps[basis_index(space, "ee")] = phase * (-1j) * np.exp(-1j * lam * t2)
    amps[basis_index(space, "ff")] = phase * (-1j)
    target = StateVector(space, amps)

    stages = (
        CollectiveDrive(_drive_params(omega), t1, FrameTag.EFFECTIVE, lam),
        LocalTransfer(swap_ef_matrix(3), "all", "swap_ef"),
        CollectiveDrive(_drive_params(omega_prime), t2, FrameTag.EFFECTIVE, lam),
    )
    timings = Timings(t1, t2, omega, omega_prime, k, k_prime)
    return ProtocolPlan("two-atom-qutrit", stages, space, target, timings)


def _ghz_sign(n_atoms: int) -> float:
    if n_atoms % 2 == 0:
        return (-1.0) ** (n_atoms // 2)
    return (-1.0) ** ((n_atoms - 1) // 2)


def _ghz_drive(n_atoms: int, lam: float, n_choice: int | None,
               delta: float | None) -> tuple[CollectiveDrive, int]:
    """The single GHZ drive: lam t = pi/4 with the parity-dependent
    omega condition (omega t = n pi for even N, (2n + 3/4) pi for odd N)."""
    t = math.pi / (4.0 * lam)
    if n_atoms % 2 == 0:
        n = n_choice if n_choice is not None else _pick_k_any(t, delta)
        if n <= 0:
            raise ValueError("n_choice must be a positive integer")
        omega = n * math.pi / t
    else:
        if n_choice is not None:
            n = n_choice
        elif delta is None or delta == 0:
            n = 1
        else:
            n = max(1, math.ceil((10.0 * abs(delta) * t / math.pi - 0.75) / 2.0))
        if n < 0:
            raise ValueError("n_choice must be non-negative")
        omega = (2.0 * n + 0.75) * math.pi / t
    return CollectiveDrive(_drive_params(omega), t, FrameTag.EFFECTIVE, lam), n


def plan_ghz_two_level(n_atoms: int, lam: float, n_choice: int | None = None,
                       delta: float | None = None) -> ProtocolPlan:
    """N qubits to a two-leg GHZ state with one collective pulse.

    Even N target: (e^{-i pi/4}|g..g> + e^{+i pi/4} (-1)^{N/2} |e..e>)/sqrt2.
    Odd N target: e^{-i 7 pi/8} (e^{-i pi/4}|g..g>
                  + e^{+i pi/4} (-1)^{(N-1)/2} |e..e>)/sqrt2.

    The odd-N relative sign (-1)^{(N-1)/2} and the e-leg ket are fixed by
    direct evolution (checked for N = 1, 3, 5), not read off a printed
    formula; see the tests.
    """
    if n_atoms < 2:
        raise ValueError("need at least 2 atoms")
    if lam <= 0:
        raise ValueError("lam must be positive")
    drive, n = _ghz_drive(n_atoms, lam, n_choice, delta)
    space = make_space(n_atoms, 2, 0, no_mode=True)

    amps = np.zeros(space.dim, dtype=complex)
    sign = _ghz_sign(n_atoms)
    overall = 1.0 if n_atoms % 2 == 0 else np.exp(-1j * 7.0 * math.pi / 8.0)
    amps[basis_index(space, "g" * n_atoms)] = overall * np.exp(-1j * math.pi / 4.0) / math.sqrt(2.0)
    amps[basis_index(space, "e" * n_atoms)] = overall * np.exp(1j * math.pi / 4.0) * sign / math.sqrt(2.0)
    target = StateVector(space, amps)

    timings = Timings(drive.duration, None, drive.params.omega, None, n, None)
    return ProtocolPlan("ghz", (drive,), space, target, timings)


def plan_ghz_three_level(n_atoms: int, lam: float, n_choice: int | None = None,
                         delta: float | None = None) -> ProtocolPlan:
    """Even-N qutrits to the three-leg GHZ state.

    Drive, park the e-leg in f, drive again.  Target amplitudes:
    (1/2) e^{-i pi/2} |g..g> + (1/2) s |e..e> + (1/sqrt2) e^{i pi/4} s |f..f>
    with s = (-1)^{N/2}.
    """
    if n_atoms < 2 or n_atoms % 2 != 0:
        raise ValueError("n_atoms must be even and at least 2")
    if lam <= 0:
        raise ValueError("lam must be positive")
    drive1, n1 = _ghz_drive(n_atoms, lam, n_choice, delta)
    drive2, n2 = _ghz_drive(n_atoms, lam, n_choice, delta)
    space = make_space(n_atoms, 3, 0, no_mode=True)

    sign = _ghz_sign(n_atoms)
    amps = np.zeros(space.dim, dtype=complex)
    amps[basis_index(space, "g" * n_atoms)] = 0.5 * np.exp(-1j * math.pi / 2.0)
    amps[basis_index(space, "e" * n_atoms)] = 0.5 * sign
    amps[basis_index(space, "f" * n_atoms)] = np.exp(1j * math.pi / 4.0) * sign / math.sqrt(2.0)
    target = StateVector(space, amps)

    stages = (drive1, LocalTransfer(swap_ef_matrix(3), "all", "swap_ef"), drive2)
    timings = Timings(drive1.duration, drive2.duration, drive1.params.omega,
                      drive2.params.omega, n1, n2)
    return ProtocolPlan("ghz-three-level", stages, space, target, timings)


def plan_measure_reduce(n_atoms: int, lam: float, n_choice: int | None = None,
                        delta: float | None = None) -> ProtocolPlan:
    """Three-level GHZ on even N >= 4 atoms, then rotate and measure the
    last atom.  The f outcome (probability exactly 0.3) heralds a
    three-leg GHZ state on the remaining N-1 atoms.

    The plan target is the f-branch state: equal moduli 1/sqrt3 on
    |g..g>, |e..e>, |f..f> of the first N-1 atoms, the measured atom
    left in |f>.
    """
    if n_atoms < 4 or n_atoms % 2 != 0:
        raise ValueError("n_atoms must be even and at least 4")
    base = plan_ghz_three_level(n_atoms, lam, n_choice, delta)
    space = base.space
    last = n_atoms - 1

    sign = _ghz_sign(n_atoms)
    amps = np.zeros(space.dim, dtype=complex)
    norm = 1.0 / math.sqrt(3.0)
    amps[basis_index(space, "g" * (n_atoms - 1) + "f")] = -norm * np.exp(-1j * math.pi / 2.0)
    amps[basis_index(space, "e" * (n_atoms - 1) + "f")] = -norm * sign
    amps[basis_index(space, "f" * n_atoms)] = norm * np.exp(1j * math.pi / 4.0) * sign
    target = StateVector(space, amps)

    stages = base.stages + (
        LocalTransfer(reduce_rotation_matrix(), last, "reduce_rotation"),
        Measurement(last, "enumerate"),
    )
    return ProtocolPlan("measure-reduce", stages, space, target, base.timings)


def plan_ghz_four_level(n_atoms: int, lam: float, n_choice: int | None = None,
                        delta: float | None = None) -> ProtocolPlan:
    """Even-N four-level atoms to the four-leg GHZ state.

    Three-level schedule, then swap (g<->f, e<->h) and drive once more.
    Target: (1/2)[s|g..g> + e^{i pi/2}|e..e> + e^{-i pi/2}|f..f> + s|h..h>]
    with s = (-1)^{N/2}.
    """
    if n_atoms < 2 or n_atoms % 2 != 0:
        raise ValueError("n_atoms must be even and at least 2")
    if lam <= 0:
        raise ValueError("lam must be positive")
    drives = [_ghz_drive(n_atoms, lam, n_choice, delta) for _ in range(3)]
    space = make_space(n_atoms, 4, 0, no_mode=True)

    sign = _ghz_sign(n_atoms)
    amps = np.zeros(space.dim, dtype=complex)
    amps[basis_index(space, "g" * n_atoms)] = 0.5 * sign
    amps[basis_index(space, "e" * n_atoms)] = 0.5 * np.exp(1j * math.pi / 2.0)
    amps[basis_index(space, "f" * n_atoms)] = 0.5 * np.exp(-1j * math.pi / 2.0)
    amps[basis_index(space, "h" * n_atoms)] = 0.5 * sign
    target = StateVector(space, amps)

    stages = (
        drives[0][0],
        LocalTransfer(swap_ef_matrix(4), "all", "swap_ef"),
        drives[1][0],
        LocalTransfer(swap_gf_eh_matrix(4), "all", "swap_gf_eh"),
        drives[2][0],
    )
    timings = Timings(drives[0][0].duration, drives[1][0].duration,
                      drives[0][0].params.omega, drives[1][0].params.omega,
                      drives[0][1], drives[1][1])
    return ProtocolPlan("ghz-four-level", stages, space, target, timings)


PLANNERS = {
    "two-atom-qutrit": plan_two_atom_qutrit,
    "ghz": plan_ghz_two_level,
    "ghz-three-level": plan_ghz_three_level,
    "measure-reduce": plan_measure_reduce,
    "ghz-four-level": plan_ghz_four_level,
}


# ---------------------------------------------------------------------------
# engines


@dataclass(frozen=True)
class Effective:
    """Factored-propagator engine: exact, photon-number independent."""

    integrator: IntegratorConfig | None = None


@dataclass(frozen=True)
class FullCavity:
    """Integrates the driven cavity Hamiltonian on an attached Fock mode.

    initial_mode is a Fock number or a ThermalSpec; frame selects the
    interaction picture (default) or the slow frame.
    """

    params: DriveParams
    fock_cutoff: int = 12
    initial_mode: object = 0
    frame: FrameTag = FrameTag.INTERACTION_PICTURE
    integrator: IntegratorConfig | None = None

    def lam(self) -> float:
        return lambda_cavity(self.params.g, self.params.delta)


@dataclass(frozen=True)
class FullIon:
    """Integrates the sideband Hamiltonian on the vibrational mode."""

    params: DriveParams
    fock_cutoff: int = 10
    initial_mode: object = 0
    frame: FrameTag = FrameTag.ION_INTERACTION
    integrator: IntegratorConfig | None = None

    def lam(self) -> float:
        return lambda_ion(self.params.omega, self.params.eta, self.params.delta)


@dataclass(frozen=True)
class Lindblad:
    """Density-matrix engine: cavity Hamiltonian plus cavity decay."""

    params: DriveParams
    decay: DecaySpec
    fock_cutoff: int = 12
    initial_mode: object = 0
    integrator: IntegratorConfig | None = None

    def lam(self) -> float:
        return lambda_cavity(self.params.g, self.params.delta)


def _check_lam(engine_lam: float, stage_lam: float):
    if abs(engine_lam - stage_lam) > 1e-9 * max(1.0, abs(stage_lam)):
        raise ValueError(
            f"engine effective coupling {engine_lam!r} does not match the "
            f"plan's {stage_lam!r}; replan with the engine's parameters"
        )


def _transfer_full(space: SpaceDescriptor, stage: LocalTransfer) -> np.ndarray:
    """Atoms-only matrix of a local transfer."""
    if stage.atoms == "all":
        mat = np.eye(1, dtype=complex)
        for _ in range(space.atom_count):
            mat = np.kron(mat, stage.matrix)
        return mat
    return embed_atom_op(
        make_space(space.atom_count, space.atom_dim, 0, no_mode=True),
        int(stage.atoms),
        stage.matrix,
    ).matrix


def _stage_config(engine, merged: DriveParams) -> IntegratorConfig:
    cfg = engine.integrator or IntegratorConfig()
    resolved = cfg.resolved_max_step(merged)
    return replace(cfg, max_step=resolved)


def run_plan(plan: ProtocolPlan, initial=None, engine=None) -> ProtocolResult:
    """Execute every stage of a plan and collect measurement branches.

    initial defaults to all atoms in |g> (times the engine's mode
    preparation for mode-attached engines).  Returns a ProtocolResult
    whose fidelities compare each branch against plan.target on the
    atomic factor.
    """
    engine = engine if engine is not None else Effective()
    if isinstance(engine, Lindblad):
        return _run_lindblad(plan, initial, engine)
    return _run_pure(plan, initial, engine)


def _initial_columns(plan: ProtocolPlan, initial, engine):
    """Resolve (space_run, columns (dim, k), weights (k,)) for pure engines."""
    if isinstance(engine, Effective):
        if initial is None:
            space_run = plan.space
            cols = basis_state(space_run, "g" * plan.space.atom_count).amplitudes[:, None]
            return space_run, cols, np.ones(1)
        if isinstance(initial, StateVector):
            return initial.space, initial.amplitudes[:, None].copy(), np.ones(1)
        raise TypeError("Effective engine takes a StateVector initial (or None)")

    space_run = plan.space.with_mode(engine.fock_cutoff)
    if isinstance(initial, StateVector) and not initial.space.no_mode:
        if initial.space != space_run:
            raise ValueError("initial state does not match the engine's space")
        return space_run, initial.amplitudes[:, None].copy(), np.ones(1)
    if initial is None:
        atoms = basis_state(plan.space, "g" * plan.space.atom_count).amplitudes
    elif isinstance(initial, StateVector) and initial.space.no_mode:
        atoms = initial.amplitudes
    else:
        raise TypeError("pure engines take a StateVector initial (or None)")

    mode_prep = engine.initial_mode
    nm = space_run.mode_dim
    if isinstance(mode_prep, ThermalSpec):
        if mode_prep.cutoff > engine.fock_cutoff:
            raise ValueError("thermal cutoff exceeds the engine's fock_cutoff")
        weights = mode_prep.probabilities()
        ns = np.arange(mode_prep.cutoff + 1)
    else:
        n = int(mode_prep)
        if not 0 <= n < nm:
            raise ValueError(f"initial Fock level {n} outside mode dimension {nm}")
        weights = np.ones(1)
        ns = np.array([n])
    cols = np.zeros((space_run.dim, len(ns)), dtype=complex)
    for j, n in enumerate(ns):
        mode = np.zeros(nm, dtype=complex)
        mode[n] = 1.0
        cols[:, j] = np.kron(atoms, mode)
    return space_run, cols, weights


def _drive_terms(space_run: SpaceDescriptor, stage: CollectiveDrive, engine):
    """Terms and merged params for one drive stage under a full engine."""
    if isinstance(engine, FullIon):
        merged = engine.params
        _check_lam(engine.lam(), stage.lam)
        frame = engine.frame
        if frame not in (FrameTag.ION_INTERACTION, FrameTag.ION_LAMB_DICKE):
            raise ValueError(f"FullIon cannot run frame {frame}")
        return ion_terms(space_run, merged, frame), merged
    merged = replace(engine.params, omega=stage.params.omega)
    _check_lam(engine.lam(), stage.lam)
    if engine.frame == FrameTag.SLOW_FRAME:
        # the slow generator carries no drive oscillation, so the step
        # cap only needs to resolve the detuning
        return slow_terms(space_run, merged), replace(merged, omega=0.0)
    if engine.frame == FrameTag.INTERACTION_PICTURE:
        return interaction_terms(space_run, merged), merged
    raise ValueError(f"cavity engine cannot run frame {engine.frame}")


def _run_pure(plan: ProtocolPlan, initial, engine) -> ProtocolResult:
    space_run, cols, weights = _initial_columns(plan, initial, engine)
    branches = [{"label": "", "cols": cols}]
    t_abs = 0.0
    diagnostics: dict = {"engine": type(engine).__name__}

    for stage in plan.stages:
        if isinstance(stage, CollectiveDrive):
            if isinstance(engine, Effective):
                u = propagator_u(plan.space, stage.lam, stage.params.omega,
                                 stage.duration).matrix
                for br in branches:
                    br["cols"] = _apply_atoms(space_run, u, br["cols"])
            else:
                terms, merged = _drive_terms(space_run, stage, engine)
                config = _stage_config(engine, merged)
                for br in branches:
                    norms = np.linalg.norm(br["cols"], axis=0)
                    out = evolve_td_multi(terms, space_run, br["cols"], t_abs,
                                          t_abs + stage.duration, config)
                    br["cols"] = _repair_norms(out, norms)
            t_abs += stage.duration
        elif isinstance(stage, LocalTransfer):
            u = _transfer_full(space_run, stage)
            for br in branches:
                br["cols"] = _apply_atoms(space_run, u, br["cols"])
        elif isinstance(stage, Measurement):
            branches = _measure_pure(space_run, branches, stage)
        else:
            raise TypeError(f"unknown stage {stage!r}")

    out_branches = []
    out_fids = []
    target = plan.target
    for br in branches:
        cols = br["cols"]
        col_norms2 = np.sum(np.abs(cols) ** 2, axis=0)
        prob = float(np.dot(weights, col_norms2))
        state, fid = _branch_state_fidelity(space_run, cols, weights, prob, target)
        out_branches.append(Branch(br["label"] or "all", prob, state))
        out_fids.append(fid)
    diagnostics["absolute_duration"] = t_abs
    return ProtocolResult(tuple(out_branches), tuple(out_fids), plan.timings, diagnostics)


def _apply_atoms(space: SpaceDescriptor, u_atoms: np.ndarray, cols: np.ndarray) -> np.ndarray:
    out = np.empty_like(cols)
    for j in range(cols.shape[1]):
        out[:, j] = apply_atomic(space, u_atoms, cols[:, j])
    return out


def _repair_norms(cols: np.ndarray, norms_before: np.ndarray) -> np.ndarray:
    norms_after = np.linalg.norm(cols, axis=0)
    out = cols.copy()
    for j in range(cols.shape[1]):
        before = norms_before[j]
        after = norms_after[j]
        if before == 0:
            continue
        drift = abs(after - before) / before
        if drift > 1e-6:
            raise NormDriftError(f"column norm drifted by {drift:.3e}")
        out[:, j] *= before / after
    return out


def _measure_pure(space: SpaceDescriptor, branches, stage: Measurement):
    outcomes = range(space.atom_dim) if stage.mode == "enumerate" else [stage.outcome]
    new_branches = []
    for br in branches:
        cols3 = br["cols"].reshape(space.atoms_dim, space.mode_dim, -1)
        for level in outcomes:
            mask = _atom_level_mask(space, stage.atom_index, level)
            sel = np.zeros_like(cols3)
            sel[mask] = cols3[mask]
            new_branches.append({
                "label": br["label"] + LEVEL_LABELS[level],
                "cols": sel.reshape(br["cols"].shape),
            })
    return new_branches


def _atom_level_mask(space: SpaceDescriptor, atom_index: int, level: int) -> np.ndarray:
    idx = np.arange(space.atoms_dim)
    shift = space.atom_dim ** (space.atom_count - 1 - atom_index)
    return (idx // shift) % space.atom_dim == level


def _branch_state_fidelity(space_run, cols, weights, prob, target):
    """Normalized branch state plus its fidelity against the atomic target."""
    if prob <= 1e-30:
        return None, 0.0
    dim, k = cols.shape
    t = target.amplitudes
    overlap2 = 0.0
    for j in range(k):
        block = cols[:, j].reshape(space_run.atoms_dim, space_run.mode_dim)
        proj = t.conj() @ block
        overlap2 += float(weights[j] * np.sum(np.abs(proj) ** 2))
    fid = min(1.0, overlap2 / prob)
    if k == 1:
        state = StateVector(space_run, cols[:, 0] / np.linalg.norm(cols[:, 0]))
    else:
        rho = np.zeros((dim, dim), dtype=complex)
        for j in range(k):
            rho += weights[j] * np.outer(cols[:, j], cols[:, j].conj())
        state = DensityMatrix(space_run, rho / prob)
    return state, fid


def _run_lindblad(plan: ProtocolPlan, initial, engine: Lindblad) -> ProtocolResult:
    space_run = plan.space.with_mode(engine.fock_cutoff)
    if initial is None:
        atoms = None
    elif isinstance(initial, StateVector) and initial.space.no_mode:
        atoms = initial
    elif isinstance(initial, DensityMatrix):
        if initial.space != space_run:
            raise ValueError("initial density matrix does not match the engine's space")
        atoms = None
    else:
        raise TypeError("Lindblad engine takes an atoms-only StateVector, "
                        "a full-space DensityMatrix, or None")

    if isinstance(initial, DensityMatrix):
        rho = initial
    else:
        mode_prep = engine.initial_mode
        if isinstance(mode_prep, ThermalSpec):
            rho = thermal_state(space_run, mode_prep, atoms)
        else:
            amps = (atoms or basis_state(plan.space, "g" * plan.space.atom_count)).amplitudes
            mode = np.zeros(space_run.mode_dim, dtype=complex)
            mode[int(mode_prep)] = 1.0
            full = np.kron(amps, mode)
            rho = DensityMatrix(space_run, np.outer(full, full.conj()))

    branches = [{"label": "", "mat": rho.matrix, "prob": 1.0}]
    t_abs = 0.0
    for stage in plan.stages:
        if isinstance(stage, CollectiveDrive):
            merged = replace(engine.params, omega=stage.params.omega)
            _check_lam(engine.lam(), stage.lam)
            terms = interaction_terms(space_run, merged)
            config = _stage_config(engine, merged)
            for br in branches:
                if br["prob"] <= 1e-30:
                    continue
                dm = DensityMatrix(space_run, br["mat"] / br["prob"])
                out = evolve_lindblad(terms, engine.decay, dm, t_abs,
                                      t_abs + stage.duration, config)
                br["mat"] = out.matrix * br["prob"]
            t_abs += stage.duration
        elif isinstance(stage, LocalTransfer):
            u = _transfer_full(space_run, stage)
            u_full = np.kron(u, np.eye(space_run.mode_dim))
            for br in branches:
                br["mat"] = u_full @ br["mat"] @ u_full.conj().T
        elif isinstance(stage, Measurement):
            new_branches = []
            outcomes = (range(space_run.atom_dim) if stage.mode == "enumerate"
                        else [stage.outcome])
            for br in branches:
                for level in outcomes:
                    mask = np.repeat(_atom_level_mask(space_run, stage.atom_index, level),
                                     space_run.mode_dim)
                    sel = br["mat"].copy()
                    sel[~mask, :] = 0.0
                    sel[:, ~mask] = 0.0
                    new_branches.append({
                        "label": br["label"] + LEVEL_LABELS[level],
                        "mat": sel,
                        "prob": float(np.trace(sel).real),
                    })
            branches = new_branches
        else:
            raise TypeError(f"unknown stage {stage!r}")

    out_branches = []
    out_fids = []
    t = plan.target.amplitudes
    for br in branches:
        prob = float(np.trace(br["mat"]).real)
        if prob <= 1e-30:
            out_branches.append(Branch(br["label"] or "all", max(prob, 0.0), None))
            out_fids.append(0.0)
            continue
        mat = br["mat"] / prob
        mat = 0.5 * (mat + mat.conj().T)
        state = DensityMatrix(space_run, mat)
        # <t| rho_atoms |t> without forming the reduced matrix
        r4 = mat.reshape(space_run.atoms_dim, space_run.mode_dim,
                         space_run.atoms_dim, space_run.mode_dim)
        red = np.einsum("ambm->ab", r4)
        fid = float(min(1.0, max(0.0, (t.conj() @ red @ t).real)))
        out_branches.append(Branch(br["label"] or "all", prob, state))
        out_fids.append(fid)
    diagnostics = {"engine": "Lindblad", "absolute_duration": t_abs}
    return ProtocolResult(tuple(out_branches), tuple(out_fids), plan.timings, diagnostics)


def plan_unitary(plan: ProtocolPlan) -> Operator:
    """Compose the unitary stages (drives and transfers) of a plan on the
    atomic factor, skipping measurements."""
    dim = plan.space.atoms_dim
    u = np.eye(dim, dtype=complex)
    for stage in plan.stages:
        if isinstance(stage, CollectiveDrive):
            u = propagator_u(plan.space, stage.lam, stage.params.omega,
                             stage.duration).matrix @ u
        elif isinstance(stage, LocalTransfer):
            u = _transfer_full(plan.space, stage) @ u
    return Operator(plan.space, u)


def sample_outcome(result: ProtocolResult, seed: int) -> str:
    """Draw one measurement outcome label; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    labels = [b.label for b in result.branches]
    probs = np.array([max(b.probability, 0.0) for b in result.branches])
    probs = probs / probs.sum()
    return str(rng.choice(labels, p=probs))


def drive_population_series(params: DriveParams, n_start: int, duration: float,
                            sample_count: int = 1200, fock_cutoff: int = 10,
                            atom_count: int = 2,
                            config: IntegratorConfig | None = None) -> TimeSeries:
    """Population of |e..e> (any Fock level) along a full-cavity drive,
    read in the frame co-rotating with the classical drive.

    Starting from |g..g, n>, the co-rotating population oscillates at
    twice the effective collective rate, 2 lam = g^2/delta, with only a
    weak dependence on n; this is the observable behind the effective
    model's Rabi frequency and its photon-number independence.
    """
    space = make_space(atom_count, 2, fock_cutoff)
    terms = interaction_terms(space, params)
    config = config or IntegratorConfig()
    config = replace(config, max_step=config.resolved_max_step(params))
    psi0 = basis_state(space, "g" * atom_count, n_start).amplitudes[:, None]
    times = np.linspace(0.0, duration, sample_count)
    traj = evolve_td_multi(terms, space, psi0, 0.0, duration, config, t_eval=times)

    e_all = basis_index(space.atoms_only(), "e" * atom_count, 0)
    omega = params.omega
    values = np.empty(sample_count)
    for i, t in enumerate(times):
        # single-atom co-rotation exp(+i H0 t): cos on the diagonal,
        # +i sin off-diagonal in the g/e basis
        c, s = math.cos(omega * t), math.sin(omega * t)
        r1 = np.array([[c, 1j * s], [1j * s, c]])
        r = np.eye(1)
        for _ in range(atom_count):
            r = np.kron(r, r1)
        block = traj[i][:, 0].reshape(space.atoms_dim, space.mode_dim)
        rotated = r @ block
        values[i] = float(np.sum(np.abs(rotated[e_all, :]) ** 2))
    return TimeSeries(times, values)
