"""Propagators: Schroedinger integration, matrix exponentials, the
factored drive/effective propagator, a Lindblad master-equation solver,
and thermal-state preparation.

Numerical policy:

* Time-dependent integration uses an adaptive 8th-order Runge-Kutta
  method (DOP853) with tight tolerances and a step cap tied to the
  fastest drive frequency, so the e^{+-2 i omega t} sidebands are never
  aliased.
* After every propagation the state norm (or trace) is checked: drift
  up to 1e-6 is repaired by renormalizing, anything larger raises
  NormDriftError as an integrator failure.
* Propagation on spaces with a mode checks Fock-truncation leakage via
  algebra.check_leakage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.linalg import eigh, expm

from .algebra import (
    DensityMatrix,
    NormDriftError,
    Operator,
    SpaceDescriptor,
    StateVector,
    boson_ops,
    check_leakage,
    check_leakage_dm,
    collective_sx,
)
from .hamiltonians import DriveParams, TermList

#: norm/trace drift beyond this is treated as an integrator failure;
#: smaller drift is repaired by renormalizing
NORM_HARD = 1e-6


@dataclass(frozen=True)
class IntegratorConfig:
    """Adaptive-integrator settings.

    max_step defaults to 2 pi / (20 * omega_max), where omega_max is the
    fastest angular frequency of the active stage,
    max(2 omega, |delta|, g, nu); pass an explicit value to override, or
    leave it None in contexts without a known stage (the solver then
    chooses its own steps).
    """

    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_step: float | None = None

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_step is not None and self.max_step <= 0:
            raise ValueError("max_step must be positive")

    def resolved_max_step(self, params: DriveParams | None) -> float | None:
        if self.max_step is not None:
            return self.max_step
        if params is None:
            return None
        return default_max_step(params)


def default_max_step(params: DriveParams) -> float | None:
    """Step cap 2 pi / (20 omega_max) for the stage's fastest frequency."""
    omega_max = max(2.0 * params.omega, abs(params.delta), params.g, params.nu)
    if omega_max == 0.0:
        return None
    return 2.0 * math.pi / (20.0 * omega_max)


@dataclass(frozen=True)
class ThermalSpec:
    """Bose-Einstein mode preparation: p_n = nbar^n / (1 + nbar)^(n+1).

    The cutoff must leave a raw tail mass below 1e-8; the distribution
    is NOT renormalized after truncation, so truncation error shows up
    as a trace deficit instead of being hidden.
    """

    nbar: float
    cutoff: int

    TAIL_TOL = 1e-8

    def __post_init__(self):
        if self.nbar < 0:
            raise ValueError("nbar must be non-negative")
        if self.cutoff < 0:
            raise ValueError("cutoff must be non-negative")
        tail = self.tail_mass()
        if tail >= self.TAIL_TOL:
            raise ValueError(
                f"thermal tail mass {tail:.3e} beyond cutoff {self.cutoff} "
                f"exceeds {self.TAIL_TOL:.0e}; raise the cutoff"
            )

    def probabilities(self) -> np.ndarray:
        n = np.arange(self.cutoff + 1)
        if self.nbar == 0:
            probs = np.zeros(self.cutoff + 1)
            probs[0] = 1.0
            return probs
        ratio = self.nbar / (1.0 + self.nbar)
        return ratio**n / (1.0 + self.nbar)

    def tail_mass(self) -> float:
        """Raw probability mass above the cutoff: (nbar/(1+nbar))^(cutoff+1)."""
        if self.nbar == 0:
            return 0.0
        return (self.nbar / (1.0 + self.nbar)) ** (self.cutoff + 1)

    @classmethod
    def for_nbar(cls, nbar: float, tail: float = 1e-11) -> "ThermalSpec":
        """Smallest-cutoff spec whose raw tail mass is below ``tail``."""
        if nbar == 0:
            return cls(0.0, 0)
        ratio = nbar / (1.0 + nbar)
        cutoff = max(0, math.ceil(math.log(tail) / math.log(ratio)) - 1)
        while (ratio ** (cutoff + 1)) >= tail:
            cutoff += 1
        return cls(nbar, cutoff)


@dataclass(frozen=True)
class DecaySpec:
    """Cavity energy decay at rate kappa into a bath of occupancy nbar_bath.

    Collapse operators: sqrt(kappa (1 + nbar_bath)) a and
    sqrt(kappa nbar_bath) adag.
    """

    kappa: float
    nbar_bath: float = 0.0

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.nbar_bath < 0:
            raise ValueError("nbar_bath must be non-negative")


def _as_sparse_terms(h_terms: TermList):
    return [(coeff, sp.csr_matrix(mat)) for coeff, mat in h_terms]


def _norm_check_and_fix(amps: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(amps)
    drift = abs(norm - 1.0)
    if drift > NORM_HARD:
        raise NormDriftError(f"state norm drifted by {drift:.3e} (> {NORM_HARD:.0e})")
    return amps / norm


def evolve_td(h_of_t, state: StateVector, t0: float, t1: float,
              config: IntegratorConfig | None = None) -> StateVector:
    """Integrate i d|psi>/dt = H(t)|psi> from t0 to t1.

    h_of_t is either a term list ``[(coeff, matrix), ...]`` (fast sparse
    path) or a callable ``t -> Operator | ndarray``.
    """
    out = evolve_td_multi(h_of_t, state.space, state.amplitudes[:, None], t0, t1, config)
    return StateVector(state.space, _norm_check_and_fix(out[:, 0]))


def evolve_td_multi(h_of_t, space: SpaceDescriptor, columns: np.ndarray,
                    t0: float, t1: float, config: IntegratorConfig | None = None,
                    t_eval=None) -> np.ndarray:
    """Batched Schroedinger integration of several state columns at once.

    columns has shape (dim, k).  Returns the final (dim, k) block, or,
    when t_eval is given, the (len(t_eval), dim, k) trajectory.
    Leakage is checked on every returned column; norm repair is left to
    the callers so trajectories stay raw.
    """
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    config = config or IntegratorConfig()
    dim, k = columns.shape
    if t1 == t0:
        return columns.copy()

    if callable(h_of_t):
        def rhs(t, y):
            h = h_of_t(t)
            mat = h.matrix if isinstance(h, Operator) else np.asarray(h)
            return (-1j * (mat @ y.reshape(dim, k))).ravel()
    else:
        sparse_terms = _as_sparse_terms(h_of_t)

        def rhs(t, y):
            psi = y.reshape(dim, k)
            acc = np.zeros_like(psi)
            for coeff, mat in sparse_terms:
                acc += complex(coeff(t)) * (mat @ psi)
            return (-1j * acc).ravel()

    kwargs = {}
    if config.max_step is not None:
        kwargs["max_step"] = config.max_step
    sol = solve_ivp(
        rhs,
        (t0, t1),
        columns.astype(complex).ravel(),
        method="DOP853",
        rtol=config.rel_tol,
        atol=config.abs_tol,
        t_eval=t_eval,
        dense_output=False,
        **kwargs,
    )
    if not sol.success:
        raise NormDriftError(f"integrator failed: {sol.message}")
    if t_eval is not None:
        traj = sol.y.T.reshape(len(sol.t), dim, k)
        for col in range(k):
            check_leakage(space, traj[-1][:, col])
        return traj
    final = sol.y[:, -1].reshape(dim, k)
    for col in range(k):
        check_leakage(space, final[:, col])
    return final


def evolve_ti(h: Operator, state: StateVector, duration: float,
              method: str = "eigh") -> StateVector:
    """Apply exp(-i H duration) to a state.

    method "eigh" diagonalizes the Hermitian matrix, "expm" uses
    scaling-and-squaring; the two agree to 1e-10 and exist as mutual
    checks.
    """
    herm = np.max(np.abs(h.matrix - h.matrix.conj().T))
    if herm > 1e-10:
        raise ValueError(f"matrix is not Hermitian: max deviation {herm:.3e}")
    if method == "eigh":
        w, v = eigh(h.matrix)
        amps = v @ (np.exp(-1j * w * duration) * (v.conj().T @ state.amplitudes))
    elif method == "expm":
        amps = expm(-1j * duration * h.matrix) @ state.amplitudes
    else:
        raise ValueError(f"unknown method {method!r}")
    return StateVector(state.space, _norm_check_and_fix(amps))


@lru_cache(maxsize=32)
def _sx_eig(atom_count: int, atom_dim: int):
    space = SpaceDescriptor(atom_count, atom_dim, 0, no_mode=True)
    w, v = eigh(collective_sx(space).matrix)
    return w, v


def propagator_u(space: SpaceDescriptor, lam: float, omega: float, t: float) -> Operator:
    """The factored propagator U(t) = exp(-i H0 t) exp(-i H_e t).

    H0 = 2 omega S_x and H_e = 2 lam S_x^2 commute, so U is assembled
    from one cached S_x eigendecomposition:
    U = V diag(exp(-i (2 omega m + 2 lam m^2) t)) V^dag, acting as the
    identity on any mode factor.
    """
    w, v = _sx_eig(space.atom_count, space.atom_dim)
    phases = np.exp(-1j * (2.0 * omega * w + 2.0 * lam * w * w) * t)
    u_atoms = (v * phases) @ v.conj().T
    if space.mode_dim > 1:
        return Operator(space, np.kron(u_atoms, np.eye(space.mode_dim)))
    return Operator(space, u_atoms)


def apply_atomic(space: SpaceDescriptor, u_atoms: np.ndarray, amplitudes: np.ndarray) -> np.ndarray:
    """Apply an atoms-only operator to a full-space state without forming
    the Kronecker product (exact mode factorization)."""
    block = amplitudes.reshape(space.atoms_dim, space.mode_dim)
    return (u_atoms @ block).ravel()


def evolve_lindblad(h_of_t, decay: DecaySpec, rho: DensityMatrix, t0: float, t1: float,
                    config: IntegratorConfig | None = None) -> DensityMatrix:
    """Integrate the master equation

        drho/dt = -i [H(t), rho] + sum_c (c rho c^dag - {c^dag c, rho}/2)

    with collapse operators sqrt(kappa (1+nbar_bath)) a and
    sqrt(kappa nbar_bath) adag.  Trace drift up to 1e-6 is repaired by
    rescaling, larger drift raises NormDriftError.
    """
    space = rho.space
    config = config or IntegratorConfig()
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    if t1 == t0:
        return rho
    dim = space.dim

    if callable(h_of_t):
        def h_at(t):
            h = h_of_t(t)
            return h.matrix if isinstance(h, Operator) else np.asarray(h)
    else:
        terms = h_of_t

        def h_at(t):
            acc = 0
            for coeff, mat in terms:
                acc = acc + complex(coeff(t)) * mat
            return acc

    collapse = _collapse_ops(space, decay)
    # precompute c, c^dag c for each collapse operator
    pre = [(c, c.conj().T @ c) for c in collapse]

    def rhs(t, y):
        r = y.reshape(dim, dim)
        h = h_at(t)
        out = -1j * (h @ r - r @ h)
        for c, cdc in pre:
            out += (c @ r) @ c.conj().T - 0.5 * (cdc @ r + r @ cdc)
        return out.ravel()

    kwargs = {}
    if config.max_step is not None:
        kwargs["max_step"] = config.max_step
    sol = solve_ivp(
        rhs,
        (t0, t1),
        rho.matrix.astype(complex).ravel(),
        method="DOP853",
        rtol=config.rel_tol,
        atol=config.abs_tol,
        **kwargs,
    )
    if not sol.success:
        raise NormDriftError(f"integrator failed: {sol.message}")
    out = sol.y[:, -1].reshape(dim, dim)
    out = 0.5 * (out + out.conj().T)  # repair roundoff-level hermiticity drift
    tr = np.trace(out).real
    if abs(tr - 1.0) > NORM_HARD:
        raise NormDriftError(f"trace drifted by {abs(tr - 1.0):.3e} (> {NORM_HARD:.0e})")
    out = out / tr
    # integration error can leave eigenvalues slightly negative; clip
    # noise-level dips so the result is a valid density matrix, but treat
    # anything beyond the norm-drift budget as a real failure
    w, v = np.linalg.eigh(out)
    if w[0] < -NORM_HARD:
        raise NormDriftError(f"density matrix eigenvalue drifted to {w[0]:.3e}")
    if w[0] < 0:
        w = np.clip(w, 0.0, None)
        out = (v * w) @ v.conj().T
        out = out / np.trace(out).real
    check_leakage_dm(space, out)
    return DensityMatrix(space, out)


def _collapse_ops(space: SpaceDescriptor, decay: DecaySpec) -> list[np.ndarray]:
    if decay.kappa == 0:
        return []
    a, adag = (op.matrix for op in boson_ops(space))
    ops = [math.sqrt(decay.kappa * (1.0 + decay.nbar_bath)) * a]
    if decay.nbar_bath > 0:
        ops.append(math.sqrt(decay.kappa * decay.nbar_bath) * adag)
    return ops


def thermal_state(space: SpaceDescriptor, spec: ThermalSpec,
                  atom_state: StateVector | None = None) -> DensityMatrix:
    """Density matrix with atoms in a pure state and the mode thermal.

    The mode factor is sum_n p_n |n><n| truncated at the space's cutoff;
    the raw Bose-Einstein weights are kept without renormalization (the
    trace deficit equals the tail mass, checked < 1e-8 by ThermalSpec).
    atom_state defaults to all atoms in |g>.
    """
    if space.no_mode:
        raise ValueError("space has no bosonic mode")
    if spec.cutoff > space.fock_cutoff:
        raise ValueError(
            f"spec cutoff {spec.cutoff} exceeds space fock_cutoff {space.fock_cutoff}"
        )
    probs = np.zeros(space.mode_dim)
    probs[: spec.cutoff + 1] = spec.probabilities()
    if atom_state is None:
        atoms = np.zeros(space.atoms_dim, dtype=complex)
        atoms[0] = 1.0
    else:
        if atom_state.space.atoms_only() != space.atoms_only() or not atom_state.space.no_mode:
            raise ValueError("atom_state must live on the atoms-only space")
        atoms = atom_state.amplitudes
    rho_atoms = np.outer(atoms, atoms.conj())
    return DensityMatrix(space, np.kron(rho_atoms, np.diag(probs).astype(complex)))
