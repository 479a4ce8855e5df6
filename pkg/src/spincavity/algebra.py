"""Composite Hilbert-space construction and operator/state algebra.

Conventions used throughout the package:

* Atomic levels are indexed g=0, e=1, f=2, h=3 and labelled by the
  letters ``"gefh"``.  Level transfers used by the protocols then become
  fixed permutation matrices.
* The flat basis index of a product state is
  ``(((level_1*d + level_2)*d + ...)*d + level_N)*(n_max+1) + n``,
  i.e. atom 1 is the most significant digit and the bosonic mode is the
  least significant factor.
* The bosonic ladder is hard-truncated: ``adag|n_max> = 0``.  Propagators
  monitor the population of the top two Fock levels so that truncation
  artifacts raise an error instead of passing silently.

All values are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LEVEL_LABELS = "gefh"

#: population allowed in the top two Fock levels before truncation is
#: considered unfaithful
LEAKAGE_TOL = 1e-6

#: leakage is only meaningful when the cutoff sits above the physical
#: support; tiny mode spaces (e.g. a two-level mode used as an exact
#: Jaynes-Cummings sector) are exempt
LEAKAGE_MIN_MODE_DIM = 4


class PhysicsError(RuntimeError):
    """A physical consistency check failed during propagation."""


class TruncationError(PhysicsError):
    """Population leaked into the top Fock levels of a truncated mode."""


class NormDriftError(PhysicsError):
    """State norm (or density-matrix trace) drifted beyond tolerance."""


@dataclass(frozen=True)
class SpaceDescriptor:
    """Shape of a composite Hilbert space: N atoms x d levels x Fock mode.

    Parameters
    ----------
    atom_count : int
        Number of atoms N, at least 1.
    atom_dim : int
        Levels per atom, one of 2, 3, 4 (g, e, f, h in index order).
    fock_cutoff : int
        Maximum boson number n_max; the mode dimension is n_max + 1.
    no_mode : bool
        When True the space carries no bosonic factor (effective-only
        runs); fock_cutoff must be 0.
    """

    atom_count: int
    atom_dim: int
    fock_cutoff: int = 0
    no_mode: bool = False

    def __post_init__(self):
        if self.atom_count < 1:
            raise ValueError("atom_count must be at least 1")
        if self.atom_dim not in (2, 3, 4):
            raise ValueError("atom_dim must be one of 2, 3, 4")
        if self.fock_cutoff < 0:
            raise ValueError("fock_cutoff must be non-negative")
        if self.no_mode and self.fock_cutoff != 0:
            raise ValueError("no_mode spaces must have fock_cutoff 0")

    @property
    def mode_dim(self) -> int:
        return 1 if self.no_mode else self.fock_cutoff + 1

    @property
    def atoms_dim(self) -> int:
        return self.atom_dim**self.atom_count

    @property
    def dim(self) -> int:
        return self.atoms_dim * self.mode_dim

    def atoms_only(self) -> "SpaceDescriptor":
        """The same atomic content with the mode factor dropped."""
        return SpaceDescriptor(self.atom_count, self.atom_dim, 0, no_mode=True)

    def with_mode(self, fock_cutoff: int) -> "SpaceDescriptor":
        """The same atomic content with a mode of the given cutoff."""
        return SpaceDescriptor(self.atom_count, self.atom_dim, fock_cutoff, no_mode=False)


def make_space(atom_count: int, atom_dim: int, fock_cutoff: int, no_mode: bool = False) -> SpaceDescriptor:
    """Build a SpaceDescriptor; see the class docstring for the index law."""
    return SpaceDescriptor(atom_count, atom_dim, fock_cutoff, no_mode)


@dataclass(frozen=True)
class StateVector:
    """A pure state: complex amplitudes over the flat product basis."""

    space: SpaceDescriptor
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.ascontiguousarray(self.amplitudes, dtype=complex)
        if amps.shape != (self.space.dim,):
            raise ValueError(f"amplitude vector has shape {amps.shape}, expected ({self.space.dim},)")
        norm = float(np.linalg.norm(amps))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"state norm {norm!r} is not 1 within 1e-9")
        object.__setattr__(self, "amplitudes", amps)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "StateVector":
        return StateVector(self.space, self.amplitudes / self.norm())


@dataclass(frozen=True)
class DensityMatrix:
    """A mixed state; Hermitian, unit trace, positive semidefinite.

    Construction checks hermiticity (1e-10), trace (1e-9) and the
    smallest eigenvalue (>= -1e-9).
    """

    space: SpaceDescriptor
    matrix: np.ndarray

    def __post_init__(self):
        mat = np.ascontiguousarray(self.matrix, dtype=complex)
        n = self.space.dim
        if mat.shape != (n, n):
            raise ValueError(f"matrix has shape {mat.shape}, expected ({n}, {n})")
        herm = np.max(np.abs(mat - mat.conj().T)) if n else 0.0
        if herm > 1e-10:
            raise ValueError(f"matrix is not Hermitian: max deviation {herm:.3e}")
        tr = np.trace(mat).real
        if abs(tr - 1.0) > 1e-9:
            raise ValueError(f"trace is {tr!r}, expected 1 within 1e-9")
        wmin = float(np.linalg.eigvalsh(mat)[0])
        if wmin < -1e-9:
            raise ValueError(f"matrix has negative eigenvalue {wmin:.3e}")
        object.__setattr__(self, "matrix", mat)

    def purity(self) -> float:
        return float(np.trace(self.matrix @ self.matrix).real)


@dataclass(frozen=True)
class Operator:
    """A linear operator on a SpaceDescriptor, stored dense."""

    space: SpaceDescriptor
    matrix: np.ndarray

    def __post_init__(self):
        mat = np.ascontiguousarray(self.matrix, dtype=complex)
        n = self.space.dim
        if mat.shape != (n, n):
            raise ValueError(f"matrix has shape {mat.shape}, expected ({n}, {n})")
        object.__setattr__(self, "matrix", mat)

    def dagger(self) -> "Operator":
        return Operator(self.space, self.matrix.conj().T)

    def __matmul__(self, other: "Operator") -> "Operator":
        if self.space != other.space:
            raise ValueError("operator spaces differ")
        return Operator(self.space, self.matrix @ other.matrix)


def basis_index(space: SpaceDescriptor, levels, n: int = 0) -> int:
    """Flat index of the product basis state with the given atomic levels
    and boson number.

    ``levels`` is a sequence of level indices (one per atom) or a string
    of letters from ``"gefh"``.
    """
    levels = _parse_levels(space, levels)
    if not 0 <= n < space.mode_dim:
        raise ValueError(f"boson number {n} outside mode dimension {space.mode_dim}")
    idx = 0
    for lev in levels:
        idx = idx * space.atom_dim + lev
    return idx * space.mode_dim + n


def decode_index(space: SpaceDescriptor, index: int) -> tuple[tuple[int, ...], int]:
    """Inverse of basis_index: returns (levels tuple, boson number)."""
    if not 0 <= index < space.dim:
        raise ValueError(f"index {index} outside dimension {space.dim}")
    index, n = divmod(index, space.mode_dim)
    levels = []
    for _ in range(space.atom_count):
        index, lev = divmod(index, space.atom_dim)
        levels.append(lev)
    return tuple(reversed(levels)), n


def basis_state(space: SpaceDescriptor, levels, n: int = 0) -> StateVector:
    """Product basis state |levels> x |n>."""
    amps = np.zeros(space.dim, dtype=complex)
    amps[basis_index(space, levels, n)] = 1.0
    return StateVector(space, amps)


def _parse_levels(space: SpaceDescriptor, levels) -> tuple[int, ...]:
    if isinstance(levels, str):
        try:
            levels = tuple(LEVEL_LABELS.index(ch) for ch in levels)
        except ValueError:
            raise ValueError(f"bad level letter in {levels!r}; allowed: {LEVEL_LABELS[:space.atom_dim]!r}")
    else:
        levels = tuple(int(v) for v in levels)
    if len(levels) != space.atom_count:
        raise ValueError(f"got {len(levels)} levels for {space.atom_count} atoms")
    for lev in levels:
        if not 0 <= lev < space.atom_dim:
            raise ValueError(f"level index {lev} outside atom_dim {space.atom_dim}")
    return levels


def embed_atom_op(space: SpaceDescriptor, atom_index: int, local_matrix) -> Operator:
    """Embed a d x d single-atom operator: identity on every other factor."""
    if not 0 <= atom_index < space.atom_count:
        raise ValueError(f"atom_index {atom_index} outside 0..{space.atom_count - 1}")
    local = np.asarray(local_matrix, dtype=complex)
    d = space.atom_dim
    if local.shape != (d, d):
        raise ValueError(f"local matrix has shape {local.shape}, expected ({d}, {d})")
    mat = np.eye(1, dtype=complex)
    for j in range(space.atom_count):
        mat = np.kron(mat, local if j == atom_index else np.eye(d))
    mat = np.kron(mat, np.eye(space.mode_dim))
    return Operator(space, mat)


def local_sp(atom_dim: int) -> np.ndarray:
    """Single-atom raising operator |e><g| (g/e block only)."""
    mat = np.zeros((atom_dim, atom_dim), dtype=complex)
    mat[1, 0] = 1.0
    return mat


def local_sm(atom_dim: int) -> np.ndarray:
    """Single-atom lowering operator |g><e|."""
    return local_sp(atom_dim).conj().T


def local_proj(atom_dim: int, level: int) -> np.ndarray:
    mat = np.zeros((atom_dim, atom_dim), dtype=complex)
    mat[level, level] = 1.0
    return mat


def collective_sx(space: SpaceDescriptor) -> Operator:
    """The collective spin operator (1/2) sum_j (Sj+ + Sj-).

    Acts only through the g/e block of each atom; rows and columns of
    |f> and |h> are zero.
    """
    sx_local = 0.5 * (local_sp(space.atom_dim) + local_sm(space.atom_dim))
    mat = np.zeros((space.dim, space.dim), dtype=complex)
    for j in range(space.atom_count):
        mat += embed_atom_op(space, j, sx_local).matrix
    return Operator(space, mat)


def boson_ops(space: SpaceDescriptor) -> tuple[Operator, Operator]:
    """Truncated mode ladder operators (a, adag) embedded in the full space.

    a|n> = sqrt(n)|n-1>; adag|n> = sqrt(n+1)|n+1> for n < n_max and
    adag|n_max> = 0 (hard truncation).
    """
    if space.no_mode:
        raise ValueError("space has no bosonic mode")
    m = space.mode_dim
    a_local = np.zeros((m, m), dtype=complex)
    for n in range(1, m):
        a_local[n - 1, n] = math.sqrt(n)
    eye_atoms = np.eye(space.atoms_dim)
    a = np.kron(eye_atoms, a_local)
    return Operator(space, a), Operator(space, a.conj().T)


def displacement_series(space: SpaceDescriptor, eta: float, order=None) -> Operator:
    """Displacement-coupling operator on the mode factor.

    For ``order=None`` (exact) returns the truncated-space exponential
    exp(i*eta*(a + adag)).  For an integer ``order`` returns the odd
    partial sum that multiplies the collective raising operator in the
    sideband Hamiltonian,

        exp(-eta^2/2) * sum_{j=0..order} (i eta)^(2j+1) / (j! (j+1)!)
                        * (adag^(j+1) a^j + adag^j a^(j+1)),

    i.e. ``order`` is the largest series index j kept, so the sum holds
    order + 1 terms.
    """
    if eta < 0:
        raise ValueError("eta must be non-negative")
    a_full, adag_full = boson_ops(space)
    if order is None or order == math.inf:
        from scipy.linalg import expm

        return Operator(space, expm(1j * eta * (a_full.matrix + adag_full.matrix)))
    if order < 0:
        raise ValueError("order must be non-negative")
    up, dn = _displacement_partial_sums(space, eta, int(order))
    return Operator(space, math.exp(-(eta**2) / 2.0) * (up + dn))


def _displacement_partial_sums(space: SpaceDescriptor, eta: float, order: int):
    """Partial sums (without the exp(-eta^2/2) prefactor):

    up = sum_j c_j adag^(j+1) a^j  and  dn = sum_j c_j adag^j a^(j+1)
    with c_j = (i eta)^(2j+1) / (j! (j+1)!).  The up part pairs with
    exp(-i delta t), the dn part with exp(+i delta t) in the sideband
    Hamiltonian.
    """
    a, adag = (op.matrix for op in boson_ops(space))
    up = np.zeros_like(a)
    dn = np.zeros_like(a)
    for j in range(order + 1):
        c = (1j * eta) ** (2 * j + 1) / (math.factorial(j) * math.factorial(j + 1))
        aj = np.linalg.matrix_power(a, j)
        up += c * (np.linalg.matrix_power(adag, j + 1) @ aj)
        dn += c * (np.linalg.matrix_power(adag, j) @ (aj @ a))
    return up, dn


def permutation_op(space: SpaceDescriptor, perm) -> Operator:
    """Unitary that relabels atoms: atom i of the output takes the state
    of atom perm[i] of the input."""
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(space.atom_count)):
        raise ValueError(f"{perm} is not a permutation of 0..{space.atom_count - 1}")
    mat = np.zeros((space.dim, space.dim), dtype=complex)
    for idx in range(space.dim):
        levels, n = decode_index(space, idx)
        out = tuple(levels[perm[i]] for i in range(space.atom_count))
        mat[basis_index(space, out, n), idx] = 1.0
    return Operator(space, mat)


def mode_population(space: SpaceDescriptor, amplitudes: np.ndarray, n: int) -> float:
    """Total population with the mode in Fock level n."""
    if space.no_mode:
        raise ValueError("space has no bosonic mode")
    amps = amplitudes.reshape(space.atoms_dim, space.mode_dim)
    return float(np.sum(np.abs(amps[:, n]) ** 2))


def check_leakage(space: SpaceDescriptor, amplitudes: np.ndarray) -> float:
    """Raise TruncationError if the top two Fock levels hold >= 1e-6
    population; returns the leaked population.

    The monitor is active only for mode dimensions of at least 4; below
    that the cutoff IS the physical space and the check is meaningless.
    """
    if space.no_mode or space.mode_dim < LEAKAGE_MIN_MODE_DIM:
        return 0.0
    leak = mode_population(space, amplitudes, space.fock_cutoff)
    leak += mode_population(space, amplitudes, space.fock_cutoff - 1)
    if leak >= LEAKAGE_TOL:
        raise TruncationError(
            f"population {leak:.3e} in the top two Fock levels; raise fock_cutoff"
        )
    return leak


def check_leakage_dm(space: SpaceDescriptor, matrix: np.ndarray) -> float:
    """Density-matrix version of check_leakage."""
    if space.no_mode or space.mode_dim < LEAKAGE_MIN_MODE_DIM:
        return 0.0
    pops = np.diag(matrix).real.reshape(space.atoms_dim, space.mode_dim)
    leak = float(pops[:, -1].sum() + pops[:, -2].sum())
    if leak >= LEAKAGE_TOL:
        raise TruncationError(
            f"population {leak:.3e} in the top two Fock levels; raise fock_cutoff"
        )
    return leak
