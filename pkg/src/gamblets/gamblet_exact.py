"""Exact multiresolution transform and solver (the correctness reference).

Starting from the fine level q with Psi^(q) = M^{-1} (so the basis is
biorthogonal to the measurement rows Phi^(q) = M), each downward step k -> k-1
computes, with W = W^(k) the per-parent null basis and pibar the averaged
aggregation (all solves at a fixed relative-residual tolerance):

    B^(k)      = W A^(k) W^T
    w^(k)      = B^(k)^{-1} W g^(k)                (subband coefficients)
    increment  = Psi^(k)^T W^T w^(k)
    D^(k,k-1)  = -B^(k)^{-1} W A^(k) pibar^(k,k-1)
    R^(k-1,k)  = pibar^(k-1,k) + D^(k-1,k) W^(k)
    A^(k-1)    = R A^(k) R^T,  Psi^(k-1) = R Psi^(k),  g^(k-1) = R g^(k)

and finally A^(1) U = g^(1) closes the telescope: u = Psi^(1)^T U plus the
increments. Intermediate matrices are held dense (they are mathematically
dense; this module is the reference for q <= 7, not the fast path). The
interesting identities (R pi^T = I, R A W^T ~ 0, biorthogonality, pairwise
a-orthogonal increments) are verified by the test suite from the stored
per-level data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NumericalError
from .grid_fem import LoadVector
from .sparse_core import cg_solve, cg_solve_block

__all__ = [
    "GambletLevel",
    "SolveRecord",
    "MultiresSolution",
    "init_level_q",
    "level_step",
    "solve_coarsest",
    "exact_solve",
]

# triple products are explicitly symmetrized; the repair must stay at rounding
# level because both operand sides carry the same factor
SYMMETRY_REPAIR_TOL = 1e-12

DEFAULT_TOL_MASS = 1e-10
DEFAULT_TOL_SUBBAND = 1e-10


@dataclass
class SolveRecord:
    """One CG solve (or column batch) with per-column iteration counts."""

    level: int
    kind: str                # mass_inverse | subband | correction | coarse
    size: int
    columns: int
    tol: float
    iterations: np.ndarray
    rel_residual: np.ndarray

    @property
    def max_iterations(self):
        return int(np.max(self.iterations)) if self.iterations.size else 0


@dataclass
class GambletLevel:
    """All level-k data produced by the downward sweep."""

    k: int
    psi: np.ndarray                      # (4^k, N)
    stiffness: np.ndarray                # A^(k)
    load: np.ndarray                     # g^(k)
    null_w: object = None                # W^(k) (CSR), k >= 2
    subband: np.ndarray = None           # B^(k) dense, k >= 2
    correction: np.ndarray = None        # D^(k,k-1), k >= 2
    restriction: np.ndarray = None       # R^(k-1,k), k >= 2
    symmetry_repair: float = 0.0


@dataclass
class MultiresSolution:
    """Telescoping solution: coarse part plus one increment per level."""

    u: np.ndarray
    u1_coarse: np.ndarray                    # U^(1) in the coarse basis
    subband_coeffs: dict = field(default_factory=dict)   # k -> w^(k)
    increments: dict = field(default_factory=dict)       # k -> fine-grid vector
    partials: dict = field(default_factory=dict)         # k -> u^(k)
    records: list = field(default_factory=list)


def _symmetrize(X, what):
    scale = float(np.abs(X).max())
    if scale == 0.0:
        return X, 0.0
    repair = float(np.abs(X - X.T).max()) / scale
    if repair >= SYMMETRY_REPAIR_TOL:
        raise NumericalError(
            f"{what} lost symmetry beyond rounding: relative repair {repair:.3e}")
    return (X + X.T) * 0.5, repair


def _as_rhs(b, N):
    if isinstance(b, LoadVector):
        b = b.b
    b = np.asarray(b, dtype=float)
    if b.shape != (N,):
        raise InvalidArgumentError(f"rhs shape {b.shape} does not match N={N}")
    return b


def init_level_q(M, A, b, tree, tol_mass=DEFAULT_TOL_MASS, mode="mass_inverse",
                 records=None, block_columns=1024):
    """Finest level: Psi^(q) = M^{-1} (columns by CG) or the nodal shortcut.

    mode

    - "mass_inverse" (default): Psi^(q) = M^{-1}, A^(q) = M^{-1} A M^{-1},
      g^(q) = M^{-1} b (the nodal values of g when b = M g_nodal);
    - "nodal": Psi^(q) = I, A^(q) = A, g^(q) = b (basis = fine hats; same
      final solution, differently-split increments).
    """
    N = 2 ** (2 * tree.q)
    if M.shape != (N, N) or A.shape != (N, N):
        raise InvalidArgumentError(
            f"matrix shapes {M.shape}/{A.shape} do not match q={tree.q}")
    b = _as_rhs(b, N)
    if mode == "nodal":
        psi = np.eye(N)
        a_q = A.toarray() if hasattr(A, "toarray") else np.array(A, dtype=float)
        a_q, repair = _symmetrize(a_q, "A^(q)")
        return GambletLevel(tree.q, psi, a_q, b.copy(), symmetry_repair=repair)
    if mode != "mass_inverse":
        raise InvalidArgumentError(f"unknown level-q init mode {mode!r}")

    psi = np.empty((N, N))
    iters = np.empty(N, dtype=int)
    rels = np.empty(N)
    eye_chunk = np.zeros((N, min(block_columns, N)))
    for start in range(0, N, block_columns):
        stop = min(start + block_columns, N)
        cols = stop - start
        rhs = eye_chunk[:, :cols]
        rhs[:] = 0.0
        rhs[np.arange(start, stop), np.arange(cols)] = 1.0
        X, it, rel, ok = cg_solve_block(M, rhs, rel_tol=tol_mass)
        if not np.all(ok):
            raise NumericalError("mass-inverse CG failed to converge")
        # columns of M^{-1} are its rows (M symmetric); store as rows of Psi
        psi[start:stop, :] = X.T
        iters[start:stop] = it
        rels[start:stop] = rel
    if records is not None:
        records.append(SolveRecord(tree.q, "mass_inverse", N, N, tol_mass, iters, rels))
    a_q = psi @ (A @ psi.T)
    a_q, repair = _symmetrize(a_q, "A^(q)")
    g_q = psi @ b
    return GambletLevel(tree.q, psi, a_q, g_q, symmetry_repair=repair)


def level_step(level, tree, w_variant="orthonormal", tol_subband=DEFAULT_TOL_SUBBAND,
               records=None):
    """One downward step k -> k-1; returns (next_level, w_k, increment)."""
    k = level.k
    if k < 2:
        raise InvalidArgumentError(f"level_step needs k >= 2, got k={k}")
    W = tree.null_basis(k, w_variant)
    A_k = level.stiffness

    T = W @ A_k                             # (J, I_k) dense
    B = W @ T.T                             # W A W^T
    B, repair_b = _symmetrize(B, f"B^({k})")

    rhs_w = W @ level.load
    w_k, rep = cg_solve(B, rhs_w, rel_tol=tol_subband)
    if not rep.converged:
        raise NumericalError(f"subband solve at level {k} did not converge")
    if records is not None:
        records.append(SolveRecord(k, "subband", B.shape[0], 1, tol_subband,
                                   np.array([rep.iterations]),
                                   np.array([rep.rel_residual])))

    increment = level.psi.T @ (W.T @ w_k)

    P = tree.pi_step(k - 1)                 # pi^(k-1,k), 0/1
    rhs_d = -(W @ (P @ A_k).T) * 0.25       # -W A^(k) pibar^(k,k-1)
    D, it, rel, ok = cg_solve_block(B, rhs_d, rel_tol=tol_subband)
    if not np.all(ok):
        raise NumericalError(f"correction solves at level {k} did not converge")
    if records is not None:
        records.append(SolveRecord(k, "correction", B.shape[0], D.shape[1],
                                   tol_subband, it, rel))

    R = P.toarray() * 0.25 + (W.T @ D).T    # pibar^(k-1,k) + D^(k-1,k) W
    A_next = R @ (R @ A_k.T).T              # R A R^T with A symmetric
    A_next, repair_a = _symmetrize(A_next, f"A^({k - 1})")
    psi_next = R @ level.psi
    g_next = R @ level.load

    level.null_w = W
    level.subband = B
    level.correction = D
    level.restriction = R
    level.symmetry_repair = max(level.symmetry_repair, repair_b)

    next_level = GambletLevel(k - 1, psi_next, A_next, g_next,
                              symmetry_repair=repair_a)
    return next_level, w_k, increment


def solve_coarsest(level, tol=DEFAULT_TOL_SUBBAND, records=None):
    """Solve A^(1) U = g^(1); returns (U, coarse part of u)."""
    if level.k != 1:
        raise InvalidArgumentError(f"expected level 1, got {level.k}")
    U, rep = cg_solve(level.stiffness, level.load, rel_tol=tol)
    if not rep.converged:
        raise NumericalError("coarse solve did not converge")
    if records is not None:
        records.append(SolveRecord(1, "coarse", level.stiffness.shape[0], 1, tol,
                                   np.array([rep.iterations]),
                                   np.array([rep.rel_residual])))
    return U, level.psi.T @ U


def exact_solve(M, A, b, tree, w_variant="orthonormal", tol_mass=DEFAULT_TOL_MASS,
                tol_subband=DEFAULT_TOL_SUBBAND, level_q_init="mass_inverse"):
    """Full downward sweep q -> 1 plus reassembly.

    Returns (solution, levels) where levels maps k -> GambletLevel with every
    intermediate matrix retained for inspection.
    """
    records = []
    levels = {}
    level = init_level_q(M, A, b, tree, tol_mass=tol_mass, mode=level_q_init,
                         records=records)
    levels[tree.q] = level
    subband_coeffs = {}
    increments = {}
    for k in range(tree.q, 1, -1):
        next_level, w_k, inc = level_step(level, tree, w_variant=w_variant,
                                          tol_subband=tol_subband, records=records)
        subband_coeffs[k] = w_k
        increments[k] = inc
        levels[k - 1] = next_level
        level = next_level
    U1, u1 = solve_coarsest(level, tol=tol_subband, records=records)
    increments[1] = u1

    partials = {1: u1}
    for k in range(2, tree.q + 1):
        partials[k] = partials[k - 1] + increments[k]
    solution = MultiresSolution(
        u=partials[tree.q],
        u1_coarse=U1,
        subband_coeffs=subband_coeffs,
        increments=increments,
        partials=partials,
        records=records,
    )
    return solution, levels
