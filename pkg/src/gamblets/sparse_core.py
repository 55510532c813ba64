"""Sparse linear algebra kernels: CSR wrappers, CG, eigenvalue extremes, IO.

Matrices are held as scipy CSR arrays in canonical form (sorted, duplicate-free
column indices per row). The operations here are thin, validated wrappers so the
rest of the package never touches scipy incantations directly, plus the two
iterative kernels everything leans on: a conjugate-gradient solver with a
relative-residual stopping rule and per-solve iteration reporting, and
power/inverse iteration for spectral extremes.

The solvers are deterministic: fixed seeds, fixed-order reductions, no
randomized restarts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import InvalidArgumentError, NumericalError

__all__ = [
    "CgReport",
    "as_csr",
    "spmv",
    "sparse_matmul",
    "sparse_triple",
    "extract_principal",
    "cg_solve",
    "cg_solve_block",
    "eig_extremes",
    "mm_write",
    "mm_read",
    "spmv_flops",
    "matmul_flops",
    "cg_flops",
]


def _require(cond, msg):
    if not cond:
        raise InvalidArgumentError(msg)


def as_csr(matrix, drop_tol=0.0):
    """Return `matrix` as a canonical CSR array.

    Accepts dense arrays, any scipy sparse container, or an existing CSR.
    Duplicate entries are summed, column indices sorted, explicit zeros removed;
    entries with magnitude <= drop_tol are dropped as well (default keeps every
    assembled entry).
    """
    if sp.issparse(matrix):
        out = sp.csr_array(matrix)
    else:
        arr = np.asarray(matrix, dtype=float)
        _require(arr.ndim == 2, f"expected a 2-d matrix, got shape {arr.shape}")
        out = sp.csr_array(arr)
    out = out.astype(float)
    out.sum_duplicates()
    if drop_tol > 0.0:
        out.data[np.abs(out.data) <= drop_tol] = 0.0
    out.eliminate_zeros()
    out.sort_indices()
    return out


def spmv(A, x):
    """Sparse matrix times dense vector."""
    x = np.asarray(x, dtype=float)
    _require(A.ndim == 2 and A.shape[1] == x.shape[0],
             f"shape mismatch: {A.shape} @ {x.shape}")
    return A @ x


def sparse_matmul(A, B):
    """CSR product A @ B in canonical form."""
    _require(A.shape[1] == B.shape[0],
             f"shape mismatch: {A.shape} @ {B.shape}")
    return as_csr(A @ B)


def sparse_triple(R, A):
    """Galerkin triple product R @ A @ R.T, symmetrized.

    A must be square and symmetric; the output is explicitly symmetrized
    ((X + X.T)/2) so downstream solvers never see asymmetry accumulated through
    two sparse products.
    """
    _require(A.shape[0] == A.shape[1], f"A must be square, got {A.shape}")
    _require(R.shape[1] == A.shape[0],
             f"shape mismatch: {R.shape} @ {A.shape}")
    X = R @ A @ R.T
    return as_csr((X + X.T) * 0.5)


def extract_principal(A, indices):
    """Principal submatrix A[S, S] for a sorted index set S.

    Returns (submatrix, mapping) where mapping[local] = global index. SPD is
    preserved (eigenvalue interlacing), which the patch solvers rely on.
    """
    _require(A.shape[0] == A.shape[1], f"A must be square, got {A.shape}")
    idx = np.asarray(indices)
    _require(idx.ndim == 1 and idx.size > 0, "index set must be a nonempty 1-d array")
    _require(np.issubdtype(idx.dtype, np.integer), "index set must be integer")
    _require(np.all(np.diff(idx) > 0), "index set must be strictly increasing")
    _require(0 <= idx[0] and idx[-1] < A.shape[0],
             f"index set out of range for matrix of size {A.shape[0]}")
    sub = A[idx][:, idx]
    return as_csr(sub), idx.copy()


@dataclass
class CgReport:
    """Outcome of one conjugate-gradient solve."""

    iterations: int
    rel_residual: float
    converged: bool
    breakdown: bool = False


def cg_solve(A, b, rel_tol=1e-10, max_iter=None, x0=None):
    """Conjugate gradients for SPD systems.

    Stops when ||b - A x||_2 <= rel_tol * ||b||_2. Hitting max_iter is reported
    (converged=False), not fatal; a non-positive curvature p^T A p signals a
    non-SPD matrix and raises NumericalError. `A` may be any object supporting
    `A @ x` (CSR or dense).
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    _require(A.shape == (n, n), f"shape mismatch: {A.shape} vs rhs {b.shape}")
    if max_iter is None:
        max_iter = max(200, 2 * n)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n), CgReport(0, 0.0, True)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x if x0 is not None else b.copy()
    rnorm = float(np.linalg.norm(r))
    if rnorm <= rel_tol * bnorm:
        return x, CgReport(0, rnorm / bnorm, True)
    p = r.copy()
    rs = rnorm * rnorm
    for it in range(1, max_iter + 1):
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise NumericalError(
                f"CG breakdown at iteration {it}: p^T A p = {pAp:.3e} <= 0 "
                "(matrix is not SPD)")
        alpha = rs / pAp
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(r @ r)
        rnorm = np.sqrt(rs_new)
        if rnorm <= rel_tol * bnorm:
            return x, CgReport(it, rnorm / bnorm, True)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, CgReport(max_iter, rnorm / bnorm, False)


def cg_solve_block(A, B, rel_tol=1e-10, max_iter=None):
    """CG applied column-by-column to the right-hand-side block B, in lockstep.

    Each column follows the ordinary CG recurrence with its own alpha/beta;
    columns are frozen (and removed from the working block) as soon as they hit
    the relative-residual tolerance, so iteration counts per column match a
    sequential column-wise solve exactly.

    Returns (X, iterations, rel_residuals, converged) with per-column arrays.
    """
    B = np.asarray(B, dtype=float)
    _require(B.ndim == 2, f"rhs block must be 2-d, got shape {B.shape}")
    n, m = B.shape
    _require(A.shape == (n, n), f"shape mismatch: {A.shape} vs rhs {B.shape}")
    if max_iter is None:
        max_iter = max(200, 2 * n)
    X = np.zeros((n, m))
    iters = np.zeros(m, dtype=int)
    rel = np.zeros(m)
    converged = np.ones(m, dtype=bool)
    bnorm = np.linalg.norm(B, axis=0)
    active = np.flatnonzero(bnorm > 0.0)
    if active.size == 0:
        return X, iters, rel, converged
    R = B[:, active].copy()
    P = R.copy()
    rs = np.sum(R * R, axis=0)
    tol_abs = rel_tol * bnorm[active]
    for it in range(1, max_iter + 1):
        AP = A @ P
        pAp = np.sum(P * AP, axis=0)
        if np.any(pAp <= 0.0):
            raise NumericalError(
                f"CG breakdown at iteration {it} in column block "
                "(matrix is not SPD)")
        alpha = rs / pAp
        X[:, active] += P * alpha
        R -= AP * alpha
        rs_new = np.sum(R * R, axis=0)
        rnorm = np.sqrt(rs_new)
        done = rnorm <= tol_abs
        if np.any(done):
            cols = active[done]
            iters[cols] = it
            rel[cols] = rnorm[done] / bnorm[cols]
            keep = ~done
            active = active[keep]
            if active.size == 0:
                return X, iters, rel, converged
            R = R[:, keep]
            P = P[:, keep]
            rs_new = rs_new[keep]
            rs = rs[keep]
            rnorm = rnorm[keep]
            tol_abs = tol_abs[keep]
            AP = None
        P = R + P * (rs_new / rs)
        rs = rs_new
    iters[active] = max_iter
    rel[active] = rnorm / bnorm[active]
    converged[active] = False
    return X, iters, rel, converged


def eig_extremes(A, tol=1e-2, max_iter=500, seed=24337):
    """Estimate (lambda_min, lambda_max) of an SPD matrix.

    lambda_max by power iteration, lambda_min by inverse iteration with CG as
    the inner solver. Both estimates stop on a relative Rayleigh-quotient
    stagnation/residual test at `tol` (intended accuracy ~1%, not eps). A
    non-SPD input surfaces as a CG breakdown (NumericalError).
    """
    n = A.shape[0]
    _require(A.shape[0] == A.shape[1], f"A must be square, got {A.shape}")
    rng = np.random.default_rng(seed)

    # lambda_max: power iteration with residual-based stopping
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    lam_max = 0.0
    for _ in range(max_iter):
        y = A @ x
        lam_max = float(x @ y)
        ynorm = float(np.linalg.norm(y))
        if ynorm == 0.0:
            lam_max = 0.0
            break
        res = float(np.linalg.norm(y - lam_max * x))
        x = y / ynorm
        if res <= 0.5 * tol * abs(lam_max):
            break

    # lambda_min: inverse iteration, Rayleigh quotient on the iterate
    inner_tol = max(1e-12, 1e-3 * tol)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    lam_min = lam_max
    lam_prev = np.inf
    y_prev = None
    for _ in range(max_iter):
        y, rep = cg_solve(A, x, rel_tol=inner_tol, x0=y_prev)
        ynorm = float(np.linalg.norm(y))
        if ynorm == 0.0:
            raise NumericalError("inverse iteration broke down: A^{-1} x = 0")
        x = y / ynorm
        y_prev = y / ynorm
        lam_min = float(x @ (A @ x))
        if abs(lam_min - lam_prev) <= 0.5 * tol * abs(lam_min):
            break
        lam_prev = lam_min
    return lam_min, lam_max


def mm_write(path, A, comment=""):
    """Write a matrix in Matrix Market coordinate format (full precision)."""
    scipy.io.mmwrite(str(path), sp.coo_array(A), comment=comment, precision=17)


def mm_read(path):
    """Read a Matrix Market file as a canonical CSR array."""
    return as_csr(scipy.io.mmread(str(path)))


# flop accounting helpers (used by the complexity report of the fast pipeline)

def spmv_flops(A, ncols=1):
    """Flops of A @ x with `ncols` right-hand sides: one multiply-add per entry."""
    return 2 * A.nnz * ncols


def matmul_flops(A, B):
    """Flops of the sparse product A @ B (classical row-merge accounting)."""
    _require(A.shape[1] == B.shape[0], f"shape mismatch: {A.shape} @ {B.shape}")
    row_nnz = np.diff(B.indptr)
    return int(2 * row_nnz[A.indices].sum())


def cg_flops(nnz, n, iterations, ncols=1):
    """Flops of `iterations` CG steps on a matrix with `nnz` entries of size n."""
    return int(iterations) * (2 * int(nnz) + 12 * int(n)) * ncols
