"""Dense reference implementations used only to cross-check the pipelines.

Everything here goes through explicit Cholesky factorizations on dense arrays
and is written directly from the defining formulas:

    Theta = Phi A^{-1} Phi^T
    Psi   = Theta^{-1} Phi A^{-1}      (rows are the adapted basis vectors)

No code is shared with the iterative implementation route; tests compare the
two. Inputs are size-guarded (N <= 4096) because these are O(N^3) routines.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .errors import InvalidArgumentError, NumericalError

__all__ = ["dense_solve", "dense_gamblets", "dense_theta", "MAX_DENSE_SIZE"]

MAX_DENSE_SIZE = 4096


def _as_dense(A, name="matrix"):
    if sp.issparse(A):
        A = A.toarray()
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise InvalidArgumentError(f"{name} must be 2-d, got shape {A.shape}")
    return A


def _check_size(n):
    if n > MAX_DENSE_SIZE:
        raise InvalidArgumentError(
            f"dense oracle refuses systems larger than {MAX_DENSE_SIZE} (got {n})")


def _cholesky(A, name="matrix"):
    try:
        return la.cho_factor(A, lower=True, check_finite=False)
    except la.LinAlgError as exc:
        raise NumericalError(f"{name} is not positive definite: {exc}") from exc


def dense_solve(A, b):
    """Solve A x = b by Cholesky with iterative refinement.

    Refines until the relative residual falls below 1e-12 (or stagnates);
    raises NumericalError if it stays above 1e-8, which signals a matrix far
    outside this oracle's intended use.
    """
    A = _as_dense(A, "A")
    n = A.shape[0]
    _check_size(n)
    b = np.asarray(b, dtype=float)
    single = b.ndim == 1
    B = b[:, None] if single else b
    if A.shape != (n, n) or B.shape[0] != n:
        raise InvalidArgumentError(f"shape mismatch: {A.shape} vs rhs {b.shape}")
    factor = _cholesky(A, "A")
    X = la.cho_solve(factor, B, check_finite=False)
    bnorm = np.linalg.norm(B)
    if bnorm > 0.0:
        for _ in range(4):
            R = B - A @ X
            res = np.linalg.norm(R) / bnorm
            if res <= 1e-12:
                break
            X = X + la.cho_solve(factor, R, check_finite=False)
        res = np.linalg.norm(B - A @ X) / bnorm
        if res > 1e-8:
            raise NumericalError(f"dense solve stagnated at relative residual {res:.3e}")
    return X[:, 0] if single else X


def dense_theta(A, Phi):
    """Theta = Phi A^{-1} Phi^T, symmetrized."""
    A = _as_dense(A, "A")
    _check_size(A.shape[0])
    Phi = _as_dense(Phi, "Phi")
    if Phi.shape[1] != A.shape[0]:
        raise InvalidArgumentError(f"shape mismatch: Phi {Phi.shape} vs A {A.shape}")
    factor = _cholesky(A, "A")
    KPhiT = la.cho_solve(factor, Phi.T, check_finite=False)
    Theta = Phi @ KPhiT
    return (Theta + Theta.T) * 0.5


def dense_gamblets(A, Phi):
    """Rows of Psi = Theta^{-1} Phi A^{-1}: the energy-minimizing basis
    biorthogonal to the measurement rows of Phi (Phi Psi^T = I)."""
    A = _as_dense(A, "A")
    _check_size(A.shape[0])
    Phi = _as_dense(Phi, "Phi")
    if Phi.shape[1] != A.shape[0]:
        raise InvalidArgumentError(f"shape mismatch: Phi {Phi.shape} vs A {A.shape}")
    factor = _cholesky(A, "A")
    KPhiT = la.cho_solve(factor, Phi.T, check_finite=False)
    Theta = Phi @ KPhiT
    Theta = (Theta + Theta.T) * 0.5
    tfac = _cholesky(Theta, "Theta")
    return la.cho_solve(tfac, KPhiT.T, check_finite=False)
