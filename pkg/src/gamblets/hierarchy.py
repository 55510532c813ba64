"""Dyadic aggregation hierarchy over the interior nodes of a square grid.

Level k (1 <= k <= q) partitions the unit square into 2^k x 2^k aggregates of
side H_k = 2^-k; the level-k aggregate of fine node (i, j) is
(ceil(i / 2^(q-k)), ceil(j / 2^(q-k))). Aggregates are flattened row-major,
(s-1)*2^k + (t-1). Each aggregate has exactly 4 children, ordered by flat
index: (2s-1,2t-1), (2s-1,2t), (2s,2t-1), (2s,2t).

The module provides the 0/1 aggregation matrices pi^(k,k+1) (and their
row-stochastic versions pibar = pi/4), the induced measurement matrices
Phi^(k) = pi^(k,q) M, the per-parent null bases W^(k) ("chain" differences or
orthonormal rows, both exactly orthogonal to constants in floating point), and
the Chebyshev-ball index neighborhoods used by the localized pipeline.
"""

from __future__ import annotations

import json

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError
from .sparse_core import as_csr

__all__ = ["IndexTree", "build_hierarchy", "chain_gram_condition"]

# integer templates for the per-parent null-space rows; the orthonormal rows
# are the first three rows of the n=4 telescoping construction
# (1,-1,0,0)/sqrt2, (1,1,-2,0)/sqrt6, (1,1,1,-3)/sqrt12
_CHAIN_ROWS = np.array(
    [[1, -1, 0, 0],
     [0, 1, -1, 0],
     [0, 0, 1, -1]], dtype=float)
_ORTHO_BASE = np.array(
    [[1, -1, 0, 0],
     [1, 1, -2, 0],
     [1, 1, 1, -3]], dtype=float)
# one scalar per row, applied multiplicatively so that the row sums cancel
# exactly in IEEE arithmetic (each entry is a small integer times the scalar;
# fl(3*a) - fl(3a) = 0, whereas per-entry division fl(3/s) would not cancel)
_ORTHO_ROWS = _ORTHO_BASE * (1.0 / np.sqrt((_ORTHO_BASE ** 2).sum(axis=1)))[:, None]


class IndexTree:
    """Aggregation hierarchy of depth q with H = 1/2."""

    H = 0.5

    def __init__(self, q):
        if not isinstance(q, (int, np.integer)) or isinstance(q, bool):
            raise InvalidArgumentError(f"q must be an integer, got {q!r}")
        if q < 1:
            raise InvalidArgumentError(f"q must be >= 1, got {q}")
        self.q = int(q)
        self._pi_fine = {}
        self._pi_step = {}
        self._w = {}

    # sizes and geometry -------------------------------------------------

    def _check_level(self, k, lo=1):
        if not lo <= k <= self.q:
            raise InvalidArgumentError(f"level k={k} outside [{lo}, {self.q}]")

    def side(self, k):
        self._check_level(k)
        return 2 ** k

    def size(self, k):
        """Number of aggregates |I^(k)| = 4^k."""
        return self.side(k) ** 2

    def subband_size(self, k):
        """Number of subband rows |J^(k)| = 3 * 4^(k-1), defined for k >= 2."""
        self._check_level(k, lo=2)
        return 3 * 4 ** (k - 1)

    def h_level(self, k):
        """Aggregate side length H_k = 2^-k."""
        self._check_level(k)
        return self.H ** k

    def aggregate_flat(self, k, i, j):
        """Flat level-k aggregate index of fine node (i, j) (1-based)."""
        self._check_level(k)
        step = 2 ** (self.q - k)
        s = (np.asarray(i) + step - 1) // step
        t = (np.asarray(j) + step - 1) // step
        return (s - 1) * self.side(k) + (t - 1)

    def flat_st(self, k, flat):
        side = self.side(k)
        flat = np.asarray(flat)
        return flat // side + 1, flat % side + 1

    def center(self, k, flat):
        """Geometric center of aggregate `flat` at level k."""
        s, t = self.flat_st(k, flat)
        hk = self.h_level(k)
        return np.stack([(s - 0.5) * hk, (t - 0.5) * hk], axis=-1)

    def parent(self, k, flat):
        """Flat level-(k-1) parent of a level-k aggregate."""
        self._check_level(k, lo=2)
        s, t = self.flat_st(k, flat)
        return ((s + 1) // 2 - 1) * self.side(k - 1) + ((t + 1) // 2 - 1)

    def children(self, k, flat):
        """Flat level-(k+1) children of a level-k aggregate, flat-ordered."""
        self._check_level(k)
        if k + 1 > self.q:
            raise InvalidArgumentError(f"level {k} has no children (q={self.q})")
        s, t = self.flat_st(k, flat)
        side = self.side(k + 1)
        base = (2 * s - 2) * side + (2 * t - 2)
        return np.stack([base, base + 1, base + side, base + side + 1], axis=-1)

    # aggregation / measurement matrices ---------------------------------

    def pi_step(self, k):
        """0/1 aggregation pi^(k,k+1) of shape (4^k, 4^(k+1))."""
        self._check_level(k)
        if k == self.q:
            raise InvalidArgumentError(f"pi^(k,k+1) undefined at the finest level k={k}")
        if k not in self._pi_step:
            fine = self.size(k + 1)
            cols = np.arange(fine)
            s, t = self.flat_st(k + 1, cols)
            rows = ((s + 1) // 2 - 1) * self.side(k) + ((t + 1) // 2 - 1)
            mat = sp.coo_array((np.ones(fine), (rows, cols)),
                               shape=(self.size(k), fine))
            self._pi_step[k] = as_csr(mat)
        return self._pi_step[k]

    def pibar_step(self, k):
        """Row-stochastic aggregation pibar^(k,k+1) = pi^(k,k+1) / 4."""
        return as_csr(self.pi_step(k) * 0.25)

    def pi_to_fine(self, k):
        """Aggregation pi^(k,q) from fine nodes to level-k aggregates."""
        self._check_level(k)
        if k not in self._pi_fine:
            n = 2 ** self.q
            N = n * n
            cols = np.arange(N)
            i, j = cols // n + 1, cols % n + 1
            rows = self.aggregate_flat(k, i, j)
            mat = sp.coo_array((np.ones(N), (rows, cols)), shape=(self.size(k), N))
            self._pi_fine[k] = as_csr(mat)
        return self._pi_fine[k]

    def phi(self, k, mass):
        """Measurement matrix Phi^(k) = pi^(k,q) M (rows sum the fine mass rows)."""
        N = 2 ** (2 * self.q)
        if mass.shape != (N, N):
            raise InvalidArgumentError(
                f"mass matrix shape {mass.shape} does not match q={self.q}")
        return as_csr(self.pi_to_fine(k) @ mass)

    def null_basis(self, k, variant="orthonormal"):
        """Per-parent null basis W^(k) of shape (3*4^(k-1), 4^k), for k >= 2.

        Rows are grouped per parent (rows 3p, 3p+1, 3p+2 live on the 4 children
        of parent p) and are exactly orthogonal to the all-ones vector on each
        child block. The orthonormal variant additionally satisfies W W^T = I.
        """
        self._check_level(k, lo=2)
        if variant not in ("chain", "orthonormal"):
            raise InvalidArgumentError(f"unknown null-basis variant {variant!r}")
        key = (k, variant)
        if key not in self._w:
            rows_template = _CHAIN_ROWS if variant == "chain" else _ORTHO_ROWS
            nparent = self.size(k - 1)
            parents = np.arange(nparent)
            child_cols = self.children(k - 1, parents)      # (nparent, 4)
            rows = np.repeat(3 * parents, 12) + np.tile(np.repeat([0, 1, 2], 4), nparent)
            cols = np.repeat(child_cols, 3, axis=0).ravel()
            vals = np.tile(rows_template.ravel(), nparent)
            mat = sp.coo_array((vals, (rows, cols)),
                               shape=(3 * nparent, self.size(k)))
            self._w[key] = as_csr(mat)
        return self._w[key]

    # neighborhoods -------------------------------------------------------

    def neighborhood(self, k, flat, rho):
        """Flat indices of aggregates within distance H_k*rho of `flat`.

        Distance is measured between aggregate representative points, which
        sit on a grid of spacing H_k, so the ball is the index box of
        half-width floor(rho) in the Chebyshev metric, clipped at the domain
        boundary. Contains `flat`; symmetric as a relation; sorted ascending.
        An integer radius rho gives exactly (2 rho + 1)^2 members away from
        the boundary.
        """
        self._check_level(k)
        if rho < 0:
            raise InvalidArgumentError(f"rho must be >= 0, got {rho}")
        side = self.side(k)
        if not 0 <= flat < self.size(k):
            raise InvalidArgumentError(f"aggregate index {flat} outside level {k}")
        s, t = self.flat_st(k, flat)
        w = int(np.floor(rho))
        s_lo, s_hi = max(1, s - w), min(side, s + w)
        t_lo, t_hi = max(1, t - w), min(side, t + w)
        ss = np.arange(s_lo, s_hi + 1)
        tt = np.arange(t_lo, t_hi + 1)
        return ((ss[:, None] - 1) * side + (tt[None, :] - 1)).ravel()

    def chi_neighborhood(self, k, parent_flat, rho):
        """Subband indices at level k whose parent lies in the parent's rho-ball.

        `parent_flat` indexes level k-1; the result has exactly 3 entries per
        parent-ball member, sorted ascending.
        """
        self._check_level(k, lo=2)
        ball = self.neighborhood(k - 1, parent_flat, rho)
        return (3 * np.repeat(ball, 3) + np.tile(np.arange(3), ball.size))

    # serialization --------------------------------------------------------

    def summary(self):
        return {
            "q": self.q,
            "H": self.H,
            "levels": [
                {
                    "k": k,
                    "side": self.side(k),
                    "aggregates": self.size(k),
                    "subband_rows": self.subband_size(k) if k >= 2 else 0,
                    "H_k": self.h_level(k),
                }
                for k in range(1, self.q + 1)
            ],
        }

    def write_summary(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)
            fh.write("\n")


def build_hierarchy(grid):
    """IndexTree for a grid whose interior side is a power of two."""
    n = grid.n
    if n < 2 or (n & (n - 1)) != 0:
        raise InvalidArgumentError(f"grid side {n} is not a power of two >= 2")
    q = int(n).bit_length() - 1
    if grid.q != q:
        raise InvalidArgumentError(f"grid q={grid.q} inconsistent with side {n}")
    return IndexTree(q)


def chain_gram_condition():
    """Condition number of W W^T for the chain variant (exact closed form).

    The 3x3 Gram of the chain rows is tridiag(-1, 2, -1) with eigenvalues
    2 - sqrt(2), 2, 2 + sqrt(2), so the condition number is 3 + 2*sqrt(2).
    """
    return 3.0 + 2.0 * np.sqrt(2.0)
