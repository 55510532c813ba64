"""Structured Q1 finite elements on the unit square with Dirichlet boundary.

The grid has n = 2^q interior nodes per dimension (h = 1/(n+1)); boundary
nodes are eliminated, so every assembled matrix is N x N with N = 4^q.
Element matrices are exact closed forms for bilinear elements on squares,
with the scalar coefficient piecewise constant per cell:

    mass     M_e = h^2/36 * [[4,2,1,2],[2,4,2,1],[1,2,4,2],[2,1,2,4]]
    stiffness K_e = a_c/6  * [[4,-1,-2,-1],[-1,4,-1,-2],[-2,-1,4,-1],[-1,-2,-1,4]]

in corner order (SW, SE, NE, NW). Nodes are indexed (i, j) in {1..n}^2 at
position (i*h, j*h), flattened row-major as (i-1)*n + (j-1); cells (ci, cj) in
{0..n}^2 flattened as ci*(n+1) + cj.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError, NumericalError
from .sparse_core import as_csr

__all__ = [
    "Grid",
    "CoefficientField",
    "LoadVector",
    "build_grid",
    "coefficient_example1",
    "coefficient_constant",
    "coefficient_checkerboard",
    "example_load",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_load",
    "cell_corner_nodes",
    "energy_norm",
    "l2_norm",
    "write_field_csv",
    "read_field_csv",
    "write_pgm",
]

# exact Q1 element matrices in corner order (SW, SE, NE, NW); mass carries h^2,
# stiffness is h-independent in 2d
MASS_ELEMENT = np.array(
    [[4, 2, 1, 2],
     [2, 4, 2, 1],
     [1, 2, 4, 2],
     [2, 1, 2, 4]], dtype=float) / 36.0
STIFFNESS_ELEMENT = np.array(
    [[4, -1, -2, -1],
     [-1, 4, -1, -2],
     [-2, -1, 4, -1],
     [-1, -2, -1, 4]], dtype=float) / 6.0


@dataclass(frozen=True)
class Grid:
    """Interior-node view of the uniform grid at refinement depth q."""

    q: int
    n: int
    h: float

    @property
    def num_nodes(self):
        return self.n * self.n

    @property
    def num_cells(self):
        return (self.n + 1) * (self.n + 1)

    def node_flat(self, i, j):
        """Flat index of interior node (i, j), both in 1..n."""
        return (np.asarray(i) - 1) * self.n + (np.asarray(j) - 1)

    def node_ij(self, flat):
        """(i, j) of a flat interior index."""
        flat = np.asarray(flat)
        return flat // self.n + 1, flat % self.n + 1

    def node_positions(self):
        """(N, 2) array of interior node coordinates, flat order."""
        ij = np.arange(1, self.n + 1)
        xi, yj = np.meshgrid(ij, ij, indexing="ij")
        return np.column_stack([xi.ravel() * self.h, yj.ravel() * self.h])


def build_grid(q):
    """Grid at depth q (guarded to 1 <= q <= 12)."""
    if not isinstance(q, (int, np.integer)) or isinstance(q, bool):
        raise InvalidArgumentError(f"q must be an integer, got {q!r}")
    if not 1 <= q <= 12:
        raise InvalidArgumentError(f"q must be in [1, 12], got {q}")
    n = 2 ** int(q)
    return Grid(q=int(q), n=n, h=1.0 / (n + 1))


@dataclass(frozen=True)
class CoefficientField:
    """Strictly positive scalar coefficient, one value per cell (flat order)."""

    grid: Grid
    values: np.ndarray
    label: str = "custom"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.num_cells,):
            raise InvalidArgumentError(
                f"expected {self.grid.num_cells} cell values, got shape {vals.shape}")
        if not np.all(vals > 0.0):
            raise InvalidArgumentError("coefficient values must be strictly positive")
        object.__setattr__(self, "values", vals)

    @property
    def lambda_min(self):
        return float(self.values.min())

    @property
    def lambda_max(self):
        return float(self.values.max())

    @property
    def contrast(self):
        return self.lambda_max / self.lambda_min

    def as_cell_grid(self):
        m = self.grid.n + 1
        return self.values.reshape(m, m)


def coefficient_example1(grid):
    """Built-in oscillatory high-contrast coefficient (`example1`).

    Cell (ci, cj) takes the value of

        prod_{k=1}^{6} (1 + 0.5 cos(2^k pi (ci+cj)/(n+1)))
                     * (1 + 0.5 sin(2^k pi (cj-3ci)/(n+1)))

    evaluated at the cell's lower-left corner index, so a(0,0) = 1.5^6 and the
    contrast at q=6 is about 1.87e3.
    """
    m = grid.n + 1
    ci, cj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    s = (ci + cj) / m
    t = (cj - 3.0 * ci) / m
    vals = np.ones((m, m))
    for k in range(1, 7):
        w = (2.0 ** k) * np.pi
        vals *= (1.0 + 0.5 * np.cos(w * s)) * (1.0 + 0.5 * np.sin(w * t))
    return CoefficientField(grid=grid, values=vals.ravel(), label="example1")


def coefficient_constant(grid, value=1.0):
    """Constant coefficient a == value (> 0)."""
    value = float(value)
    if not value > 0.0:
        raise InvalidArgumentError(f"constant coefficient must be > 0, got {value}")
    return CoefficientField(grid=grid, values=np.full(grid.num_cells, value),
                            label=f"constant:{value:g}")


def coefficient_checkerboard(grid, contrast, seed):
    """Per-cell values drawn log-uniformly from [1, contrast], deterministic in seed."""
    contrast = float(contrast)
    if not contrast >= 1.0:
        raise InvalidArgumentError(f"contrast must be >= 1, got {contrast}")
    rng = np.random.default_rng(int(seed))
    u = rng.random(grid.num_cells)
    vals = np.exp(u * np.log(contrast))
    return CoefficientField(grid=grid, values=vals,
                            label=f"checkerboard:{contrast:g}:{int(seed)}")


def example_load(grid):
    """Nodal values of the built-in example load.

    g(z) = cos(3 z1 + z2) + sin(3 z2) + sin(7 z1 - 5 z2) at interior nodes.
    """
    z = grid.node_positions()
    z1, z2 = z[:, 0], z[:, 1]
    return np.cos(3.0 * z1 + z2) + np.sin(3.0 * z2) + np.sin(7.0 * z1 - 5.0 * z2)


def cell_corner_nodes(grid):
    """Flat interior indices of the 4 corners of every cell; -1 marks boundary.

    Corner order matches the element matrices: SW, SE, NE, NW.
    """
    n = grid.n
    m = n + 1
    ci, cj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    ci, cj = ci.ravel(), cj.ravel()
    corners_i = np.stack([ci, ci + 1, ci + 1, ci], axis=1)
    corners_j = np.stack([cj, cj, cj + 1, cj + 1], axis=1)
    interior = (corners_i >= 1) & (corners_i <= n) & (corners_j >= 1) & (corners_j <= n)
    flat = (corners_i - 1) * n + (corners_j - 1)
    return np.where(interior, flat, -1)


def _assemble(grid, element, cell_scale):
    corners = cell_corner_nodes(grid)
    ncells = corners.shape[0]
    rows = np.repeat(corners, 4, axis=1).ravel()
    cols = np.tile(corners, (1, 4)).ravel()
    vals = (cell_scale[:, None, None] * element[None, :, :]).ravel()
    keep = (rows >= 0) & (cols >= 0)
    N = grid.num_nodes
    A = sp.coo_array((vals[keep], (rows[keep], cols[keep])), shape=(N, N))
    return as_csr(A)


def assemble_mass(grid):
    """Q1 mass matrix (coefficient-independent, 9-point stencil)."""
    scale = np.full(grid.num_cells, grid.h * grid.h)
    return _assemble(grid, MASS_ELEMENT, scale)


def assemble_stiffness(grid, coefficient):
    """Q1 stiffness matrix for a per-cell coefficient field."""
    if coefficient.grid != grid:
        raise InvalidArgumentError("coefficient was built for a different grid")
    return _assemble(grid, STIFFNESS_ELEMENT, coefficient.values)


@dataclass(frozen=True)
class LoadVector:
    """Right-hand side b = M g_nodal, retaining the raw nodal values."""

    b: np.ndarray
    g_nodal: np.ndarray


def assemble_load(grid, g_nodal, mass=None):
    """Load vector for nodal data g (b_i = integral of g against the i-th hat)."""
    g_nodal = np.asarray(g_nodal, dtype=float)
    if g_nodal.shape != (grid.num_nodes,):
        raise InvalidArgumentError(
            f"expected {grid.num_nodes} nodal values, got shape {g_nodal.shape}")
    M = assemble_mass(grid) if mass is None else mass
    return LoadVector(b=M @ g_nodal, g_nodal=g_nodal.copy())


def energy_norm(A, x, tol=1e-12):
    """sqrt(x^T A x), guarding against an indefinite quadratic form."""
    x = np.asarray(x, dtype=float)
    s = float(x @ (A @ x))
    if s < 0.0:
        scale = float(np.abs(A.data).max() if sp.issparse(A) else np.abs(A).max())
        if s < -tol * scale * float(x @ x):
            raise NumericalError(f"quadratic form is negative: x^T A x = {s:.3e}")
        s = 0.0
    return np.sqrt(s)


def l2_norm(M, g_nodal):
    """L2 norm of the piecewise-bilinear interpolant with nodal values g."""
    return energy_norm(M, g_nodal)


# field IO: CSV for exact values, PGM rasters for quick looks

def write_field_csv(path, values_2d, comment=""):
    """Row-major CSV dump of a 2-d field, full precision."""
    values_2d = np.asarray(values_2d, dtype=float)
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for row in values_2d:
            fh.write(",".join(f"{v:.17e}" for v in row) + "\n")


def read_field_csv(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(tok) for tok in line.split(",")])
    return np.array(rows)


def write_pgm(path, values_2d, log_scale=False, comment=""):
    """8-bit ASCII PGM raster, min-max scaled (log10 first when log_scale).

    Intended for eyeballing coefficient fields and basis functions; CSV is the
    authoritative export.
    """
    vals = np.asarray(values_2d, dtype=float)
    if log_scale:
        if not np.all(vals > 0.0):
            raise InvalidArgumentError("log-scaled raster requires positive values")
        vals = np.log10(vals)
    lo, hi = float(vals.min()), float(vals.max())
    if hi > lo:
        scaled = np.rint((vals - lo) / (hi - lo) * 255.0).astype(int)
    else:
        scaled = np.zeros(vals.shape, dtype=int)
    with open(path, "w") as fh:
        fh.write("P2\n")
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(f"{vals.shape[1]} {vals.shape[0]}\n255\n")
        for row in scaled:
            fh.write(" ".join(str(v) for v in row) + "\n")
