"""Empirical evidence tables: decay, conditioning, spectra, compression, convergence.

All tables are computed from raw vectors (never from cached errors), carry the
run's config hash, and serialize to CSV/JSON/PGM with stable names so repeat
runs are diffable. Golden-file regression logic lives in the test suite; this
module only produces the numbers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .grid_fem import STIFFNESS_ELEMENT, cell_corner_nodes, energy_norm, write_pgm
from .sparse_core import eig_extremes

__all__ = [
    "config_hash",
    "cell_energies",
    "decay_profile",
    "fit_log_slope",
    "conditioning_table",
    "coefficient_spectrum",
    "compress",
    "convergence_table",
    "Report",
]


def config_hash(config):
    """12-hex digest of a flat config mapping (sorted key=value lines)."""
    lines = [f"{k}={config[k]}" for k in sorted(config)]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:12]


def cell_energies(grid, coefficient, v):
    """Per-cell energy contributions of a fine-grid vector v (sums to v^T A v)."""
    v = np.asarray(v, dtype=float)
    if v.shape != (grid.num_nodes,):
        raise InvalidArgumentError(
            f"expected {grid.num_nodes} nodal values, got shape {v.shape}")
    corners = cell_corner_nodes(grid)              # (ncells, 4), -1 = boundary
    vals = np.where(corners >= 0, v[np.clip(corners, 0, None)], 0.0)
    quad = np.einsum("ci,ij,cj->c", vals, STIFFNESS_ELEMENT, vals)
    return coefficient.values * quad


def cell_centers(grid):
    m = grid.n + 1
    ci, cj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    return np.column_stack([(ci.ravel() + 0.5) * grid.h, (cj.ravel() + 0.5) * grid.h])


def decay_profile(grid, coefficient, psi_row, center, radii):
    """Energy fraction of psi_row outside the ball B(center, r) for each r.

    A cell counts as outside when its center is at Euclidean distance >= r, so
    the fraction is exactly 1 at r = 0 and exactly 0 once r exceeds the domain
    diameter. Monotone nonincreasing in r by construction.
    """
    energies = cell_energies(grid, coefficient, psi_row)
    total = energies.sum()
    if total <= 0.0:
        raise InvalidArgumentError("basis vector has zero energy")
    centers = cell_centers(grid)
    dist = np.hypot(centers[:, 0] - center[0], centers[:, 1] - center[1])
    radii = np.asarray(radii, dtype=float)
    outside = dist[None, :] >= radii[:, None]
    fractions = (outside @ energies) / total
    return np.clip(fractions, 0.0, None)


def fit_log_slope(radii, fractions, floor=1e-13):
    """Least-squares slope of log(fraction) against r over the decaying range."""
    radii = np.asarray(radii, dtype=float)
    fractions = np.asarray(fractions, dtype=float)
    mask = (fractions > floor) & (fractions < 1.0)
    if mask.sum() < 2:
        raise InvalidArgumentError("not enough positive samples to fit a slope")
    coeffs = np.polyfit(radii[mask], np.log(fractions[mask]), 1)
    return float(coeffs[0])


def conditioning_table(named_matrices, tol=1e-2):
    """Rows (label, size, lambda_min, lambda_max, cond) via power/inverse iteration."""
    rows = []
    for label, mat in named_matrices:
        lmin, lmax = eig_extremes(mat, tol=tol)
        rows.append((label, int(mat.shape[0]), lmin, lmax, lmax / lmin))
    return rows


def coefficient_spectrum(solution, levels):
    """Per-level coefficient magnitudes scaled by the energy norm of their basis
    vector: |U_i| ||psi_i^(1)||_a at the coarse level, |w_i^(k)| ||chi_i^(k)||_a
    in the subbands (both read off matrix diagonals)."""
    spectrum = {}
    lev1 = levels[1]
    spectrum[1] = np.abs(solution.u1_coarse) * np.sqrt(np.diag(lev1.stiffness))
    for k, w in sorted(solution.subband_coeffs.items()):
        B = levels[k].subband
        spectrum[k] = np.abs(w) * np.sqrt(np.diag(B))
    return spectrum


def compress(solution, levels, A_fine, keep_fraction):
    """Zero all but the largest `keep_fraction` of normalized coefficients.

    Returns (u_compressed, relative A-norm error vs the full reconstruction).
    keep_fraction = 1 reproduces the solution exactly (identical arithmetic).
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise InvalidArgumentError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    spectrum = coefficient_spectrum(solution, levels)
    sizes = {k: v.size for k, v in spectrum.items()}
    all_mags = np.concatenate([spectrum[k] for k in sorted(spectrum)])
    total = all_mags.size
    n_keep = int(np.ceil(keep_fraction * total))
    # stable selection of the n_keep largest magnitudes
    order = np.argsort(-all_mags, kind="stable")
    keep_mask = np.zeros(total, dtype=bool)
    keep_mask[order[:n_keep]] = True

    masks = {}
    offset = 0
    for k in sorted(spectrum):
        masks[k] = keep_mask[offset:offset + sizes[k]]
        offset += sizes[k]

    u1 = levels[1].psi.T @ np.where(masks[1], solution.u1_coarse, 0.0)
    u_comp = u1
    for k in sorted(solution.subband_coeffs):
        w = np.where(masks[k], solution.subband_coeffs[k], 0.0)
        lev = levels[k]
        u_comp = u_comp + lev.psi.T @ (lev.null_w.T @ w)
    diff = u_comp - solution.u
    rel = energy_norm(A_fine, diff) / energy_norm(A_fine, solution.u)
    return u_comp, float(rel)


def convergence_table(solution, u_ref, A_fine, lambda_min_a, g_l2, H=0.5):
    """Rows (k, error, bound, ratio) with the a-priori energy-error bound
    (2 / (pi sqrt(lambda_min(a)))) H^k ||g||_L2 per level."""
    u_norm = energy_norm(A_fine, u_ref)
    rows = []
    for k in sorted(solution.partials):
        err = energy_norm(A_fine, u_ref - solution.partials[k])
        bound = 2.0 / (np.pi * np.sqrt(lambda_min_a)) * H ** k * g_l2
        rows.append((k, float(err), float(bound), float(err / bound),
                     float(err / u_norm)))
    return rows


@dataclass
class Report:
    """A bundle of named tables plus raster handles, tagged by config hash."""

    config: dict
    tables: dict = field(default_factory=dict)    # name -> (header, rows)
    rasters: dict = field(default_factory=dict)   # name -> 2-d array (+log flag)
    metadata: dict = field(default_factory=dict)

    @property
    def hash(self):
        return config_hash(self.config)

    def add_table(self, name, header, rows):
        self.tables[name] = (list(header), [list(r) for r in rows])

    def add_raster(self, name, values_2d, log_scale=False):
        self.rasters[name] = (np.asarray(values_2d, dtype=float), log_scale)

    def write(self, out_dir):
        """Write name_<hash>.csv per table, name_<hash>.pgm per raster, and a
        report_<hash>.json summary. Returns the list of created file names."""
        from pathlib import Path
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tag = self.hash
        created = []
        for name, (header, rows) in sorted(self.tables.items()):
            path = out_dir / f"{name}_{tag}.csv"
            with open(path, "w") as fh:
                fh.write(f"# config {tag}\n")
                fh.write(",".join(header) + "\n")
                for row in rows:
                    fh.write(",".join(_fmt(v) for v in row) + "\n")
            created.append(path.name)
        for name, (values, log_scale) in sorted(self.rasters.items()):
            path = out_dir / f"{name}_{tag}.pgm"
            write_pgm(path, values, log_scale=log_scale, comment=f"config {tag}")
            created.append(path.name)
        summary = {
            "config_hash": tag,
            "config": {k: str(v) for k, v in sorted(self.config.items())},
            "tables": sorted(self.tables),
            "rasters": sorted(self.rasters),
            "metadata": self.metadata,
        }
        path = out_dir / f"report_{tag}.json"
        with open(path, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        created.append(path.name)
        return created


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17e}"
    return str(v)
