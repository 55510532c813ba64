"""Shared fixtures: cached problem assemblies, reference solves, pinned values.

The expensive objects (assembled problems, exact transforms, dense reference
solutions, localized runs) are built once per session and shared across test
modules through factory fixtures keyed on their parameters.

Pinned reference values live in golden/goldens.json. A key that is not yet
present is written on first use (the pinning run also asserts the structural
properties of the value, never just stores blindly); on later runs the stored
value is asserted against within the caller's tolerance.
"""

import json
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from gamblets.gamblet_exact import exact_solve
from gamblets.gamblet_fast import fast_solve
from gamblets.grid_fem import (
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    build_grid,
    coefficient_checkerboard,
    coefficient_constant,
    coefficient_example1,
    example_load,
)
from gamblets.hierarchy import build_hierarchy
from gamblets.oracle import dense_solve

GOLDEN_FILE = Path(__file__).parent / "golden" / "goldens.json"


class GoldenStore:
    """Read-through store for measured reference values.

    check(key, value, rtol) pins `value` under `key` if absent, else asserts
    the new measurement matches the stored one. Scalars and flat lists only.
    """

    def __init__(self, path):
        self.path = path
        self.data = json.loads(path.read_text()) if path.exists() else {}

    def check(self, key, value, rtol=1e-6):
        value = np.asarray(value, dtype=float)
        if key not in self.data:
            self.data[key] = value.tolist()
            self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True))
            return value
        stored = np.asarray(self.data[key], dtype=float)
        assert stored.shape == value.shape, (
            f"golden {key}: shape {value.shape} != stored {stored.shape}")
        np.testing.assert_allclose(
            value, stored, rtol=rtol, atol=0.0,
            err_msg=f"golden {key} drifted (rtol {rtol:g})")
        return stored


@pytest.fixture(scope="session")
def goldens():
    GOLDEN_FILE.parent.mkdir(exist_ok=True)
    return GoldenStore(GOLDEN_FILE)


def _coefficient(grid, spec):
    if spec == "example1":
        return coefficient_example1(grid)
    if spec == "constant":
        return coefficient_constant(grid)
    if isinstance(spec, tuple) and spec[0] == "checkerboard":
        return coefficient_checkerboard(grid, contrast=spec[1], seed=spec[2])
    raise ValueError(f"unknown coefficient spec {spec!r}")


@pytest.fixture(scope="session")
def problem():
    """Factory: problem(q, coeff) -> assembled grid/matrices/load, cached."""
    cache = {}

    def build(q, coeff="example1"):
        key = (q, coeff)
        if key not in cache:
            grid = build_grid(q)
            coefficient = _coefficient(grid, coeff)
            M = assemble_mass(grid)
            A = assemble_stiffness(grid, coefficient)
            load = assemble_load(grid, example_load(grid), mass=M)
            tree = build_hierarchy(grid)
            cache[key] = SimpleNamespace(
                q=q, grid=grid, coefficient=coefficient, M=M, A=A,
                load=load, tree=tree)
        return cache[key]

    return build


@pytest.fixture(scope="session")
def dense_reference(problem):
    """Factory: dense_reference(q, coeff) -> fine Galerkin solution, cached."""
    cache = {}

    def solve(q, coeff="example1"):
        key = (q, coeff)
        if key not in cache:
            p = problem(q, coeff)
            cache[key] = dense_solve(p.A, p.load.b)
        return cache[key]

    return solve


@pytest.fixture(scope="session")
def exact_run(problem):
    """Factory: exact_run(q, coeff, ...) -> (solution, levels), cached."""
    cache = {}

    def run(q, coeff="example1", w_variant="orthonormal",
            level_q_init="mass_inverse"):
        key = (q, coeff, w_variant, level_q_init)
        if key not in cache:
            p = problem(q, coeff)
            cache[key] = exact_solve(p.M, p.A, p.load, p.tree,
                                     w_variant=w_variant,
                                     level_q_init=level_q_init)
        return cache[key]

    return run


@pytest.fixture(scope="session")
def fast_run(problem):
    """Factory: fast_run(q, eps, ...) -> FastResult, cached."""
    cache = {}

    def run(q, eps, coeff="example1", c_rho=None, uniform_rho=None,
            w_variant="orthonormal", c_tol=None):
        key = (q, eps, coeff, c_rho, uniform_rho, w_variant, c_tol)
        if key not in cache:
            p = problem(q, coeff)
            kwargs = {} if c_tol is None else {"c_tol": c_tol}
            cache[key] = fast_solve(p.M, p.A, p.load, p.tree, eps,
                                    c_rho=c_rho, uniform_rho=uniform_rho,
                                    w_variant=w_variant, **kwargs)
        return cache[key]

    return run
