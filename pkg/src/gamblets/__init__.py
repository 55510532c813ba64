"""Multiresolution solver for rough-coefficient elliptic problems.

The package builds operator-adapted basis functions (gamblets) on a nested
index hierarchy over a structured Q1 grid, decomposes the discrete operator
into independent well-conditioned subband systems, and solves them either
exactly (dense intermediates, the correctness reference) or through localized
patches in near-linear time.
"""

from .errors import InvalidArgumentError, NumericalError
from .grid_fem import (
    CoefficientField,
    Grid,
    LoadVector,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    build_grid,
    coefficient_checkerboard,
    coefficient_constant,
    coefficient_example1,
    energy_norm,
    example_load,
    l2_norm,
)
from .hierarchy import IndexTree, build_hierarchy, chain_gram_condition
from .gamblet_exact import (
    GambletLevel,
    MultiresSolution,
    SolveRecord,
    exact_solve,
)
from .gamblet_fast import (
    FlopCounter,
    LocalGambletLevel,
    LocalizationSchedule,
    fast_solve,
    fast_transform,
    make_schedule,
    solve_with_transform,
)
from .oracle import dense_gamblets, dense_solve, dense_theta
from .diagnostics import (
    Report,
    compress,
    conditioning_table,
    config_hash,
    convergence_table,
    decay_profile,
)

__version__ = "0.1.0"

__all__ = [
    "InvalidArgumentError",
    "NumericalError",
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
    "energy_norm",
    "l2_norm",
    "IndexTree",
    "build_hierarchy",
    "chain_gram_condition",
    "GambletLevel",
    "MultiresSolution",
    "SolveRecord",
    "exact_solve",
    "LocalizationSchedule",
    "LocalGambletLevel",
    "FlopCounter",
    "make_schedule",
    "fast_transform",
    "fast_solve",
    "solve_with_transform",
    "dense_solve",
    "dense_theta",
    "dense_gamblets",
    "Report",
    "config_hash",
    "conditioning_table",
    "decay_profile",
    "compress",
    "convergence_table",
    "__version__",
]
