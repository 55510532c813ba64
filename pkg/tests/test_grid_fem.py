"""Grid, coefficient fields, Q1 assembly, load vectors, field IO."""

import numpy as np
import pytest
import scipy.sparse as sp

from gamblets.errors import InvalidArgumentError, NumericalError
from gamblets.grid_fem import (
    MASS_ELEMENT,
    STIFFNESS_ELEMENT,
    CoefficientField,
    LoadVector,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    build_grid,
    cell_corner_nodes,
    coefficient_checkerboard,
    coefficient_constant,
    coefficient_example1,
    energy_norm,
    example_load,
    l2_norm,
    read_field_csv,
    write_field_csv,
    write_pgm,
)


def test_grid_dimensions():
    """n = 2^q interior nodes per side, h = 1/(n+1), both to depth 6."""
    for q in range(1, 7):
        grid = build_grid(q)
        assert grid.n == 2 ** q
        assert grid.h == pytest.approx(1.0 / (2 ** q + 1), rel=1e-15)
        assert grid.num_nodes == 4 ** q
        assert grid.num_cells == (2 ** q + 1) ** 2
    assert build_grid(6).h == pytest.approx(1.0 / 65.0, rel=1e-15)


def test_grid_argument_guards():
    for bad in (0, 13, -1, 2.0, "3", True):
        with pytest.raises(InvalidArgumentError):
            build_grid(bad)


def test_node_indexing_round_trip():
    grid = build_grid(3)
    flat = np.arange(grid.num_nodes)
    i, j = grid.node_ij(flat)
    assert np.all(grid.node_flat(i, j) == flat)
    assert i.min() == 1 and i.max() == grid.n

    pos = grid.node_positions()
    assert pos.shape == (grid.num_nodes, 2)
    # positions are integer multiples of h strictly inside the unit square
    steps = pos / grid.h
    np.testing.assert_allclose(steps, np.rint(steps), atol=1e-12)
    assert pos.min() > 0.0 and pos.max() < 1.0


def test_element_matrices_closed_form():
    """The 4x4 Q1 element matrices on the reference cell."""
    mass = np.array(
        [[4, 2, 1, 2], [2, 4, 2, 1], [1, 2, 4, 2], [2, 1, 2, 4]]) / 36.0
    stiff = np.array(
        [[4, -1, -2, -1], [-1, 4, -1, -2], [-2, -1, 4, -1], [-1, -2, -1, 4]]) / 6.0
    np.testing.assert_allclose(MASS_ELEMENT, mass, rtol=1e-15)
    np.testing.assert_allclose(STIFFNESS_ELEMENT, stiff, rtol=1e-15)
    # both are symmetric positive semidefinite; stiffness kills constants
    assert np.linalg.eigvalsh(mass).min() > 0.0
    w = np.linalg.eigvalsh(stiff)
    assert w.min() == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(stiff @ np.ones(4), 0.0, atol=1e-14)


def test_cell_corner_nodes_layout():
    grid = build_grid(2)
    corners = cell_corner_nodes(grid)
    assert corners.shape == (grid.num_cells, 4)
    # the corner cell at the origin touches exactly one interior node (NE)
    first = corners[0]
    assert list(first[:3]) == [-1, -1, -1] or np.sum(first >= 0) == 1
    assert first[2] == grid.node_flat(1, 1)
    # a fully interior cell lists 4 distinct interior nodes in SW,SE,NE,NW order
    m = grid.n + 1
    cell = 2 * m + 2                     # cell (2, 2)
    sw, se, ne, nw = corners[cell]
    assert sw == grid.node_flat(2, 2)
    assert se == grid.node_flat(3, 2)
    assert ne == grid.node_flat(3, 3)
    assert nw == grid.node_flat(2, 3)


def test_constant_coefficient_stencil():
    """a == 1 assembled stiffness: diagonal 8/3, all eight neighbors -1/3."""
    grid = build_grid(3)
    A = assemble_stiffness(grid, coefficient_constant(grid)).toarray()
    center = grid.node_flat(4, 4)
    assert A[center, center] == pytest.approx(8.0 / 3.0, rel=1e-14)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == dj == 0:
                continue
            assert A[center, grid.node_flat(4 + di, 4 + dj)] == pytest.approx(
                -1.0 / 3.0, rel=1e-14)


def test_assembled_matrices_symmetric_positive_definite():
    grid = build_grid(3)
    M = assemble_mass(grid).toarray()
    A = assemble_stiffness(grid, coefficient_example1(grid)).toarray()
    np.testing.assert_allclose(M, M.T, rtol=0, atol=1e-15)
    np.testing.assert_allclose(A, A.T, rtol=0, atol=1e-13)
    assert np.linalg.eigvalsh(M).min() > 0.0
    assert np.linalg.eigvalsh(A).min() > 0.0


def test_row_sums_interior():
    """Mass rows sum to h^2 and stiffness rows to 0 away from the boundary."""
    grid = build_grid(4)
    M = assemble_mass(grid)
    A = assemble_stiffness(grid, coefficient_example1(grid))
    mass_sums = np.asarray(M.sum(axis=1)).ravel()
    stiff_sums = np.asarray(A.sum(axis=1)).ravel()
    i, j = grid.node_ij(np.arange(grid.num_nodes))
    interior = (i > 1) & (i < grid.n) & (j > 1) & (j < grid.n)
    np.testing.assert_allclose(mass_sums[interior], grid.h ** 2, rtol=1e-13)
    np.testing.assert_allclose(stiff_sums[interior], 0.0, atol=1e-14)
    # boundary-adjacent rows lose mass and gain stiffness
    assert np.all(mass_sums[~interior] < grid.h ** 2)
    assert np.all(stiff_sums[~interior] > 0.0)


def test_example_coefficient_values():
    """Corner value 1.5^6, positivity, and the depth-6 contrast."""
    grid = build_grid(6)
    coeff = coefficient_example1(grid)
    assert coeff.values[0] == pytest.approx(1.5 ** 6, rel=1e-14)
    assert coeff.values.min() > 0.0
    assert coeff.label == "example1"
    # high contrast, approx 1.87e3 at depth 6 (3 significant figures)
    assert float(f"{coeff.contrast:.3g}") == pytest.approx(1870.0)
    assert coeff.lambda_min == pytest.approx(2.48543069724088163e-02, rel=1e-12)
    assert coeff.lambda_max == pytest.approx(4.63782758237267956e+01, rel=1e-12)


def test_coefficient_field_guards():
    grid = build_grid(2)
    with pytest.raises(InvalidArgumentError):
        CoefficientField(grid=grid, values=np.ones(3))
    with pytest.raises(InvalidArgumentError):
        CoefficientField(grid=grid, values=np.zeros(grid.num_cells))
    with pytest.raises(InvalidArgumentError):
        coefficient_constant(grid, value=-1.0)
    with pytest.raises(InvalidArgumentError):
        coefficient_checkerboard(grid, contrast=0.5, seed=0)
    other = build_grid(3)
    with pytest.raises(InvalidArgumentError):
        assemble_stiffness(grid, coefficient_constant(other))


def test_checkerboard_deterministic_and_ranged():
    grid = build_grid(3)
    a = coefficient_checkerboard(grid, contrast=100.0, seed=7)
    b = coefficient_checkerboard(grid, contrast=100.0, seed=7)
    c = coefficient_checkerboard(grid, contrast=100.0, seed=8)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert a.values.min() >= 1.0 and a.values.max() <= 100.0
    assert a.contrast > 10.0


def test_example_load_checksums():
    """Depth-6 load vector magnitudes, frozen."""
    grid = build_grid(6)
    load = assemble_load(grid, example_load(grid))
    assert np.linalg.norm(load.b) == pytest.approx(1.526470754000448e-02, rel=1e-12)
    assert np.abs(load.b).sum() == pytest.approx(8.477870397276775e-01, rel=1e-12)


def test_load_vector_is_mass_times_nodal():
    grid = build_grid(3)
    M = assemble_mass(grid)
    g = example_load(grid)
    load = assemble_load(grid, g, mass=M)
    assert isinstance(load, LoadVector)
    np.testing.assert_allclose(load.b, M @ g, rtol=1e-15)
    np.testing.assert_array_equal(load.g_nodal, g)
    with pytest.raises(InvalidArgumentError):
        assemble_load(grid, g[:-1])


def test_energy_norm_guards_indefinite():
    A = -np.eye(3)
    with pytest.raises(NumericalError):
        energy_norm(A, np.ones(3))
    # a tiny negative value from rounding clamps to zero
    assert energy_norm(np.diag([1.0, 1e-30]), np.array([0.0, 1e-3])) >= 0.0


def test_l2_norm_matches_mass_energy():
    grid = build_grid(3)
    M = assemble_mass(grid)
    g = example_load(grid)
    assert l2_norm(M, g) == pytest.approx(energy_norm(M, g), rel=1e-15)
    assert l2_norm(M, g) > 0.0


def test_field_csv_round_trip(tmp_path):
    field = np.arange(12.0).reshape(3, 4) * np.pi
    path = tmp_path / "field.csv"
    write_field_csv(path, field, comment="meta")
    back = read_field_csv(path)
    np.testing.assert_array_equal(back, field)


def test_pgm_format(tmp_path):
    path = tmp_path / "img.pgm"
    write_pgm(path, np.array([[1.0, 2.0], [3.0, 4.0]]), log_scale=True)
    lines = path.read_text().splitlines()
    assert lines[0] == "P2"
    assert lines[1] == "2 2"
    assert lines[2] == "255"
    assert lines[3].split()[0] == "0"
    with pytest.raises(InvalidArgumentError):
        write_pgm(path, np.array([[0.0, 1.0]]), log_scale=True)


def test_sparsity_is_nine_point():
    grid = build_grid(4)
    A = assemble_stiffness(grid, coefficient_example1(grid))
    per_row = np.diff(A.indptr)
    assert per_row.max() == 9
    assert per_row.min() == 4   # corner node
    assert sp.issparse(A)
