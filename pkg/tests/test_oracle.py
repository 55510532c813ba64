"""Dense reference route: factorized solves and the closed-form basis formula."""

import numpy as np
import pytest

from gamblets.errors import InvalidArgumentError, NumericalError
from gamblets.grid_fem import (
    assemble_mass,
    assemble_stiffness,
    build_grid,
    coefficient_constant,
    coefficient_example1,
)
from gamblets.hierarchy import build_hierarchy
from gamblets.oracle import (
    MAX_DENSE_SIZE,
    dense_gamblets,
    dense_solve,
    dense_theta,
)


def small_problem(q=3, coeff="example1"):
    grid = build_grid(q)
    coefficient = (coefficient_example1(grid) if coeff == "example1"
                   else coefficient_constant(grid))
    M = assemble_mass(grid).toarray()
    A = assemble_stiffness(grid, coefficient).toarray()
    tree = build_hierarchy(grid)
    return grid, tree, M, A


# --- dense_solve -------------------------------------------------------------


def test_dense_solve_trivial():
    np.testing.assert_allclose(dense_solve(np.eye(3), np.arange(3.0)), np.arange(3.0))
    assert dense_solve(np.array([[2.0]]), np.array([4.0]))[0] == pytest.approx(2.0)


def test_dense_solve_matches_numpy():
    rng = np.random.default_rng(31)
    X = rng.standard_normal((20, 20))
    A = X @ X.T + 20 * np.eye(20)
    B = rng.standard_normal((20, 3))
    np.testing.assert_allclose(dense_solve(A, B), np.linalg.solve(A, B),
                               rtol=1e-10, atol=1e-12)


def test_dense_solve_fine_system_residual():
    """Residual contract on the q=4 fine stiffness system."""
    grid = build_grid(4)
    A = assemble_stiffness(grid, coefficient_example1(grid))
    M = assemble_mass(grid)
    b = M @ np.ones(grid.num_nodes)
    x = dense_solve(A.toarray(), b)
    assert np.linalg.norm(b - A @ x) <= 1e-12 * np.linalg.norm(b)


def test_dense_solve_rejects_indefinite():
    with pytest.raises(NumericalError):
        dense_solve(np.diag([1.0, -1.0]), np.ones(2))


def test_dense_solve_size_guard():
    n = MAX_DENSE_SIZE + 1
    with pytest.raises(InvalidArgumentError):
        dense_solve(np.eye(n), np.ones(n))


def test_dense_solve_shape_guards():
    with pytest.raises(InvalidArgumentError):
        dense_solve(np.eye(3), np.ones(4))
    with pytest.raises(InvalidArgumentError):
        dense_solve(np.ones(3), np.ones(3))


# --- dense_gamblets ------------------------------------------------------------


def test_gamblets_biorthogonal_every_level():
    """Phi Psi^T = I: the defining measurement constraints."""
    _, tree, M, A = small_problem()
    for k in (1, 2, 3):
        Phi = tree.phi(k, M).toarray()
        Psi = dense_gamblets(A, Phi)
        np.testing.assert_allclose(Phi @ Psi.T, np.eye(Phi.shape[0]), atol=1e-10)


def test_gamblets_finest_level_is_mass_inverse():
    """With Phi = M the formula collapses to M^{-1}."""
    _, tree, M, A = small_problem(q=2)
    Psi = dense_gamblets(A, M)
    np.testing.assert_allclose(Psi @ M, np.eye(M.shape[0]), atol=1e-10)
    np.testing.assert_allclose(Psi, np.linalg.inv(M), rtol=1e-8, atol=1e-10)


def test_gamblets_energy_minimality():
    """Any measurement-kernel perturbation raises the energy norm: rows are
    the constrained minimizers, so the first-order term vanishes."""
    _, tree, M, A = small_problem(q=2)
    Phi = tree.phi(1, M).toarray()
    Psi = dense_gamblets(A, Phi)
    rng = np.random.default_rng(8)
    # build a basis of Ker(Phi) and sample perturbations from it
    _, _, vt = np.linalg.svd(Phi)
    kernel = vt[Phi.shape[0]:]
    for i in range(Psi.shape[0]):
        row = Psi[i]
        row_energy = row @ A @ row
        for _ in range(3):
            eta = kernel.T @ rng.standard_normal(kernel.shape[0])
            eta /= np.linalg.norm(eta)
            first_order = abs(row @ A @ eta)
            assert first_order <= 1e-8 * np.sqrt(row_energy) * np.sqrt(eta @ A @ eta)
            perturbed = (row + eta) @ A @ (row + eta)
            assert perturbed > row_energy


def test_gamblets_shape_guard():
    with pytest.raises(InvalidArgumentError):
        dense_gamblets(np.eye(4), np.ones((2, 5)))


# --- dense_theta -----------------------------------------------------------------


def test_theta_spd_and_inverse_of_coarse_stiffness():
    """A^(k) Theta^(k) = I with A^(k) = Psi A Psi^T from the same oracle."""
    _, tree, M, A = small_problem()
    for k in (1, 2, 3):
        Phi = tree.phi(k, M).toarray()
        Theta = dense_theta(A, Phi)
        np.testing.assert_allclose(Theta, Theta.T, atol=1e-12)
        assert np.linalg.eigvalsh(Theta).min() > 0.0
        Psi = dense_gamblets(A, Phi)
        A_k = Psi @ A @ Psi.T
        np.testing.assert_allclose(A_k @ Theta, np.eye(Phi.shape[0]), atol=1e-8)


def test_theta_nesting():
    """Theta^(k) = pi Theta^(k+1) pi^T exactly to rounding at q=3."""
    _, tree, M, A = small_problem()
    thetas = {k: dense_theta(A, tree.phi(k, M).toarray()) for k in (1, 2, 3)}
    for k in (1, 2):
        P = tree.pi_step(k).toarray()
        np.testing.assert_allclose(
            thetas[k], P @ thetas[k + 1] @ P.T, rtol=1e-10, atol=1e-14)


def test_theta_constant_coefficient_rotation_symmetry():
    """a == 1: Theta is invariant under the grid's 90-degree rotation."""
    grid, tree, M, A = small_problem(q=3, coeff="constant")
    n = grid.n
    for k in (1, 2):
        side = tree.side(k)
        s, t = tree.flat_st(k, np.arange(tree.size(k)))
        perm = (t - 1) * side + (side - s)     # (s, t) -> (t, side + 1 - s)
        Theta = dense_theta(A, tree.phi(k, M).toarray())
        np.testing.assert_allclose(Theta[np.ix_(perm, perm)], Theta,
                                   rtol=1e-9, atol=1e-12)
    assert n == 8


def test_oracle_path_independence():
    """Level-k rows via the finer level (Theta^(k),-1 pi Theta^(k+1) Psi^(k+1))
    equal the single-shot formula: the basis depends on (A, Phi^(k)) only."""
    _, tree, M, A = small_problem()
    for k in (1, 2):
        Phi_k = tree.phi(k, M).toarray()
        Phi_next = tree.phi(k + 1, M).toarray()
        direct = dense_gamblets(A, Phi_k)
        P = tree.pi_step(k).toarray()
        theta_next = dense_theta(A, Phi_next)
        theta_k = dense_theta(A, Phi_k)
        composed = np.linalg.solve(
            theta_k, P @ theta_next @ dense_gamblets(A, Phi_next))
        np.testing.assert_allclose(composed, direct, rtol=1e-8, atol=1e-10)
