import numpy as np
import pytest
import scipy.sparse as sp

from spdefield.errors import InvalidArgumentError
from spdefield.services.assembly import (
    assemble_divergence,
    assemble_level,
    assemble_p0_mass,
    assemble_rt_mass,
    assemble_spde_schur,
    discrete_gradient_apply,
    eliminate_essential,
)
from spdefield.services.mesh import build_cartesian_mesh


def dense(A):
    return A.toarray() if sp.issparse(A) else np.asarray(A)


def test_p0_mass_is_cell_volume(square):
    assert np.allclose(assemble_p0_mass(square), 1 / 16)


def test_divergence_of_constant_flux_vanishes(square):
    B = assemble_divergence(square)
    assert B.shape == (16, square.num_faces)
    assert set(np.unique(B.data)) == {-1.0, 1.0}
    assert np.allclose(B @ np.ones(square.num_faces), 0.0)


def test_rt_mass_single_cell():
    mesh = build_cartesian_mesh(2, (0, 0), (1, 1), (1, 1))
    M = dense(assemble_rt_mass(mesh))
    block = np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
    assert np.allclose(M[:2, :2], block)
    assert np.allclose(M[2:, 2:], block)
    assert np.allclose(M[:2, 2:], 0.0)


def test_rt_mass_scales_with_aspect_and_coefficient():
    mesh = build_cartesian_mesh(2, (0, 0), (2, 1), (1, 1))
    M = dense(assemble_rt_mass(mesh, 3.0))
    assert M[0, 0] == pytest.approx(3.0 * 2.0 / 3.0)
    assert M[2, 2] == pytest.approx(3.0 * 0.5 / 3.0)


def test_rt_mass_is_spd(cube):
    M = dense(assemble_rt_mass(cube))
    assert np.allclose(M, M.T)
    assert np.linalg.eigvalsh(M).min() > 0


@pytest.mark.parametrize("coef", [0.0, -1.0, np.nan])
def test_rt_mass_rejects_bad_coefficient(square, coef):
    with pytest.raises(InvalidArgumentError):
        assemble_rt_mass(square, coef)


def test_eliminate_essential():
    A = sp.csr_matrix(np.array([[4.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 4.0]]))
    out = dense(eliminate_essential(A, np.array([0])))
    assert np.array_equal(out[0], [1.0, 0.0, 0.0])
    assert np.array_equal(out[:, 0], [1.0, 0.0, 0.0])
    assert np.array_equal(out[1:, 1:], [[4.0, 1.0], [1.0, 4.0]])


def test_schur_is_symmetric_with_unit_essential_rows(square):
    A = dense(assemble_spde_schur(square, kappa=3.0))
    essential = square.boundary_faces()
    assert np.allclose(A, A.T)
    assert np.allclose(A[essential][:, essential], np.eye(essential.size))
    assert np.linalg.eigvalsh(A).min() > 0


def test_schur_rejects_bad_kappa(square):
    with pytest.raises(InvalidArgumentError):
        assemble_spde_schur(square, kappa=0.0)


def test_assemble_level_bundles_operators(square):
    level = assemble_level(square, 2.0)
    assert level.num_cells == 16
    assert level.free_faces.size == square.num_faces - square.boundary_faces().size
    assert level.A.shape == (square.num_faces, square.num_faces)


@pytest.mark.parametrize("fixture", ["hierarchy_2d", "hierarchy_3d"])
def test_galerkin_identities(fixture, request):
    h = request.getfixturevalue(fixture)
    for level in range(h.num_levels - 1):
        fine, coarse = h.levels[level], h.levels[level + 1]
        Pu, Pt = h.p_u[level], h.p_theta[level]
        Mf, Mc = assemble_rt_mass(fine), assemble_rt_mass(coarse)
        Bf, Bc = assemble_divergence(fine), assemble_divergence(coarse)
        Wf, Wc = sp.diags(assemble_p0_mass(fine)), sp.diags(assemble_p0_mass(coarse))
        assert np.abs(dense(Pu.T @ Mf @ Pu - Mc)).max() < 1e-12
        assert np.abs(dense(Pt.T @ Bf @ Pu - Bc)).max() < 1e-12
        assert np.abs(dense(Pt.T @ Wf @ Pt - Wc)).max() < 1e-12


@pytest.mark.parametrize("fixture", ["hierarchy_2d", "hierarchy_3d"])
def test_divergence_commutes_with_prolongation(fixture, request):
    h = request.getfixturevalue(fixture)
    for level in range(h.num_levels - 1):
        fine, coarse = h.levels[level], h.levels[level + 1]
        lhs = sp.diags(1 / assemble_p0_mass(fine)) @ assemble_divergence(fine) @ h.p_u[level]
        rhs = h.p_theta[level] @ sp.diags(1 / assemble_p0_mass(coarse)) @ assemble_divergence(coarse)
        assert np.abs(dense(lhs - rhs)).max() < 1e-12 * np.abs(dense(rhs)).max()


def test_gradient_of_constant_is_zero(square):
    level = assemble_level(square, 1.0)
    grad, report = discrete_gradient_apply(level, np.full(16, 2.0))
    assert report.converged
    assert np.abs(grad).max() < 1e-10


def test_gradient_of_linear_field(square):
    level = assemble_level(square, 1.0)
    theta = square.centroids[:, 0].copy()
    grad, _ = discrete_gradient_apply(level, theta, rtol=1e-12, atol=1e-14)
    x_faces = np.arange(square.faces_per_axis(0))
    interior = np.setdiff1d(x_faces, square.boundary_faces(0))
    # weak gradient of a field increasing in x
    assert np.all(grad[interior] > 0)
    assert np.allclose(grad[square.boundary_faces()], 0.0)
