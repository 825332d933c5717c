"""Lowest-order mixed finite element operators on Cartesian meshes.

Face dofs are net fluxes, so the divergence matrix B has entries +-1 and the
piecewise-constant mass matrix W is the diagonal of cell volumes.  Local
face-element mass blocks are integrated in closed form.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from spdefield.errors import InvalidArgumentError
from spdefield.services.linalg import Preconditioner, SolveReport, cg_solve, jacobi
from spdefield.services.mesh import CartesianMesh

log = logging.getLogger(__name__)


class BoundaryKind(str, Enum):
    ESSENTIAL_ZERO_FLUX = "essential_zero_normal_flux"
    DIRICHLET_PRESSURE = "dirichlet_pressure"


@dataclass(frozen=True, eq=False)
class BoundaryCondition:
    kind: BoundaryKind
    region: np.ndarray
    value: float = 0.0


@dataclass(frozen=True, eq=False)
class AssembledLevel:
    mesh: CartesianMesh
    kappa: float
    M: sp.csr_matrix = field(repr=False)
    W: np.ndarray = field(repr=False)
    B: sp.csr_matrix = field(repr=False)
    A: sp.csr_matrix = field(repr=False)
    essential_faces: np.ndarray = field(repr=False)

    @property
    def num_cells(self) -> int:
        return self.mesh.num_cells

    @property
    def num_faces(self) -> int:
        return self.mesh.num_faces

    @property
    def free_faces(self) -> np.ndarray:
        mask = np.ones(self.num_faces, dtype=bool)
        mask[self.essential_faces] = False
        return np.flatnonzero(mask)


def assemble_p0_mass(mesh: CartesianMesh) -> np.ndarray:
    """Diagonal of W: one cell volume per cell."""
    return np.full(mesh.num_cells, mesh.cell_volume)


def assemble_divergence(mesh: CartesianMesh) -> sp.csr_matrix:
    cells = np.arange(mesh.num_cells)
    rows, cols, vals = [], [], []
    for axis in range(mesh.dim):
        lower, upper = mesh.cell_faces(axis)
        rows += [cells, cells]
        cols += [lower, upper]
        vals += [-np.ones(mesh.num_cells), np.ones(mesh.num_cells)]
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.num_cells, mesh.num_faces),
    )


def assemble_rt_mass(mesh: CartesianMesh, cell_coefficient=1.0) -> sp.csr_matrix:
    """Face-element mass matrix weighted cellwise by `cell_coefficient`.

    For the two faces normal to axis a in a cell with size h_a and face area F_a,
    the exact local block is c * h_a / F_a * [[1/3, 1/6], [1/6, 1/3]]; faces with
    different normals are L2-orthogonal.
    """
    coef = np.broadcast_to(np.asarray(cell_coefficient, dtype=float), (mesh.num_cells,))
    if not np.all(np.isfinite(coef)) or np.any(coef <= 0):
        raise InvalidArgumentError("mass coefficient must be strictly positive and finite")

    rows, cols, vals = [], [], []
    for axis in range(mesh.dim):
        lower, upper = mesh.cell_faces(axis)
        scale = coef * mesh.cell_sizes[axis] / mesh.face_area(axis)
        diag = scale / 3.0
        off = scale / 6.0
        rows += [lower, upper, lower, upper]
        cols += [lower, upper, upper, lower]
        vals += [diag, diag, off, off]
    M = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.num_faces, mesh.num_faces),
    ).tocsr()
    M.sum_duplicates()
    M.sort_indices()
    return M


def eliminate_essential(A: sp.spmatrix, faces: np.ndarray) -> sp.csr_matrix:
    """Zero rows and columns of `faces` and put 1 on their diagonal."""
    n = A.shape[0]
    keep = np.ones(n)
    keep[faces] = 0.0
    D = sp.diags(keep)
    out = (D @ A @ D).tocsr()
    out = out + sp.diags(1.0 - keep)
    out = out.tocsr()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def spde_boundary(mesh: CartesianMesh) -> BoundaryCondition:
    return BoundaryCondition(BoundaryKind.ESSENTIAL_ZERO_FLUX, mesh.boundary_faces())


def assemble_spde_schur(
    mesh: CartesianMesh,
    kappa: float,
    M: sp.csr_matrix | None = None,
    W: np.ndarray | None = None,
    B: sp.csr_matrix | None = None,
    essential_faces: np.ndarray | None = None,
) -> sp.csr_matrix:
    """A = M + kappa^-2 B^T W^-1 B with essential faces eliminated symmetrically."""
    if not kappa > 0 or not np.isfinite(kappa):
        raise InvalidArgumentError(f"kappa must be positive, got {kappa}")
    M = assemble_rt_mass(mesh) if M is None else M
    W = assemble_p0_mass(mesh) if W is None else W
    B = assemble_divergence(mesh) if B is None else B
    if essential_faces is None:
        essential_faces = spde_boundary(mesh).region
    A = M + kappa**-2 * (B.T @ sp.diags(1.0 / W) @ B)
    return eliminate_essential(A, essential_faces)


def assemble_level(mesh: CartesianMesh, kappa: float) -> AssembledLevel:
    M = assemble_rt_mass(mesh)
    W = assemble_p0_mass(mesh)
    B = assemble_divergence(mesh)
    essential = spde_boundary(mesh).region
    A = assemble_spde_schur(mesh, kappa, M=M, W=W, B=B, essential_faces=essential)
    log.debug(
        "assembled level %s: %d cells, %d faces, nnz(A)=%d",
        mesh.cell_counts, mesh.num_cells, mesh.num_faces, A.nnz,
    )
    return AssembledLevel(mesh=mesh, kappa=kappa, M=M, W=W, B=B, A=A, essential_faces=essential)


def discrete_gradient_apply(
    level: AssembledLevel,
    theta: np.ndarray,
    rtol: float = 1e-6,
    atol: float = 1e-12,
    maxiter: int | None = None,
    preconditioner: Preconditioner | None = None,
) -> tuple[np.ndarray, SolveReport]:
    """-M^-1 B^T theta on the faces with free normal trace; zero on essential faces."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (level.num_cells,):
        raise InvalidArgumentError(f"theta has shape {theta.shape}, expected ({level.num_cells},)")
    M = eliminate_essential(level.M, level.essential_faces)
    rhs = -(level.B.T @ theta)
    rhs[level.essential_faces] = 0.0
    pc = preconditioner if preconditioner is not None else jacobi(M)
    grad, report = cg_solve(M, rhs, rtol=rtol, atol=atol, maxiter=maxiter, preconditioner=pc, strict=True)
    return grad, report
