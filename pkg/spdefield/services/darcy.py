"""Mixed Darcy forward model and the effective-permeability quantity of interest.

Unknowns are the fluxes q on faces without a no-flow condition and p~ = -p per
cell, giving the symmetric saddle system

    [ M_{1/k}  B' ] [q ]   [ f ]
    [ B        0  ] [p~] = [ 0 ],   f_face = -p_D * (n . e_axis)

where Dirichlet pressure data enters f through the boundary term of the flux
equation.  Pressure returned to callers is p = -p~.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from spdefield.errors import InvalidArgumentError, SolverFailure
from spdefield.services.assembly import BoundaryCondition, BoundaryKind, assemble_divergence, assemble_rt_mass
from spdefield.services.linalg import SolveReport, SolverOptions, block_diagonal_preconditioner, minres_solve
from spdefield.services.mesh import CartesianMesh

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Coefficient:
    k: np.ndarray
    mean_log: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class FlowSetup:
    """Pressure drop along one axis: inflow on the lower side, outflow on the upper side."""

    axis: int = -1
    p_in: float = 1.0
    p_out: float = 0.0

    def resolved_axis(self, dim: int) -> int:
        axis = self.axis % dim
        if not 0 <= axis < dim:
            raise InvalidArgumentError(f"flow axis {self.axis} invalid in {dim}D")
        return axis

    def boundary_conditions(self, mesh: CartesianMesh) -> list[BoundaryCondition]:
        axis = self.resolved_axis(mesh.dim)
        inflow = mesh.boundary_faces(axis, "lower")
        outflow = mesh.boundary_faces(axis, "upper")
        sides = np.setdiff1d(mesh.boundary_faces(), np.concatenate([inflow, outflow]))
        return [
            BoundaryCondition(BoundaryKind.DIRICHLET_PRESSURE, inflow, self.p_in),
            BoundaryCondition(BoundaryKind.DIRICHLET_PRESSURE, outflow, self.p_out),
            BoundaryCondition(BoundaryKind.ESSENTIAL_ZERO_FLUX, sides),
        ]


@dataclass(eq=False)
class DarcySolution:
    q: np.ndarray
    p: np.ndarray
    report: SolveReport
    setup: FlowSetup = field(default_factory=FlowSetup)


def build_coefficient(theta_phys: np.ndarray, mean_log_field: np.ndarray | None = None) -> Coefficient:
    """k = exp(m + theta), m defaulting to zero."""
    theta = np.asarray(theta_phys, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise InvalidArgumentError("field realization contains non-finite values")
    m = np.zeros_like(theta) if mean_log_field is None else np.asarray(mean_log_field, dtype=float)
    if m.shape != theta.shape:
        raise InvalidArgumentError(f"mean log field has shape {m.shape}, field has {theta.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidArgumentError("mean log field contains non-finite values")
    return Coefficient(k=np.exp(m + theta), mean_log=mean_log_field)


def _face_signs(mesh: CartesianMesh, faces: np.ndarray, axis: int) -> np.ndarray:
    """+1 where the axis direction is the outward normal (upper side), -1 on the lower side."""
    local = mesh.face_multi_index(axis)[:, faces - mesh.face_offsets[axis]]
    return np.where(local[axis] == 0, -1.0, 1.0)


def solve_darcy(
    mesh: CartesianMesh,
    coefficient: Coefficient,
    setup: FlowSetup = FlowSetup(),
    options: SolverOptions = SolverOptions(),
    strict: bool = True,
) -> DarcySolution:
    k = np.asarray(coefficient.k, dtype=float)
    if k.shape != (mesh.num_cells,):
        raise InvalidArgumentError(f"coefficient has shape {k.shape}, expected ({mesh.num_cells},)")
    if np.any(k <= 0) or not np.all(np.isfinite(k)):
        raise InvalidArgumentError("permeability must be positive and finite")

    axis = setup.resolved_axis(mesh.dim)
    f = np.zeros(mesh.num_faces)
    no_flow = np.empty(0, dtype=int)
    for bc in setup.boundary_conditions(mesh):
        if bc.kind is BoundaryKind.DIRICHLET_PRESSURE:
            f[bc.region] = -bc.value * _face_signs(mesh, bc.region, axis)
        else:
            no_flow = bc.region

    free = np.setdiff1d(np.arange(mesh.num_faces), no_flow)
    M = assemble_rt_mass(mesh, 1.0 / k)[free][:, free]
    B = assemble_divergence(mesh)[:, free]
    K = sp.bmat([[M, B.T], [B, None]], format="csr")
    rhs = np.concatenate([f[free], np.zeros(mesh.num_cells)])

    preconditioner = block_diagonal_preconditioner(M, B)
    x, report = minres_solve(
        K, rhs, preconditioner=preconditioner,
        rtol=options.rtol, atol=options.atol, maxiter=options.maxiter,
    )
    if strict and not report.converged:
        raise SolverFailure("Darcy MINRES did not converge", report)

    q = np.zeros(mesh.num_faces)
    q[free] = x[: free.size]
    p = -x[free.size:]
    log.debug("darcy solve: %d iterations, residual %.3e", report.iterations, report.abs_residual)
    return DarcySolution(q=q, p=p, report=report, setup=setup)


def outflow_faces(mesh: CartesianMesh, setup: FlowSetup = FlowSetup()) -> np.ndarray:
    return mesh.boundary_faces(setup.resolved_axis(mesh.dim), "upper")


def effective_permeability(solution: DarcySolution, mesh: CartesianMesh, outflow: np.ndarray | None = None) -> float:
    """Mean outward normal flux over the outflow boundary."""
    faces = outflow_faces(mesh, solution.setup) if outflow is None else np.asarray(outflow)
    if faces.size == 0:
        raise InvalidArgumentError("outflow boundary is empty")
    axis = solution.setup.resolved_axis(mesh.dim)
    signs = _face_signs(mesh, faces, axis)
    area = faces.size * mesh.face_area(axis)
    return float(np.sum(signs * solution.q[faces]) / area)


def mass_balance(solution: DarcySolution, mesh: CartesianMesh) -> float:
    """max |B q|: cellwise net outflow, zero for an exactly conservative flux."""
    return float(np.max(np.abs(assemble_divergence(mesh) @ solution.q)))
