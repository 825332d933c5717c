"""Gaussian field sampling through the mixed reaction-diffusion SPDE.

The block system

    [ M   B'        ] [u    ]   [ 0    ]
    [ B  -k^2 W     ] [theta] = [ -g f ],    f = W^(1/2) xi,

is reduced to the flux Schur system A u = -g k^-2 B' W^-1 f with
A = M + k^-2 B' W^-1 B, solved by CG; theta follows by back-substitution
theta = k^-2 W^-1 (B u + g f).
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from spdefield.errors import InvalidArgumentError, SolverFailure
from spdefield.services.assembly import AssembledLevel, assemble_level, assemble_p0_mass
from spdefield.services.linalg import (
    Preconditioner,
    SolveReport,
    SolverOptions,
    cg_solve,
    make_preconditioner,
)
from spdefield.services.mesh import CartesianMesh, EmbeddingMap, MeshHierarchy
from spdefield.services.rng import StreamKey, draw_standard_normal

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaternParams:
    nu: float
    kappa: float
    sigma2: float = 1.0
    dim: int = 2

    def __post_init__(self):
        if not self.nu > 0:
            raise InvalidArgumentError(f"smoothness nu must be positive, got {self.nu}")
        if not self.kappa > 0 or not math.isfinite(self.kappa):
            raise InvalidArgumentError(f"kappa must be positive and finite, got {self.kappa}")
        if not self.sigma2 >= 0:
            raise InvalidArgumentError(f"variance must be non-negative, got {self.sigma2}")
        if self.dim not in (2, 3):
            raise InvalidArgumentError(f"dim must be 2 or 3, got {self.dim}")

    @classmethod
    def from_correlation_length(cls, nu: float, length: float, sigma2: float = 1.0, dim: int = 2) -> "MaternParams":
        """kappa = sqrt(8 nu) / length."""
        if not length > 0:
            raise InvalidArgumentError(f"correlation length must be positive, got {length}")
        return cls(nu=nu, kappa=math.sqrt(8.0 * nu) / length, sigma2=sigma2, dim=dim)

    @property
    def alpha(self) -> float:
        return self.nu + self.dim / 2.0

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    @property
    def correlation_length(self) -> float:
        return math.sqrt(8.0 * self.nu) / self.kappa

    @property
    def g(self) -> float:
        return matern_scaling(self)


@dataclass(eq=False)
class NoiseVector:
    level: int
    xi: np.ndarray


@dataclass(eq=False)
class FieldSample:
    level: int
    theta: np.ndarray
    theta_phys: np.ndarray
    key: StreamKey | None = None
    u: np.ndarray | None = field(default=None, repr=False)
    report: SolveReport | None = field(default=None, repr=False)


@dataclass(eq=False)
class PairSample:
    fine: FieldSample
    coarse: FieldSample
    correction: np.ndarray


def matern_scaling(params: MaternParams) -> float:
    """g = (4 pi)^(d/4) kappa^nu sqrt(Gamma(nu + d/2) / Gamma(nu)): unit marginal variance."""
    d, nu = params.dim, params.nu
    log_g = (
        d / 4.0 * math.log(4.0 * math.pi)
        + nu * math.log(params.kappa)
        + 0.5 * (gammaln(nu + d / 2.0) - gammaln(nu))
    )
    return math.exp(log_g)


def white_noise_rhs(level: AssembledLevel | CartesianMesh, xi: np.ndarray) -> np.ndarray:
    """f = W^(1/2) xi; W is diagonal so this is a cellwise scaling."""
    W = level.W if isinstance(level, AssembledLevel) else assemble_p0_mass(level)
    xi = np.asarray(xi, dtype=float)
    if xi.shape != W.shape:
        raise InvalidArgumentError(f"noise has shape {xi.shape}, expected {W.shape}")
    return np.sqrt(W) * xi


def _solve_flux(
    level: AssembledLevel,
    rhs: np.ndarray,
    options: SolverOptions,
    preconditioner: Preconditioner | None,
    x0: np.ndarray | None,
) -> tuple[np.ndarray, SolveReport]:
    rhs = rhs.copy()
    rhs[level.essential_faces] = 0.0
    if x0 is not None:
        x0 = np.array(x0, dtype=float)
        x0[level.essential_faces] = 0.0
    pc = preconditioner if preconditioner is not None else make_preconditioner(options.preconditioner, level.A)
    return cg_solve(
        level.A, rhs, x0=x0,
        rtol=options.rtol, atol=options.atol, maxiter=options.maxiter,
        preconditioner=pc, strict=True,
    )


def sample_single_level(
    level: AssembledLevel,
    xi: np.ndarray,
    params: MaternParams,
    *,
    level_index: int = 0,
    embedding: EmbeddingMap | None = None,
    key: StreamKey | None = None,
    options: SolverOptions = SolverOptions(),
    preconditioner: Preconditioner | None = None,
    x0: np.ndarray | None = None,
) -> FieldSample:
    if not math.isclose(level.kappa, params.kappa):
        raise InvalidArgumentError(f"level assembled for kappa={level.kappa}, params have {params.kappa}")
    f = white_noise_rhs(level, xi)
    g = params.g
    k2 = params.kappa**-2
    rhs = -g * k2 * (level.B.T @ (f / level.W))
    try:
        u, report = _solve_flux(level, rhs, options, preconditioner, x0)
    except SolverFailure as e:
        raise SolverFailure("SPDE flux solve failed", e.report, level=level_index) from e
    theta = k2 * (level.B @ u + g * f) / level.W
    if params.sigma2 != 1.0:
        theta = params.sigma * theta
    return FieldSample(
        level=level_index,
        theta=theta,
        theta_phys=theta if embedding is None else embedding.restrict(theta),
        key=key,
        u=u,
        report=report,
    )


def restrict_noise(xi: np.ndarray, hierarchy: MeshHierarchy, level: int) -> np.ndarray:
    """xi_{l+1} = W_{l+1}^(-1/2) P_theta' W_l^(1/2) xi_l."""
    hierarchy.check_level(level, needs_coarser=True)
    fine, coarse = hierarchy.levels[level], hierarchy.levels[level + 1]
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (fine.num_cells,):
        raise InvalidArgumentError(f"noise has shape {xi.shape}, expected ({fine.num_cells},)")
    w_fine = assemble_p0_mass(fine)
    w_coarse = assemble_p0_mass(coarse)
    return (hierarchy.p_theta[level].T @ (np.sqrt(w_fine) * xi)) / np.sqrt(w_coarse)


def whitening_operator(hierarchy: MeshHierarchy, level: int) -> sp.csr_matrix:
    """The matrix of restrict_noise; R R' = I is what keeps coarse noise standard normal."""
    hierarchy.check_level(level, needs_coarser=True)
    w_fine = assemble_p0_mass(hierarchy.levels[level])
    w_coarse = assemble_p0_mass(hierarchy.levels[level + 1])
    R = sp.diags(w_coarse**-0.5) @ hierarchy.p_theta[level].T @ sp.diags(np.sqrt(w_fine))
    return R.tocsr()


def check_smoother_order(params: MaternParams, k: int) -> None:
    """Recursion depth k matches nu = 2k+1 (2D) or nu = 2k+1/2 (3D)."""
    if k < 1:
        raise InvalidArgumentError(f"recursion depth must be >= 1, got {k}")
    expected = 2 * k + (1.0 if params.dim == 2 else 0.5)
    if not math.isclose(params.nu, expected):
        raise InvalidArgumentError(
            f"nu={params.nu} does not match {k} recursive solves in {params.dim}D (needs nu={expected})"
        )


def check_sampler_order(params: MaternParams, k: int = 0) -> None:
    """One solve gives nu = 2 - d/2; each further recursive solve adds 2."""
    if k:
        check_smoother_order(params, k)
        return
    expected = 2.0 - params.dim / 2.0
    if not math.isclose(params.nu, expected):
        raise InvalidArgumentError(
            f"the SPDE sampler yields nu={expected} in {params.dim}D, got nu={params.nu}"
        )


class HierarchicalSampler:
    """SPDE sampler over a mesh hierarchy with per-level assembled operators.

    Operators and preconditioners are built once and only read afterwards, so
    concurrent calls with distinct keys are safe.
    """

    def __init__(
        self,
        hierarchy: MeshHierarchy,
        params: MaternParams,
        maps: list[EmbeddingMap] | None = None,
        options: SolverOptions = SolverOptions(),
        depth: int = 0,
    ):
        if maps is not None and len(maps) != hierarchy.num_levels:
            raise InvalidArgumentError("need one embedding map per level")
        if hierarchy.levels[0].dim != params.dim:
            raise InvalidArgumentError(f"mesh is {hierarchy.levels[0].dim}D, params are {params.dim}D")
        if depth:
            check_smoother_order(params, depth)
        self.hierarchy = hierarchy
        self.params = params
        self.maps = maps
        self.options = options
        self.depth = depth
        self.levels = [assemble_level(mesh, params.kappa) for mesh in hierarchy.levels]
        self._preconditioners = [make_preconditioner(options.preconditioner, lv.A) for lv in self.levels]
        self._whitening = [whitening_operator(hierarchy, level) for level in range(hierarchy.num_levels - 1)]

    @property
    def num_levels(self) -> int:
        return self.hierarchy.num_levels

    def num_cells(self, level: int) -> int:
        return self.hierarchy.levels[level].num_cells

    def embedding(self, level: int) -> EmbeddingMap | None:
        return None if self.maps is None else self.maps[level]

    def draw_noise(self, key: StreamKey) -> NoiseVector:
        self.hierarchy.check_level(key.level)
        xi = draw_standard_normal(key, self.num_cells(key.level))
        return NoiseVector(level=key.level, xi=xi)

    def sample_single_level(
        self,
        level: int,
        xi: np.ndarray,
        key: StreamKey | None = None,
        x0: np.ndarray | None = None,
    ) -> FieldSample:
        self.hierarchy.check_level(level)
        return sample_single_level(
            self.levels[level], xi, self.params,
            level_index=level,
            embedding=self.embedding(level),
            key=key,
            options=self.options,
            preconditioner=self._preconditioners[level],
            x0=x0,
        )

    def sample(
        self,
        level: int,
        xi: np.ndarray,
        key: StreamKey | None = None,
        x0: np.ndarray | None = None,
    ) -> FieldSample:
        """One realization at the sampler's smoothness: a single solve, or the smoother when depth > 0."""
        if self.depth:
            return self.sample_smoother(level, xi, self.depth, key, x0=x0)
        return self.sample_single_level(level, xi, key, x0=x0)

    def restrict_noise(self, xi: np.ndarray, level: int) -> np.ndarray:
        self.hierarchy.check_level(level, needs_coarser=True)
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (self.num_cells(level),):
            raise InvalidArgumentError(f"noise has shape {xi.shape}, expected ({self.num_cells(level)},)")
        return self._whitening[level] @ xi

    def _warm_start(self, level: int, coarse: FieldSample) -> np.ndarray | None:
        # the smoother's last flux does not approximate its first solve
        if self.depth:
            return None
        return self.hierarchy.p_u[level] @ coarse.u

    def sample_pair(self, level: int, xi: np.ndarray, key: StreamKey | None = None) -> PairSample:
        """Coupled (fine, coarse) realizations from one fine noise vector.

        The coarse solve uses the restricted noise; the fine solve starts from the
        prolongated coarse flux.  Both levels use the sampler's smoothness depth.
        """
        self.hierarchy.check_level(level, needs_coarser=True)
        coarse = self.sample(level + 1, self.restrict_noise(xi, level), key=key)
        fine = self.sample(level, xi, key=key, x0=self._warm_start(level, coarse))
        correction = fine.theta - self.hierarchy.p_theta[level] @ coarse.theta
        log.debug(
            "pair at level %d: coarse %d it, fine %d it",
            level, coarse.report.iterations, fine.report.iterations,
        )
        return PairSample(fine=fine, coarse=coarse, correction=correction)

    def sample_hierarchy(self, xi: np.ndarray, key: StreamKey | None = None) -> list[FieldSample]:
        """Realizations on every level from one finest-level noise vector, fine to coarse."""
        noises = [np.asarray(xi, dtype=float)]
        for level in range(self.num_levels - 1):
            noises.append(self.restrict_noise(noises[-1], level))
        samples = [self.sample(self.num_levels - 1, noises[-1], key=key)]
        for level in range(self.num_levels - 2, -1, -1):
            samples.append(self.sample(level, noises[level], key=key, x0=self._warm_start(level, samples[-1])))
        samples.reverse()
        return samples

    def sample_smoother(
        self,
        level: int,
        xi: np.ndarray,
        k: int,
        key: StreamKey | None = None,
        x0: np.ndarray | None = None,
    ) -> FieldSample:
        """Higher smoothness by k further solves (k^2 - Laplace) theta_i = theta_{i-1}.

        `x0` warm-starts the first solve only.
        """
        check_smoother_order(self.params, k)
        self.hierarchy.check_level(level)
        assembled = self.levels[level]
        unit = MaternParams(nu=self.params.nu, kappa=self.params.kappa, sigma2=1.0, dim=self.params.dim)
        first = sample_single_level(
            assembled, xi, unit,
            level_index=level, options=self.options, preconditioner=self._preconditioners[level], x0=x0,
        )
        theta, u, report = first.theta, first.u, first.report
        k2 = self.params.kappa**-2
        for _ in range(k):
            rhs = -k2 * (assembled.B.T @ theta)
            try:
                u, report = _solve_flux(assembled, rhs, self.options, self._preconditioners[level], None)
            except SolverFailure as e:
                raise SolverFailure("recursive SPDE solve failed", e.report, level=level) from e
            theta = k2 * (assembled.B @ u / assembled.W + theta)
        theta = self.params.sigma * theta
        embedding = self.embedding(level)
        return FieldSample(
            level=level,
            theta=theta,
            theta_phys=theta if embedding is None else embedding.restrict(theta),
            key=key,
            u=u,
            report=report,
        )
