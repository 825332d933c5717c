"""Dense Karhunen-Loeve reference sampler on piecewise-constant fields.

Only for small meshes: the covariance matrix is dense and its generalized
eigendecomposition costs O(n^3).
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
from scipy.spatial.distance import cdist
from scipy.special import gammaln, kv

from spdefield.errors import DenseGuardError, InsufficientSamplesError, InvalidArgumentError, NumericFailure
from spdefield.services.assembly import assemble_p0_mass
from spdefield.services.mesh import CartesianMesh
from spdefield.services.sampler import MaternParams

log = logging.getLogger(__name__)

DENSE_GUARD = 10_000
NEGATIVE_EIGENVALUE_TOL = 1e-10


@dataclass(frozen=True)
class CovarianceModel:
    params: MaternParams
    kind: str = "matern"

    def __post_init__(self):
        if self.kind not in ("matern", "exponential"):
            raise InvalidArgumentError(f"unknown covariance kind {self.kind!r}")
        if self.kind == "exponential" and not math.isclose(self.params.nu, 0.5):
            raise InvalidArgumentError("the exponential covariance is the Matern model with nu = 1/2")

    @classmethod
    def exponential(cls, kappa: float, sigma2: float = 1.0, dim: int = 2) -> "CovarianceModel":
        return cls(MaternParams(nu=0.5, kappa=kappa, sigma2=sigma2, dim=dim), kind="exponential")

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return covariance_of_distance(np.asarray(r, dtype=float), self)


@dataclass(eq=False)
class KlBasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray = field(repr=False)
    truncation: int
    energy_ratio: float


def covariance_of_distance(r: np.ndarray, model: CovarianceModel) -> np.ndarray:
    """sigma^2 2^(1-nu) / Gamma(nu) (kappa r)^nu K_nu(kappa r), equal to sigma^2 at r = 0."""
    p = model.params
    s = p.kappa * np.abs(r)
    if math.isclose(p.nu, 0.5):
        return p.sigma2 * np.exp(-s)
    if math.isclose(p.nu, 1.5):
        return p.sigma2 * (1.0 + s) * np.exp(-s)
    out = np.full(s.shape, p.sigma2, dtype=float)
    pos = s > 0
    sp_ = s[pos]
    log_front = (1.0 - p.nu) * math.log(2.0) - gammaln(p.nu)
    with np.errstate(under="ignore"):
        out[pos] = p.sigma2 * np.exp(log_front + p.nu * np.log(sp_)) * kv(p.nu, sp_)
    out[pos & ~np.isfinite(out)] = 0.0
    return out


def covariance(x, y, model: CovarianceModel) -> float:
    r = float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float)))
    return float(covariance_of_distance(np.array([r]), model)[0])


def _guard(mesh: CartesianMesh, limit: int) -> None:
    if mesh.num_cells > limit:
        raise DenseGuardError(
            f"dense covariance needs {mesh.num_cells}x{mesh.num_cells} entries "
            f"({mesh.num_cells**2 * 8 / 2**20:.0f} MiB); limit is {limit} cells"
        )


def centroid_covariance(mesh: CartesianMesh, model: CovarianceModel, limit: int = DENSE_GUARD) -> np.ndarray:
    """Covariance of the field values at cell centroids."""
    _guard(mesh, limit)
    r = cdist(mesh.centroids, mesh.centroids)
    return covariance_of_distance(r, model)


def assemble_covariance_matrix(mesh: CartesianMesh, model: CovarianceModel, limit: int = DENSE_GUARD) -> np.ndarray:
    """C[i, j] = cov(c_i, c_j) vol_i vol_j (centroid quadrature of the double integral)."""
    vol = assemble_p0_mass(mesh)
    C = centroid_covariance(mesh, model, limit) * np.outer(vol, vol)
    return 0.5 * (C + C.T)


def kl_decompose(C: np.ndarray, W: np.ndarray, truncation: int | None = None) -> KlBasis:
    """Leading eigenpairs of C v = lambda W v with W-orthonormal v, largest first."""
    n = C.shape[0]
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        if np.any(W <= 0):
            raise InvalidArgumentError("W must be positive")
        W = np.diag(W)
    m = n if truncation is None else int(truncation)
    if not 1 <= m <= n:
        raise InvalidArgumentError(f"truncation must be in 1..{n}, got {m}")
    try:
        lam, vec = la.eigh(C, W)
    except la.LinAlgError as e:
        raise NumericFailure(f"generalized eigensolver failed: {e}") from e
    order = np.argsort(lam)[::-1]
    lam, vec = lam[order], vec[:, order]
    total = float(np.sum(np.clip(lam, 0.0, None)))
    kept = float(np.sum(np.clip(lam[:m], 0.0, None)))
    ratio = kept / total if total > 0 else 1.0
    log.debug("KL basis: %d of %d modes, energy ratio %.4f", m, n, ratio)
    return KlBasis(eigenvalues=lam[:m], eigenvectors=vec[:, :m], truncation=m, energy_ratio=ratio)


def _clamped_eigenvalues(basis: KlBasis) -> np.ndarray:
    lam = basis.eigenvalues
    lam_max = float(np.max(lam)) if lam.size else 0.0
    floor = -NEGATIVE_EIGENVALUE_TOL * max(lam_max, 0.0)
    if np.any(lam < floor):
        raise NumericFailure(f"eigenvalue {lam.min():.3e} below tolerance {floor:.3e}")
    return np.clip(lam, 0.0, None)


def kl_sample(basis: KlBasis, xi: np.ndarray) -> np.ndarray:
    """theta = sum_i xi_i sqrt(lambda_i) v_i over the retained modes."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] < basis.truncation:
        raise InvalidArgumentError(f"need at least {basis.truncation} coefficients, got {xi.shape[-1]}")
    lam = _clamped_eigenvalues(basis)
    return (xi[..., : basis.truncation] * np.sqrt(lam)) @ basis.eigenvectors.T


def reconstruct_covariance(basis: KlBasis, W: np.ndarray) -> np.ndarray:
    """W (sum_i lambda_i v_i v_i') W, equal to C for the full expansion."""
    W = np.asarray(W, dtype=float)
    Wv = W[:, None] * basis.eigenvectors if W.ndim == 1 else W @ basis.eigenvectors
    return (Wv * _clamped_eigenvalues(basis)) @ Wv.T


def empirical_covariance(samples: np.ndarray) -> np.ndarray:
    """Unbiased sample covariance of rows of `samples` (one sample per row)."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise InsufficientSamplesError("empirical covariance needs at least 2 samples")
    return np.atleast_2d(np.cov(samples, rowvar=False))


def relative_frobenius_error(estimate: np.ndarray, reference: np.ndarray) -> float:
    ref = float(np.linalg.norm(reference))
    diff = float(np.linalg.norm(np.asarray(estimate) - np.asarray(reference)))
    return diff / ref if ref > 0 else diff
