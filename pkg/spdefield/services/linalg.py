"""Sparse Krylov solvers and a symmetric direct factorization.

Stopping rule everywhere: converged when the true residual satisfies
||b - A x|| <= max(atol, rtol * ||b||).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from spdefield.errors import FactorizationError, InvalidArgumentError, SolverFailure

log = logging.getLogger(__name__)

DEFAULT_RTOL = 1e-6
DEFAULT_ATOL = 1e-12

Preconditioner = Callable[[np.ndarray], np.ndarray]


@dataclass
class SolveReport:
    iterations: int
    abs_residual: float
    rel_residual: float
    converged: bool
    residual_history: list[float] = field(default_factory=list, repr=False)
    energy_history: list[float] = field(default_factory=list, repr=False)


def as_csr(A) -> sp.csr_matrix:
    """Canonical CSR: summed duplicates, sorted column indices."""
    out = sp.csr_matrix(A, dtype=float, copy=True)
    out.sum_duplicates()
    out.sort_indices()
    return out


def _report(iterations: int, rnorm: float, bnorm: float, threshold: float, **history) -> SolveReport:
    if bnorm > 0:
        rel = rnorm / bnorm
    else:
        rel = 0.0 if rnorm == 0 else math.inf
    return SolveReport(
        iterations=iterations,
        abs_residual=float(rnorm),
        rel_residual=float(rel),
        converged=bool(rnorm <= threshold),
        **history,
    )


def identity(r: np.ndarray) -> np.ndarray:
    return r


def jacobi(A: sp.spmatrix) -> Preconditioner:
    d = A.diagonal()
    if np.any(d <= 0):
        raise InvalidArgumentError("Jacobi preconditioner needs a positive diagonal")
    inv = 1.0 / d
    return lambda r: inv * r


def symmetric_gauss_seidel(A: sp.spmatrix) -> Preconditioner:
    """z = (D+U)^-1 D (D+L)^-1 r, SPD whenever A is."""
    A = as_csr(A)
    d = A.diagonal()
    if np.any(d <= 0):
        raise InvalidArgumentError("Gauss-Seidel preconditioner needs a positive diagonal")
    lower = sp.tril(A, format="csr")
    upper = sp.triu(A, format="csr")

    def apply(r: np.ndarray) -> np.ndarray:
        y = spla.spsolve_triangular(lower, r, lower=True)
        return spla.spsolve_triangular(upper, d * y, lower=False)

    return apply


def make_preconditioner(kind: str, A: sp.spmatrix) -> Preconditioner:
    if kind == "jacobi":
        return jacobi(A)
    if kind in ("sgs", "gauss_seidel", "symmetric_gauss_seidel"):
        return symmetric_gauss_seidel(A)
    if kind == "none":
        return identity
    raise InvalidArgumentError(f"unknown preconditioner {kind!r}")


def cg_solve(
    A: sp.spmatrix,
    b: np.ndarray,
    x0: np.ndarray | None = None,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    maxiter: int | None = None,
    preconditioner: Preconditioner | None = None,
    strict: bool = False,
) -> tuple[np.ndarray, SolveReport]:
    """Preconditioned conjugate gradients.

    Records the residual norms and the energy 1/2 x'Ax - b'x of every iterate;
    the energy is what CG minimises over the growing Krylov space.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    maxiter = 10 * n + 10 if maxiter is None else maxiter
    pc = identity if preconditioner is None else preconditioner

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    bnorm = float(np.linalg.norm(b))
    threshold = max(atol, rtol * bnorm)
    rnorm = float(np.linalg.norm(r))
    residuals = [rnorm]
    energies = [float(-0.5 * x @ (b + r))]

    iterations = 0
    if rnorm > threshold:
        z = pc(r)
        p = z.copy()
        rz = float(r @ z)
        while iterations < maxiter:
            Ap = A @ p
            pAp = float(p @ Ap)
            if pAp <= 0 or not np.isfinite(pAp):
                report = _report(iterations, rnorm, bnorm, threshold)
                raise SolverFailure("CG breakdown: operator is not positive definite", report)
            alpha = rz / pAp
            x += alpha * p
            r -= alpha * Ap
            iterations += 1
            rnorm = float(np.linalg.norm(r))
            residuals.append(rnorm)
            energies.append(float(-0.5 * x @ (b + r)))
            if rnorm <= threshold:
                break
            z = pc(r)
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new

    report = _report(iterations, rnorm, bnorm, threshold, residual_history=residuals, energy_history=energies)
    log.debug("cg: %d iterations, residual %.3e", iterations, rnorm)
    if strict and not report.converged:
        raise SolverFailure("CG did not converge", report)
    return x, report


def minres_solve(
    K: sp.spmatrix,
    b: np.ndarray,
    preconditioner: Preconditioner | None = None,
    x0: np.ndarray | None = None,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    maxiter: int | None = None,
    strict: bool = False,
) -> tuple[np.ndarray, SolveReport]:
    """Preconditioned MINRES for symmetric (indefinite) systems with an SPD preconditioner."""
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    maxiter = 10 * n + 10 if maxiter is None else maxiter
    pc = identity if preconditioner is None else preconditioner
    eps = np.finfo(float).eps

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r1 = b - K @ x
    bnorm = float(np.linalg.norm(b))
    threshold = max(atol, rtol * bnorm)
    rnorm = float(np.linalg.norm(r1))
    residuals = [rnorm]
    if rnorm <= threshold:
        return x, _report(0, rnorm, bnorm, threshold, residual_history=residuals)

    y = pc(r1)
    beta1 = float(r1 @ y)
    if beta1 <= 0:
        raise SolverFailure(
            "MINRES breakdown: preconditioner is not positive definite",
            _report(0, rnorm, bnorm, threshold),
        )
    beta1 = math.sqrt(beta1)

    oldb, beta, dbar, epsln = 0.0, beta1, 0.0, 0.0
    phibar, cs, sn = beta1, -1.0, 0.0
    w = np.zeros(n)
    w2 = np.zeros(n)
    r2 = r1
    iterations = 0
    while iterations < maxiter:
        iterations += 1
        v = y / beta
        y = K @ v
        if iterations >= 2:
            y = y - (beta / oldb) * r1
        alpha = float(v @ y)
        y = y - (alpha / beta) * r2
        r1, r2 = r2, y
        y = pc(r2)
        oldb = beta
        beta = float(r2 @ y)
        if beta < 0:
            raise SolverFailure(
                "MINRES breakdown: preconditioner is not positive definite",
                _report(iterations, rnorm, bnorm, threshold),
            )
        beta = math.sqrt(beta)

        oldeps = epsln
        delta = cs * dbar + sn * alpha
        gbar = sn * dbar - cs * alpha
        epsln = sn * beta
        dbar = -cs * beta
        gamma = max(math.hypot(gbar, beta), eps)
        cs = gbar / gamma
        sn = beta / gamma
        phi = cs * phibar
        phibar = sn * phibar

        w1, w2 = w2, w
        w = (v - oldeps * w1 - delta * w2) / gamma
        x = x + phi * w

        rnorm = float(np.linalg.norm(b - K @ x))
        residuals.append(rnorm)
        if rnorm <= threshold or beta == 0.0:
            break

    report = _report(iterations, rnorm, bnorm, threshold, residual_history=residuals)
    log.debug("minres: %d iterations, residual %.3e", iterations, rnorm)
    if strict and not report.converged:
        raise SolverFailure("MINRES did not converge", report)
    return x, report


class SparseCholesky:
    """Symmetric sparse direct factorization of an SPD matrix.

    SuperLU in symmetric mode with diagonal pivoting only: the U diagonal then
    holds the LDL' pivots of the fill-reducing permutation, all positive iff A is SPD.
    """

    def __init__(self, A: sp.spmatrix):
        A = sp.csc_matrix(A, dtype=float)
        if A.shape[0] != A.shape[1]:
            raise FactorizationError(f"matrix is not square: {A.shape}")
        scale = abs(A).max() if A.nnz else 0.0
        if A.nnz and abs(A - A.T).max() > 1e-12 * scale:
            raise FactorizationError("matrix is not symmetric")
        if np.any(A.diagonal() <= 0):
            raise FactorizationError("non-positive diagonal entry: matrix is not SPD")
        try:
            self._lu = spla.splu(
                A,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as e:
            raise FactorizationError(f"factorization failed: {e}") from e
        pivots = self._lu.U.diagonal()
        if not np.all(np.isfinite(pivots)) or np.any(pivots <= 0):
            raise FactorizationError("non-positive pivot: matrix is not SPD")
        self.shape = A.shape
        self.pivots = pivots

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float))


def sparse_cholesky(A: sp.spmatrix) -> SparseCholesky:
    return SparseCholesky(A)


@dataclass
class BlockDiagonalPreconditioner:
    """diag(H, Sigma) with H = diag(M) and Sigma = B H^-1 B', Sigma factored directly."""

    h: np.ndarray
    schur: SparseCholesky

    def __call__(self, r: np.ndarray) -> np.ndarray:
        nq = self.h.shape[0]
        return np.concatenate([r[:nq] / self.h, self.schur.solve(r[nq:])])


def block_diagonal_preconditioner(M: sp.spmatrix, B: sp.spmatrix) -> BlockDiagonalPreconditioner:
    h = M.diagonal()
    schur = (B @ sp.diags(1.0 / h) @ B.T).tocsc()
    return BlockDiagonalPreconditioner(h=h, schur=sparse_cholesky(schur))


@dataclass(frozen=True)
class SolverOptions:
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    maxiter: int | None = None
    preconditioner: str = "jacobi"
