"""Sparse storage, a direct Cholesky solver and preconditioned CG."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class CsrMatrix:
    """Square CSR matrix; with ``symmetric`` only the upper triangle is stored."""
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple[int, int]
    symmetric: bool = False

    def __post_init__(self):
        n = self.shape[0]
        if len(self.indptr) != n + 1 or self.indptr[0] != 0 or np.any(np.diff(self.indptr) < 0):
            raise ValueError("row offsets must start at 0 and be monotone")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= self.shape[1]):
            raise ValueError("column index out of range")
        rows = np.repeat(np.arange(n), np.diff(self.indptr))
        same_row = rows[1:] == rows[:-1]
        if np.any(np.diff(self.indices)[same_row] <= 0):
            raise ValueError("column indices must be strictly increasing within rows")
        if self.symmetric and np.any(self.indices < rows):
            raise ValueError("symmetric storage keeps the upper triangle only")

    @classmethod
    def from_scipy(cls, A, symmetric: bool = False) -> "CsrMatrix":
        A = sp.triu(A) if symmetric else A
        A = sp.csr_matrix(A)
        A.sum_duplicates()
        A.sort_indices()
        return cls(A.indptr.astype(np.int64), A.indices.astype(np.int64),
                   A.data.astype(float), tuple(A.shape), symmetric)

    @property
    def nnz(self) -> int:
        return len(self.data)

    def to_scipy(self) -> sp.csr_matrix:
        A = sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)
        if self.symmetric:
            A = (A + sp.triu(A, k=1).T).tocsr()
        return A

    def __matmul__(self, x):
        return spmv(self, x)


def spmv(A: CsrMatrix, x) -> np.ndarray:
    """``y = A x``; symmetric storage is expanded on the fly."""
    x = np.asarray(x, dtype=float)
    if x.shape != (A.shape[1],):
        raise ValueError(f"vector of length {x.shape} does not match {A.shape}")
    rows = np.repeat(np.arange(A.shape[0]), np.diff(A.indptr))
    y = np.bincount(rows, weights=A.data * x[A.indices], minlength=A.shape[0])
    if A.symmetric:
        off = A.indices != rows
        y += np.bincount(A.indices[off], weights=A.data[off] * x[rows[off]],
                         minlength=A.shape[0])
    return y


def _as_scipy(A) -> sp.csr_matrix:
    if isinstance(A, CsrMatrix):
        return A.to_scipy()
    return sp.csr_matrix(A)


class CholeskyFactor:
    """Cholesky factorisation of a sparse SPD matrix.

    The matrix is reordered by reverse Cuthill-McKee and factored in banded
    form with LAPACK, so memory is (bandwidth + 1) * n.
    """

    def __init__(self, A, check_symmetry: bool = True):
        A = _as_scipy(A)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("matrix must be square")
        if check_symmetry and n:
            asym = abs(A - A.T).max() if A.nnz else 0.0
            scale = abs(A).max() if A.nnz else 1.0
            if asym > 1e-12 * scale:
                raise ValueError("matrix is not symmetric")
        self.n = n
        self.perm = np.asarray(reverse_cuthill_mckee(A, symmetric_mode=True), dtype=np.int64)
        B = A[self.perm][:, self.perm].tocoo()
        upper = B.col >= B.row
        r, c, v = B.row[upper], B.col[upper], B.data[upper]
        self.bandwidth = int((c - r).max()) if len(r) else 0
        ab = np.zeros((self.bandwidth + 1, n))
        ab[self.bandwidth + r - c, c] = v
        try:
            self._cb = sla.cholesky_banded(ab, lower=False, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(f"matrix is not positive definite: {exc}") from None

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.n == 0:
            return b.copy()
        x = np.empty_like(b)
        x[self.perm] = sla.cho_solve_banded((self._cb, False), b[self.perm], check_finite=False)
        return x

    __call__ = solve


def cholesky_solve(A, b) -> np.ndarray:
    return CholeskyFactor(A).solve(b)


class LuFactor:
    """Sparse LU for the non-symmetric DG variants."""

    def __init__(self, A):
        from scipy.sparse.linalg import splu
        self._lu = splu(sp.csc_matrix(_as_scipy(A)))

    def solve(self, b):
        return self._lu.solve(np.asarray(b, dtype=float))

    __call__ = solve


@dataclass
class SolveReport:
    iterations: int = 0
    history: list[float] = field(default_factory=list)
    converged: bool = False
    true_residual: float = 0.0
    seconds: float = 0.0


def jacobi(A):
    """Inverse-diagonal preconditioner."""
    diag = _as_scipy(A).diagonal()
    if np.any(diag <= 0):
        raise NotPositiveDefiniteError("Jacobi needs a positive diagonal")
    inv = 1.0 / diag
    return lambda r: inv * r


def identity(r):
    return r.copy()


def pcg(A, b, M=None, rtol: float = 1e-6, maxit: int = 1000, x0=None):
    """Preconditioned conjugate gradients.

    Converged when ``||b - A x|| <= rtol * ||b||``. ``M`` is a callable
    applying the preconditioner inverse; ``None`` means no preconditioning.

    Returns
    -------
    x : ndarray
    report : SolveReport
        ``history`` holds the relative recursive residual after each iteration.
    """
    t0 = time.perf_counter()
    matvec = (lambda v: spmv(A, v)) if isinstance(A, CsrMatrix) else (lambda v: A @ v)
    M = identity if M is None else M
    b = np.asarray(b, dtype=float)
    report = SolveReport()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        report.converged = True
        report.seconds = time.perf_counter() - t0
        return np.zeros_like(b), report
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x)
    rel = np.linalg.norm(r) / bnorm
    if rel <= rtol:
        report.converged = True
    else:
        z = M(r)
        p = z.copy()
        rz = r @ z
        for it in range(1, maxit + 1):
            Ap = matvec(p)
            alpha = rz / (p @ Ap)
            x += alpha * p
            r -= alpha * Ap
            rel = float(np.linalg.norm(r) / bnorm)
            report.iterations = it
            report.history.append(rel)
            if rel <= rtol:
                report.converged = True
                break
            z = M(r)
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
    report.true_residual = float(np.linalg.norm(b - matvec(x)) / bnorm)
    report.seconds = time.perf_counter() - t0
    return x, report


def write_matrix_market(path, A, b=None) -> None:
    """Export ``A`` (and ``b`` as ``<path>.rhs.mtx``) in MatrixMarket coordinate format."""
    from scipy.io import mmwrite
    mmwrite(str(path), sp.coo_matrix(_as_scipy(A)))
    if b is not None:
        mmwrite(str(path) + ".rhs.mtx", sp.coo_matrix(np.asarray(b, dtype=float)[:, None]))
