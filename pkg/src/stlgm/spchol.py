"""Sparse symmetric positive-definite factorization with a fixed pattern.

The Gibbs samplers refactor one matrix pattern thousands of times with new
numeric values, and at any moment two factors are alive (the retained state
and a proposal). SpdFactorizer does the symbolic work once per pattern;
refactor() produces independent SpdFactor objects that solve systems,
report the log determinant, and turn iid normals into draws with the
matrix as precision.

Two lanes. The compiled lane runs an up-looking sparse LDL^T written for
this pattern-reuse shape. The fallback drives SuperLU with natural column
order, symmetric mode, and diagonal pivot threshold zero so that no
pivoting occurs and the returned factors are exactly the LDL^T of the
matrix; both permutations are checked to be the identity. Draws use the
identity A^-1 L d^1/2 eps = L^-T d^-1/2 eps, so both lanes map the same
eps to the same draw up to rounding.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu

from . import _kernels
from .errors import NumericalError

__all__ = ["SpdFactorizer", "SpdFactor"]


class SpdFactor:
    def __init__(self, log_det, solve_fn, unwhiten_fn):
        self.log_det = float(log_det)
        self._solve = solve_fn
        self._unwhiten = unwhiten_fn

    def solve(self, b: np.ndarray) -> np.ndarray:
        """A^-1 b."""
        return self._solve(np.asarray(b, dtype=float))

    def unwhiten(self, eps: np.ndarray) -> np.ndarray:
        """Map iid standard normals to Normal(0, A^-1): L^-T d^-1/2 eps."""
        return self._unwhiten(np.asarray(eps, dtype=float))


class _LdlLane:
    """Compiled up-looking LDL^T; symbolic analysis shared across refactors."""

    def __init__(self, n, indptr, indices):
        self.n = n
        self.indptr = indptr
        self.indices = indices
        self._Lp, self._parent = _kernels.ldl_symbolic(n, indptr, indices)
        self._lnz = int(self._Lp[-1])

    def refactor(self, values):
        Li = np.empty(self._lnz, dtype=np.int32)
        Lx = np.empty(self._lnz)
        D = np.empty(self.n)
        status = _kernels.ldl_numeric(
            self.n, self.indptr, self.indices, values, self._Lp, self._parent, Li, Lx, D
        )
        if status != self.n:
            raise NumericalError(
                f"matrix is not positive definite: pivot {status} is not positive"
            )
        log_det = float(np.sum(np.log(D)))
        Lp = self._Lp
        n = self.n

        def solve(b):
            x = b.copy()
            _kernels.ldl_solve(n, Lp, Li, Lx, D, x)
            return x

        def unwhiten(eps):
            x = eps / np.sqrt(D)
            _kernels.ldl_ltsolve(n, Lp, Li, Lx, x)
            return x

        return SpdFactor(log_det, solve, unwhiten)


class _SuperLuLane:
    """SuperLU with pivoting disabled, acting as an LDL^T factorization."""

    def __init__(self, n, indptr, indices):
        self.n = n
        self.indptr = indptr
        self.indices = indices
        self._ident = np.arange(n)

    def refactor(self, values):
        A = csc_matrix((values, self.indices, self.indptr), shape=(self.n, self.n))
        lu = splu(
            A,
            permc_spec="NATURAL",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
        if not (
            np.array_equal(lu.perm_r, self._ident)
            and np.array_equal(lu.perm_c, self._ident)
        ):
            raise NumericalError("factorization pivoted; matrix ordering is unusable")
        D = lu.U.diagonal()
        bad = D <= 0
        if np.any(bad):
            raise NumericalError(
                f"matrix is not positive definite: pivot {int(np.argmax(bad))} "
                "is not positive"
            )
        log_det = float(np.sum(np.log(D)))
        L = lu.L
        sqrtD = np.sqrt(D)

        def solve(b):
            return lu.solve(b)

        def unwhiten(eps):
            return lu.solve(L @ (sqrtD * eps))

        return SpdFactor(log_det, solve, unwhiten)


class SpdFactorizer:
    """Factor a fixed symmetric CSC pattern repeatedly with new values.

    indptr and indices describe the full (both triangles) CSC pattern of an
    n x n symmetric matrix whose diagonal is entirely present. refactor()
    raises NumericalError if the values are not positive definite.
    """

    def __init__(self, n: int, indptr, indices):
        indptr = np.ascontiguousarray(indptr, dtype=np.int32)
        indices = np.ascontiguousarray(indices, dtype=np.int32)
        if indptr.shape != (n + 1,):
            raise ValueError(f"indptr has shape {indptr.shape}, expected ({n + 1},)")
        if _kernels.HAVE_EXT:
            self._lane = _LdlLane(n, indptr, indices)
        else:
            self._lane = _SuperLuLane(n, indptr, indices)
        self.n = n
        self.indptr = indptr
        self.indices = indices

    @property
    def backend(self) -> str:
        return "compiled" if isinstance(self._lane, _LdlLane) else "python"

    def refactor(self, values) -> SpdFactor:
        values = np.ascontiguousarray(values, dtype=float)
        if values.shape != (self.indices.size,):
            raise ValueError(
                f"values has shape {values.shape}, expected ({self.indices.size},)"
            )
        return self._lane.refactor(values)
