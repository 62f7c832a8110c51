"""Direct sparse LU solves for the indefinite coupled systems."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SingularSystemError(RuntimeError):
    """The factorization hit a numerically singular pivot."""


class LUFactor:
    """Factorization handle reusable across right-hand sides."""

    def __init__(self, matrix, lu):
        self.matrix = matrix
        self._lu = lu
        self.shape = matrix.shape

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.shape[0] != self.shape[0]:
            raise ValueError(f"rhs length {rhs.shape[0]} does not match "
                             f"matrix dimension {self.shape[0]}")
        x = self._lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SingularSystemError("solution contains non-finite entries")
        return x


def factorize(matrix):
    """Sparse LU with partial pivoting and a fill-reducing column ordering."""
    if matrix.shape[0] != matrix.shape[1]:
        raise ValueError("matrix must be square")
    csc = sp.csc_matrix(matrix)
    try:
        lu = spla.splu(csc, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SingularSystemError(str(exc)) from exc
    return LUFactor(csc, lu)


def solve(factor_or_matrix, rhs):
    if isinstance(factor_or_matrix, LUFactor):
        return factor_or_matrix.solve(rhs)
    return factorize(factor_or_matrix).solve(rhs)


def backward_error(matrix, x, b):
    """Normwise backward error |Ax-b|_inf / (|A|_inf |x|_inf + |b|_inf)."""
    r = matrix @ x - b
    denom = (abs(matrix).sum(axis=1).max() * np.abs(x).max()
             + np.abs(b).max())
    if denom == 0.0:
        return 0.0
    return float(np.abs(r).max() / denom)
