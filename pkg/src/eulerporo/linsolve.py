"""Krylov solves of assembled sparse operators with Jacobi preconditioning."""
from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import bicgstab, splu


class LinearSolveError(RuntimeError):
    """The inner linear solver failed to produce a finite solution."""


def solve_components(A, rhs: np.ndarray, rtol: float = 1e-10, maxiter: int = 200,
                     atol: float = 0.0):
    """Solve ``A x = b`` for a stack of right-hand sides.

    ``rhs`` has shape ``(ncomp, N)``.  If ``A`` is ``N x N`` every row is a
    separate system sharing the matrix; if it is ``ncomp*N`` square the rows
    form one coupled system.  BiCGSTAB with Jacobi preconditioning runs to
    ``rtol`` relative to each right-hand side or to ``atol``, whichever is
    looser; a sparse LU factorisation takes over if it stalls.  Callers
    solving for a correction pass ``atol = rtol * |full right-hand side|``
    so that corrections already at rounding level are not chased.  Zero
    right-hand sides give exact zeros.
    Returns ``(x, iterations)`` with ``x`` shaped like ``rhs`` and the
    largest Krylov iteration count.
    """
    rhs = np.asarray(rhs, dtype=float)
    A = sparse.csr_matrix(A)
    R = rhs.reshape((1, -1)) if A.shape[0] == rhs.size else rhs.reshape((-1, A.shape[0]))
    diag = A.diagonal()
    if np.any(diag == 0.0):
        raise LinearSolveError("operator has a zero diagonal entry")
    P = sparse.diags(1.0 / diag)
    X = np.zeros_like(R)
    its = 0
    lu = None
    for k, b in enumerate(R):
        if not np.any(b):
            continue
        count = [0]

        def tick(_):
            count[0] += 1

        x, info = bicgstab(A, b, rtol=rtol, atol=atol, maxiter=maxiter, M=P, callback=tick)
        if info != 0 or not np.all(np.isfinite(x)):
            try:
                lu = lu or splu(sparse.csc_matrix(A))
            except RuntimeError as exc:
                raise LinearSolveError(f"direct fallback failed: {exc}") from exc
            x = lu.solve(b)
            if not np.all(np.isfinite(x)):
                raise LinearSolveError("linear solve produced non-finite values")
        X[k] = x
        its = max(its, count[0])
    return X.reshape(rhs.shape), its
