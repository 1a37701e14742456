"""Conjugate-gradient solver for the symmetric positive (semi)definite systems.

One implementation serves the implicit time steps and the periodic cell
problem.  Jacobi preconditioning and warm starts keep the per-step cost of
the solvers low; an optional projection hook lets the singular periodic
system stay on the mean-zero subspace.
"""

from __future__ import annotations

import numpy as np

from .errors import SolverError


def conjugate_gradient(A, b, x0=None, *, rtol=1e-10, max_iter=None,
                       precond_diag=None, project=None):
    """Solve A x = b for SPD (or consistently singular PSD) A.

    Parameters
    ----------
    A : scipy sparse matrix or callable x -> A@x
    b : right-hand side
    x0 : warm start (copied), defaults to zero
    rtol : termination on ||r|| <= rtol * ||b||
    max_iter : defaults to 10 * n + 100
    precond_diag : diagonal of a Jacobi preconditioner
    project : optional callable applied to b, x0 and every iterate update
        direction's residual, used to pin the mean-zero subspace of the
        singular periodic problem

    Returns (x, iterations).  Raises SolverError on non-convergence with the
    final relative residual attached.
    """
    matvec = A if callable(A) else (lambda v: A @ v)
    b = np.asarray(b, dtype=float)
    n = b.size
    if max_iter is None:
        max_iter = 10 * n + 100
    if project is not None:
        b = project(b)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros_like(b), 0
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if project is not None:
        x = project(x)
    r = b - matvec(x)
    if project is not None:
        r = project(r)
    if precond_diag is not None:
        inv_diag = 1.0 / np.asarray(precond_diag, dtype=float)
        z = inv_diag * r
    else:
        inv_diag = None
        z = r
    p = z.copy()
    rz = float(r @ z)
    for k in range(1, max_iter + 1):
        res = np.linalg.norm(r)
        if res <= rtol * b_norm:
            return x, k - 1
        Ap = matvec(p)
        if project is not None:
            Ap = project(Ap)
        alpha = rz / float(p @ Ap)
        x = x + alpha * p
        r = r - alpha * Ap
        z = inv_diag * r if inv_diag is not None else r
        rz_new = float(r @ z)
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    res = float(np.linalg.norm(r))
    raise SolverError(
        f"conjugate gradient failed to reach rtol={rtol} in {max_iter} iterations "
        f"(relative residual {res / b_norm:.3e})",
        residual=res / b_norm,
        iterations=max_iter,
    )
