"""Least-squares Monte Carlo regression used for conditional expectations."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

RIDGE = 1e-8
COND_LIMIT = 1e10
DROP_TOL = 1e-9


class RegressionError(RuntimeError):
    pass


def polynomial_design(variables, degree):
    """Design matrix of all monomials of total degree <= ``degree``.

    ``variables`` is an ``(N, d)`` array.  Each column is standardised first and
    columns that are constant across the sample are dropped, so the intercept
    is the only constant column of the result.
    """
    V = np.asarray(variables, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    N = V.shape[0]
    cols = [np.ones(N)]
    if V.shape[1] and degree > 0:
        mu = V.mean(axis=0)
        sd = V.std(axis=0)
        keep = sd > 1e-12 * (1.0 + np.abs(mu))
        Z = (V[:, keep] - mu[keep]) / sd[keep]
        d = Z.shape[1]
        for deg in range(1, degree + 1):
            for combo in itertools.combinations_with_replacement(range(d), deg):
                col = Z[:, combo[0]].copy()
                for c in combo[1:]:
                    col *= Z[:, c]
                cols.append(col)
    return np.column_stack(cols)


@dataclass
class FitDiagnostics:
    basis_size: int
    dropped: int
    ridge: bool
    condition: float
    residual: float = np.nan
    normal_residual: float = np.nan


class NodeRegressor:
    """Weighted least-squares projection onto the columns of a design matrix.

    The factorisation is computed once; :meth:`fit` projects any number of
    target columns.  Linearly dependent columns are pruned via the diagonal of
    the QR factor; if the pruned system is still ill-conditioned a ridge
    penalty of relative size ``RIDGE`` is added.
    """

    def __init__(self, A, weights=None):
        A = np.asarray(A, dtype=float)
        self.n_rows, n_cols = A.shape
        self.sw = None if weights is None else np.sqrt(np.asarray(weights, dtype=float))
        As = A if self.sw is None else A * self.sw[:, None]
        Q, R = np.linalg.qr(As)
        diag = np.abs(np.diag(R))
        keep = diag > DROP_TOL * max(diag.max(initial=0.0), 1e-300)
        if not keep.all():
            A = A[:, keep]
            As = As[:, keep]
            Q, R = np.linalg.qr(As)
        self.A = A
        cond = np.linalg.cond(R) if R.size else 1.0
        self.ridge = not np.isfinite(cond) or cond > COND_LIMIT
        self.Q, self.R = Q, R
        if self.ridge:
            G = R.T @ R
            lam = RIDGE * max(np.trace(G) / max(G.shape[0], 1), 1e-300)
            self._ridge_mat = G + lam * np.eye(G.shape[0])
        self.diag = FitDiagnostics(A.shape[1], int((~keep).sum()), self.ridge, float(cond))

    def coefficients(self, B):
        B = np.asarray(B, dtype=float)
        Bs = B if self.sw is None else B * self.sw.reshape((-1,) + (1,) * (B.ndim - 1))
        rhs = self.Q.T @ Bs
        if self.ridge:
            beta = np.linalg.solve(self._ridge_mat, self.R.T @ rhs)
        else:
            beta = np.linalg.solve(self.R, rhs)
        if not np.all(np.isfinite(beta)):
            raise RegressionError("regression produced non-finite coefficients")
        return beta

    def fit(self, B, record=False):
        """Fitted values of the projection of ``B`` (shape ``(N,)`` or ``(N, q)``)."""
        B = np.asarray(B, dtype=float)
        flat = B.reshape(self.n_rows, -1)
        beta = self.coefficients(flat)
        fitted = self.A @ beta
        if record:
            res = flat - fitted
            w = 1.0 if self.sw is None else (self.sw ** 2)[:, None]
            ne = self.A.T @ (w * res)
            scale = np.abs(self.A.T @ (w * flat)).max(initial=0.0)
            self.diag.residual = float(np.sqrt(np.mean(res ** 2)))
            self.diag.normal_residual = float(np.abs(ne).max(initial=0.0) / max(scale, 1e-300))
        return fitted.reshape(B.shape)


def conditional_expectation(variables, targets, degree=2, weights=None):
    """One-shot regression estimate of ``E[targets | variables]``."""
    return NodeRegressor(polynomial_design(variables, degree), weights).fit(targets)
