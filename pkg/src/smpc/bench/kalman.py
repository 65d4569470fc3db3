"""Kalman filter on a fixed linearization of continuous-time dynamics."""
from __future__ import annotations

import numpy as np
from scipy.linalg import expm

from ..distributions import JointDistribution
from ..errors import FilterError, ParameterError


def discretize(A, B, Qc, dt, c=None):
    """Zero-order-hold discretization ``(Ad, Bd, cd, Qd)`` by Van Loan's method.

    ``c`` is a constant drift (the model's residual at the linearization
    point).  ``Qc`` is the continuous process-noise intensity.
    """
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    n, m = B.shape
    c = np.zeros(n) if c is None else np.asarray(c, dtype=float)
    M = np.zeros((n + m + 1, n + m + 1))
    M[:n, :n] = A
    M[:n, n:n + m] = B
    M[:n, -1] = c
    E = expm(M * dt)
    Ad, Bd, cd = E[:n, :n], E[:n, n:n + m], E[:n, -1]
    V = np.zeros((2 * n, 2 * n))
    V[:n, :n] = -A
    V[:n, n:] = Qc
    V[n:, n:] = A.T
    F = expm(V * dt)
    Qd = F[n:, n:].T @ F[:n, n:]
    return Ad, Bd, cd, 0.5 * (Qd + Qd.T)


class KalmanFilter:
    """Linear predict/update at the fixed point ``(x_lin, u_lin)``.

    ``A``, ``B`` are the continuous Jacobians there and ``c`` the residual
    ``f(x_lin, u_lin)``; ``C`` maps states to measurements with noise
    covariance ``R``.  Rows of ``R`` with infinite variance are ignored.
    """

    def __init__(self, A, B, C, Qc, R, dt, mean, cov, x_lin=None, u_lin=None, c=None):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n = A.shape[0]
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        self.R = np.atleast_2d(np.asarray(R, dtype=float))
        if self.C.shape[1] != n or self.R.shape != (self.C.shape[0],) * 2:
            raise ParameterError("measurement matrices have inconsistent shapes")
        self.Ad, self.Bd, self.cd, self.Qd = discretize(A, B, np.atleast_2d(Qc), dt, c)
        self.x_lin = np.zeros(n) if x_lin is None else np.asarray(x_lin, dtype=float)
        self.u_lin = np.zeros(self.Bd.shape[1]) if u_lin is None else np.asarray(u_lin, dtype=float)
        self.mean = np.asarray(mean, dtype=float).copy()
        self.cov = np.asarray(cov, dtype=float).copy()

    def predict(self, u):
        dx = self.mean - self.x_lin
        du = np.atleast_1d(np.asarray(u, dtype=float)) - self.u_lin
        self.mean = self.x_lin + self.Ad @ dx + self.Bd @ du + self.cd
        P = self.Ad @ self.cov @ self.Ad.T + self.Qd
        self.cov = 0.5 * (P + P.T)
        return self.mean, self.cov

    def update(self, y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        keep = np.isfinite(np.diag(self.R))
        if not keep.any():
            return self.mean, self.cov
        C = self.C[keep]
        R = self.R[np.ix_(keep, keep)]
        S = C @ self.cov @ C.T + R
        S = 0.5 * (S + S.T)
        try:
            Lc = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise FilterError("innovation covariance is singular") from exc
        if np.min(np.diag(Lc)) <= 1e-14 * max(1.0, np.sqrt(np.max(np.diag(S)))):
            raise FilterError("innovation covariance is singular")
        PCt = self.cov @ C.T
        K = np.linalg.solve(S, PCt.T).T
        self.mean = self.mean + K @ (y[keep] - C @ self.mean)
        IKC = np.eye(self.mean.size) - K @ C
        P = IKC @ self.cov @ IKC.T + K @ R @ K.T
        self.cov = 0.5 * (P + P.T)
        return self.mean, self.cov

    def distribution(self) -> JointDistribution:
        return JointDistribution.gaussian(self.mean, self.cov)


def kf_predict(kf: KalmanFilter, u):
    return kf.predict(u)


def kf_update(kf: KalmanFilter, y):
    return kf.update(y)
