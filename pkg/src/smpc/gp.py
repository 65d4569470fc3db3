"""Gaussian-process regression of unknown residual dynamics.

One independent GP per output dimension.  Hyperparameters are supplied by the
user; the Gram matrix ``K + noise * I`` is factorized once at fit time.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import IndefiniteGramError, ParameterError

SQUARED_EXPONENTIAL = "se"
LOCALLY_PERIODIC = "lp"


@dataclass(frozen=True)
class Kernel:
    """Stationary kernel.

    ``kind="se"``: ``sf2 * exp(-0.5 * sum(((z - z') / ell)**2))`` with one
    lengthscale per input (a scalar is broadcast).

    ``kind="lp"``: squared exponential times a periodic factor,
    ``sf2 * exp(-2 sin^2(pi r / period) / ell^2) * exp(-r^2 / (2 ell^2))``
    with ``r = |z - z'|``.
    """

    kind: str
    sf2: float
    ell: tuple
    period: float = 1.0

    def __post_init__(self):
        ell = tuple(float(v) for v in np.atleast_1d(self.ell))
        object.__setattr__(self, "ell", ell)
        if self.kind not in (SQUARED_EXPONENTIAL, LOCALLY_PERIODIC):
            raise ParameterError(f"unknown kernel kind {self.kind!r}")
        if not self.sf2 > 0 or not all(v > 0 for v in ell) or not self.period > 0:
            raise ParameterError("kernel hyperparameters must be positive")
        if self.kind == LOCALLY_PERIODIC and len(ell) != 1:
            raise ParameterError("locally periodic kernel takes a single lengthscale")

    def _ell(self, nz):
        ell = np.asarray(self.ell)
        if ell.size == 1:
            return np.full(nz, ell[0])
        if ell.size != nz:
            raise ParameterError(f"kernel has {ell.size} lengthscales, input has {nz} dims")
        return ell

    def matrix(self, A, B):
        """Kernel matrix between the rows of ``A`` (m, nz) and ``B`` (n, nz)."""
        A = np.atleast_2d(A)
        B = np.atleast_2d(B)
        if self.kind == SQUARED_EXPONENTIAL:
            ell = self._ell(A.shape[1])
            d = (A[:, None, :] - B[None, :, :]) / ell
            return self.sf2 * np.exp(-0.5 * np.einsum("ijk,ijk->ij", d, d))
        r2 = np.einsum("ijk,ijk->ij", A[:, None, :] - B[None, :, :], A[:, None, :] - B[None, :, :])
        r = np.sqrt(r2)
        ell2 = self.ell[0] ** 2
        return self.sf2 * np.exp(-2.0 * np.sin(np.pi * r / self.period) ** 2 / ell2 - r2 / (2.0 * ell2))

    def grad_first(self, z, B):
        """Derivative of ``k(z, b_j)`` with respect to ``z``; shape (n, nz)."""
        return self.grad_batch(np.asarray(z, dtype=float)[None, :], B)[0]

    def grad_batch(self, A, B):
        """Derivative of ``k(a_s, b_j)`` with respect to ``a_s``; shape (m, n, nz)."""
        A = np.atleast_2d(A)
        B = np.atleast_2d(B)
        k = self.matrix(A, B)
        diff = A[:, None, :] - B[None, :, :]
        if self.kind == SQUARED_EXPONENTIAL:
            ell = self._ell(B.shape[1])
            return -(k[..., None] * diff / ell ** 2)
        r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        ell2 = self.ell[0] ** 2
        w = np.pi / self.period
        # d/dr of the log-kernel divided by r, finite as r -> 0
        s = np.sinc(2.0 * w * r / np.pi)
        dlog_over_r = -(4.0 * w * w * s) / ell2 - 1.0 / ell2
        return (k * dlog_over_r)[..., None] * diff


def SquaredExponential(sf2=1.0, ell=1.0) -> Kernel:
    return Kernel(SQUARED_EXPONENTIAL, float(sf2), ell)


def LocallyPeriodic(sf2=1.0, ell=1.0, period=1.0) -> Kernel:
    return Kernel(LOCALLY_PERIODIC, float(sf2), ell, float(period))


def kernel_eval(kernel: Kernel, z, zp) -> float:
    return float(kernel.matrix(np.atleast_1d(z)[None, :], np.atleast_1d(zp)[None, :])[0, 0])


@dataclass(frozen=True)
class GPModel:
    kernels: tuple
    Z: np.ndarray         # (M, nz) training inputs
    Y: np.ndarray         # (M, nout) training outputs
    noise: np.ndarray     # (nout,)
    factors: tuple        # lower Cholesky factor of K_i + noise_i I, per output
    alphas: np.ndarray    # (nout, M), (K_i + noise_i I)^-1 y_i

    @property
    def n_in(self) -> int:
        return self.Z.shape[1]

    @property
    def n_out(self) -> int:
        return self.Y.shape[1]

    @property
    def n_data(self) -> int:
        return self.Z.shape[0]


def gp_fit(kernels, Z, Y, noise) -> GPModel:
    """Fit one GP per output column of ``Y``.

    ``kernels`` is a single kernel (shared) or one per output; ``noise`` a
    scalar or one variance per output.  ``Z`` may have zero rows, giving
    the prior.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Z.shape[0] != Y.shape[0]:
        raise ParameterError(f"{Z.shape[0]} inputs but {Y.shape[0]} outputs")
    nout = Y.shape[1]
    if isinstance(kernels, Kernel):
        kernels = (kernels,) * nout
    kernels = tuple(kernels)
    if len(kernels) != nout:
        raise ParameterError("one kernel per output dimension required")
    noise = np.broadcast_to(np.asarray(noise, dtype=float), (nout,)).copy()
    if (noise < 0).any():
        raise ParameterError("noise variances must be >= 0")
    M = Z.shape[0]
    factors = []
    alphas = np.zeros((nout, M))
    for i, k in enumerate(kernels):
        if M == 0:
            factors.append(np.zeros((0, 0)))
            continue
        K = k.matrix(Z, Z) + noise[i] * np.eye(M)
        try:
            c, _ = cho_factor(K, lower=True)
        except np.linalg.LinAlgError as exc:
            raise IndefiniteGramError(
                f"Gram matrix of output {i} is not positive definite; "
                "use a positive noise variance or remove duplicate inputs") from exc
        L = np.tril(c)
        if np.min(np.abs(np.diag(L))) < 1e-12 * np.sqrt(np.max(np.diag(K))):
            raise IndefiniteGramError(
                f"Gram matrix of output {i} is numerically singular; "
                "use a positive noise variance or remove duplicate inputs")
        factors.append(L)
        alphas[i] = cho_solve((L, True), Y[:, i])
    return GPModel(kernels, Z, Y, noise, tuple(factors), alphas)


def gp_predict(model: GPModel, z):
    """Posterior mean and variance per output at a single input ``z``."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    mean = np.zeros(model.n_out)
    var = np.zeros(model.n_out)
    for i, k in enumerate(model.kernels):
        kss = k.sf2
        if model.n_data == 0:
            var[i] = kss
            continue
        ks = k.matrix(z[None, :], model.Z)[0]
        mean[i] = ks @ model.alphas[i]
        v = solve_triangular(model.factors[i], ks, lower=True)
        var[i] = max(kss - v @ v, 0.0)
    return mean, var


def gp_mean_jacobian(model: GPModel, z) -> np.ndarray:
    """Jacobian of the posterior mean with respect to ``z``; shape (n_out, n_in)."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    J = np.zeros((model.n_out, z.size))
    if model.n_data == 0:
        return J
    for i, k in enumerate(model.kernels):
        J[i] = model.alphas[i] @ k.grad_first(z, model.Z)
    return J


def gp_predict_batch(model: GPModel, Zq):
    """Posterior means and variances at the columns of ``Zq`` (n_in, S); both (n_out, S)."""
    Zq = np.asarray(Zq, dtype=float)
    S = Zq.shape[1]
    mean = np.zeros((model.n_out, S))
    var = np.empty((model.n_out, S))
    for i, k in enumerate(model.kernels):
        if model.n_data == 0:
            var[i] = k.sf2
            continue
        Ks = k.matrix(Zq.T, model.Z)
        mean[i] = Ks @ model.alphas[i]
        V = solve_triangular(model.factors[i], Ks.T, lower=True)
        var[i] = np.maximum(k.sf2 - np.einsum("ms,ms->s", V, V), 0.0)
    return mean, var


def gp_grads_batch(model: GPModel, Zq, variance=True):
    """Input gradients of the posterior mean and variance, each (n_out, n_in, S).

    The variance gradient is ``None`` when ``variance`` is false.
    """
    Zq = np.asarray(Zq, dtype=float)
    nz, S = Zq.shape
    Jm = np.zeros((model.n_out, nz, S))
    Jv = np.zeros((model.n_out, nz, S)) if variance else None
    if model.n_data == 0:
        return Jm, Jv
    for i, k in enumerate(model.kernels):
        dK = k.grad_batch(Zq.T, model.Z)           # (S, M, nz)
        Jm[i] = np.einsum("smd,m->ds", dK, model.alphas[i])
        if variance:
            Ks = k.matrix(Zq.T, model.Z)
            beta = cho_solve((model.factors[i], True), Ks.T)   # (M, S)
            Jv[i] = -2.0 * np.einsum("ms,smd->ds", beta, dK)
    return Jm, Jv


def load_csv(path):
    """Read training data with header ``z_1..z_Nz,out_1..out_Nx``; returns ``(Z, Y)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = [h.strip() for h in rows[0]]
    zi = [j for j, h in enumerate(header) if h.startswith("z_")]
    oi = [j for j, h in enumerate(header) if h.startswith("out_")]
    if not zi or not oi or len(zi) + len(oi) != len(header):
        raise ParameterError(f"unexpected GP data header {header}")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float).reshape(-1, len(header))
    return data[:, zi], data[:, oi]


def save_csv(path, Z, Y):
    Z = np.atleast_2d(Z)
    Y = np.atleast_2d(Y)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z_{j + 1}" for j in range(Z.shape[1])] + [f"out_{j + 1}" for j in range(Y.shape[1])])
        for zr, yr in zip(Z, Y):
            w.writerow([f"{v:.17g}" for v in np.concatenate([zr, yr])])
