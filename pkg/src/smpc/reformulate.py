"""Deterministic reformulation of chance-constrained stochastic OCPs.

Three representations are provided:

``build_sr``
    sampling-based: the deterministic state stacks one copy of the state per
    propagation point; points are drawn once per build.
``build_mr_taylor``
    moment-based with first-order Taylor linearization of the dynamics.
``build_mr_sampling``
    moment-based with sigma points regenerated from the current moments on
    every evaluation.

User functions are vectorized over a trailing sample axis (see
:class:`StochasticProblem`).  The resulting :class:`DeterministicProblem`
is vectorized over a trailing time axis: states ``X`` have shape
``(nx_tilde, K)`` and inputs ``U`` shape ``(nu, K)``.  Gradients are exposed
as vector-Jacobian products, which is all the adjoint-based solver needs.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.linalg.lapack import dpotrf, dtrtrs

from . import chance
from .distributions import JointDistribution, stack
from .errors import (ApproximationInvalidError, MissingDerivativeError, ParameterError,
                     UnsupportedGPError, UnsupportedWienerError)
from .gp import GPModel, gp_grads_batch, gp_predict_batch
from .transform import (MONTECARLO, SIGMA_METHODS, TAYLOR1, PropagationMethod,
                        cholesky_psd, cholesky_vjp, generate_points)

MOMENT_TIGHTENED = "moment"
PER_SAMPLE = "per-sample"
_EPS_SQRT = np.sqrt(np.finfo(float).eps)


@dataclass(frozen=True)
class GPAttachment:
    """GP residual ``d(z)`` added to selected state derivatives.

    ``inputs`` index into ``z = [x; u]`` and ``outputs`` into ``x``; both
    default to all dimensions.
    """

    model: GPModel
    outputs: tuple
    inputs: tuple


@dataclass
class StochasticProblem:
    """Stochastic OCP with chance constraints.

    Shapes with ``S`` samples: ``x (nx, S)``, ``u (nu, S)``, ``p (np, S)``.

    * ``f(x, u, p) -> (nx, S)``; ``dfdx``, ``dfdu``, ``dfdp`` return
      ``(nx, nx, S)``, ``(nx, nu, S)``, ``(nx, np, S)``.  ``f_vjp(x, u, p, lam)``
      may replace the Jacobians for gradient purposes and returns
      ``(gx, gu, gp)``.
    * ``l(x, u, p) -> (S,)`` with ``l_grad -> (gx, gu)``; ``V(x, p) -> (S,)``
      with ``V_grad -> gx``.  Costs are treated as independent of ``p`` in
      gradients.
    * ``h(x, u) -> (nh, S)`` with ``h_jac -> (Jx (nh, nx, S), Ju (nh, nu, S))``;
      ``hT(x) -> (nhT, S)`` with ``hT_jac -> (nhT, nx, S)``.  Each row must
      satisfy ``P[row <= 0] >= alpha`` (``alphaT`` for terminal rows).
    """

    nx: int
    nu: int
    f: Callable
    x0: JointDistribution
    T: float
    u_min: np.ndarray
    u_max: np.ndarray
    p: JointDistribution = field(default_factory=JointDistribution.empty)
    dfdx: Optional[Callable] = None
    dfdu: Optional[Callable] = None
    dfdp: Optional[Callable] = None
    f_vjp: Optional[Callable] = None
    l: Optional[Callable] = None
    l_grad: Optional[Callable] = None
    V: Optional[Callable] = None
    V_grad: Optional[Callable] = None
    h: Optional[Callable] = None
    h_jac: Optional[Callable] = None
    alpha: tuple = ()
    hT: Optional[Callable] = None
    hT_jac: Optional[Callable] = None
    alphaT: tuple = ()
    sigma_w: Optional[np.ndarray] = None
    gp: Optional[GPAttachment] = None
    name: str = ""

    def __post_init__(self):
        self.u_min = np.broadcast_to(np.asarray(self.u_min, dtype=float), (self.nu,)).copy()
        self.u_max = np.broadcast_to(np.asarray(self.u_max, dtype=float), (self.nu,)).copy()
        if (self.u_min > self.u_max).any():
            raise ParameterError("u_min must not exceed u_max")
        if self.x0.dim != self.nx:
            raise ParameterError(f"x0 has dimension {self.x0.dim}, expected {self.nx}")
        if not self.T > 0:
            raise ParameterError("horizon T must be positive")
        self.alpha = tuple(float(a) for a in self.alpha)
        self.alphaT = tuple(float(a) for a in self.alphaT)
        for a in self.alpha + self.alphaT:
            if not 0.0 < a < 1.0:
                raise ParameterError(f"chance level must lie in (0, 1), got {a}")
        if self.alpha and self.h is None or self.alphaT and self.hT is None:
            raise ParameterError("chance levels given without constraint functions")
        if self.sigma_w is not None:
            sw = np.atleast_2d(np.asarray(self.sigma_w, dtype=float))
            if sw.shape != (self.nx, self.nx):
                raise ParameterError("sigma_w must be nx x nx")
            self.sigma_w = sw

    @property
    def n_p(self) -> int:
        return self.p.dim

    @property
    def nh(self) -> int:
        return len(self.alpha)

    @property
    def nhT(self) -> int:
        return len(self.alphaT)

    @property
    def Sigma_w(self) -> np.ndarray:
        if self.sigma_w is None:
            return np.zeros((self.nx, self.nx))
        return self.sigma_w @ self.sigma_w.T

    def check(self):
        """Probe every user function at the means and verify output shapes."""
        x = self.x0.mean[:, None]
        u = (0.5 * (self.u_min + self.u_max))[:, None]
        p = self.p.mean[:, None]
        _shape(self.f(x, u, p), (self.nx, 1), "f")
        if self.dfdx is not None:
            _shape(self.dfdx(x, u, p), (self.nx, self.nx, 1), "dfdx")
        if self.dfdu is not None:
            _shape(self.dfdu(x, u, p), (self.nx, self.nu, 1), "dfdu")
        if self.h is not None:
            _shape(self.h(x, u), (self.nh, 1), "h")
        if self.hT is not None:
            _shape(self.hT(x), (self.nhT, 1), "hT")
        if self.l is not None:
            _shape(self.l(x, u, p), (1,), "l")
        return True

    def vjp(self, x, u, p, lam):
        """``(lam^T df/dx, lam^T df/du, lam^T df/dp)`` per sample."""
        if self.f_vjp is not None:
            return self.f_vjp(x, u, p, lam)
        if self.dfdx is None or self.dfdu is None or (self.n_p and self.dfdp is None):
            raise MissingDerivativeError("gradients need f_vjp or the Jacobians of f")
        gx = np.einsum("ijs,is->js", self.dfdx(x, u, p), lam)
        gu = np.einsum("ijs,is->js", self.dfdu(x, u, p), lam)
        if self.n_p:
            gp = np.einsum("ijs,is->js", self.dfdp(x, u, p), lam)
        else:
            gp = np.zeros((0, x.shape[1]))
        return gx, gu, gp


def _shape(a, shape, name):
    a = np.asarray(a)
    if a.shape != shape:
        raise ParameterError(f"{name} returned shape {a.shape}, expected {shape}")


def attach_gp(problem: StochasticProblem, model: GPModel, outputs=None, inputs=None) -> StochasticProblem:
    """Copy of ``problem`` whose dynamics include the GP residual ``mu_d(z)``."""
    outputs = tuple(range(problem.nx)) if outputs is None else tuple(int(i) for i in outputs)
    inputs = tuple(range(problem.nx + problem.nu)) if inputs is None else tuple(int(i) for i in inputs)
    if model.n_out != len(outputs):
        raise ParameterError(f"GP has {model.n_out} outputs, {len(outputs)} state derivatives selected")
    if model.n_data and model.n_in != len(inputs):
        raise ParameterError(f"GP has {model.n_in} inputs, {len(inputs)} selected")
    return replace(problem, gp=GPAttachment(model, outputs, inputs))


# ---------------------------------------------------------------------------


class DeterministicProblem:
    """Deterministic OCP consumed by the solver.

    Subclasses implement the time-batched callables below.  ``V``/``hT`` act
    on a single state vector.
    """

    nx: int
    nu: int
    nh: int
    nhT: int
    x0: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    T: float
    base_nx: int
    name: str = ""

    def f(self, X, U):
        raise NotImplementedError

    def f_vjp(self, X, U, L):
        raise NotImplementedError

    def l(self, X, U):
        return np.zeros(X.shape[1])

    def l_grad(self, X, U):
        return np.zeros_like(X), np.zeros((self.nu, X.shape[1]))

    def V(self, x):
        return 0.0

    def V_grad(self, x):
        return np.zeros_like(x)

    def h(self, X, U):
        return np.zeros((0, X.shape[1]))

    def h_vjp(self, X, U, N):
        return np.zeros_like(X), np.zeros((self.nu, X.shape[1]))

    def hT(self, x):
        return np.zeros(0)

    def hT_vjp(self, x, nu):
        return np.zeros_like(x)

    def moments(self, X):
        """Mean and variance of the original state along a trajectory."""
        raise NotImplementedError

    # generic finite-difference fallbacks, batched along the time axis
    def fd_f_vjp(self, X, U, L):
        K = X.shape[1]
        n, m = self.nx, self.nu
        Z = np.concatenate([X, U])
        step = _EPS_SQRT * (1.0 + np.abs(Z))
        E = np.eye(n + m)
        Zp = Z[:, None, :] + E[:, :, None] * step[None, :, :]
        Zm = Z[:, None, :] - E[:, :, None] * step[None, :, :]
        Zall = np.concatenate([Zp, Zm], axis=1).reshape(n + m, -1)
        Fall = self.f(Zall[:n], Zall[n:]).reshape(n, 2, n + m, K)
        D = (Fall[:, 0] - Fall[:, 1]) / (2.0 * step[None])
        G = np.einsum("ik,ijk->jk", L, D)
        return G[:n], G[n:]


def _tighten_vjp(var, z, N):
    sd = np.sqrt(np.maximum(var, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        vbar = np.where(sd > 0, N * z / (2.0 * sd), 0.0)
    return vbar


def _zvec(approx, alphas):
    return np.array([chance.z_coeff(approx, a) for a in alphas]).reshape(-1, 1)


# ---------------------------------------------------------------------------
# sampling-based representation


class SRProblem(DeterministicProblem):
    """Sampling-based representation; state index ``i * nx + j`` is state ``j`` of sample ``i``."""

    def __init__(self, prob: StochasticProblem, method: PropagationMethod, approx: str,
                 mode: str = MOMENT_TIGHTENED, rng=None):
        if prob.sigma_w is not None and np.any(prob.sigma_w != 0):
            raise UnsupportedWienerError("Wiener process is only supported in the moment-based representation")
        if prob.gp is not None:
            raise UnsupportedGPError("Gaussian processes are only supported in the moment-based representation")
        if method.kind == TAYLOR1:
            raise ParameterError("sampling-based representation needs a point-based method")
        if mode not in (MOMENT_TIGHTENED, PER_SAMPLE):
            raise ParameterError(f"unknown constraint mode {mode!r}")
        self.prob = prob
        self.method = method
        self.mode = mode
        self.approx = approx
        joint = stack(prob.x0, prob.p)
        self.points = ps = generate_points(method, joint, rng)
        self.Ns = Ns = ps.size
        nxb = prob.nx
        self.base_nx = nxb
        self.P = ps.points[nxb:]
        self.nx = nxb * Ns
        self.nu = prob.nu
        self.x0 = ps.points[:nxb].T.reshape(-1).copy()
        self.u_min, self.u_max = prob.u_min, prob.u_max
        self.T = prob.T
        self.name = prob.name
        self.wm = ps.mean_weights
        self.z = _zvec(approx, prob.alpha)
        self.zT = _zvec(approx, prob.alphaT)
        k = 1 if mode == MOMENT_TIGHTENED else Ns
        self.nh = prob.nh * k
        self.nhT = prob.nhT * k
        self._ptile = {}
        if mode == PER_SAMPLE and method.kind == MONTECARLO:
            for a in prob.alpha + prob.alphaT:
                try:
                    chance.mc_confidence(Ns, a)
                except ApproximationInvalidError:
                    c = chance.mc_confidence(Ns, a, check=False)
                    warnings.warn(f"normal approximation invalid for Ns={Ns}, alpha={a}; "
                                  f"confidence estimate {c:.4f}", RuntimeWarning)

    # layout helpers: column k * Ns + i holds sample i at time k
    def _split(self, X):
        K = X.shape[1]
        if K == 1:
            return X.reshape(self.Ns, self.base_nx).T
        return X.reshape(self.Ns, self.base_nx, K).transpose(1, 2, 0).reshape(self.base_nx, K * self.Ns)

    def _merge(self, A, K):
        n = A.shape[0]
        if K == 1:
            return A.T.reshape(-1, 1)
        return A.reshape(n, K, self.Ns).transpose(2, 0, 1).reshape(self.Ns * n, K)

    def _p(self, K):
        P = self._ptile.get(K)
        if P is None:
            P = self._ptile[K] = np.tile(self.P, (1, K))
        return P

    def _u(self, U):
        return np.repeat(U, self.Ns, axis=1)

    def f(self, X, U):
        K = X.shape[1]
        if K == 1:
            u = U.repeat(self.Ns, axis=1)
            return self.prob.f(X.reshape(self.Ns, self.base_nx).T, u, self.P).T.reshape(-1, 1)
        return self._merge(self.prob.f(self._split(X), self._u(U), self._p(K)), K)

    def f_vjp(self, X, U, L):
        K = X.shape[1]
        if K == 1:
            Ns, n = self.Ns, self.base_nx
            gx, gu, _ = self.prob.vjp(X.reshape(Ns, n).T, U.repeat(Ns, axis=1),
                                      self.P, L.reshape(Ns, n).T)
            return gx.T.reshape(-1, 1), gu.sum(axis=1, keepdims=True)
        gx, gu, _ = self.prob.vjp(self._split(X), self._u(U), self._p(K), self._split(L))
        return self._merge(gx, K), gu.reshape(self.nu, K, self.Ns).sum(axis=2)

    def l(self, X, U):
        if self.prob.l is None:
            return np.zeros(X.shape[1])
        K = X.shape[1]
        return self.prob.l(self._split(X), self._u(U), self._p(K)).reshape(K, self.Ns) @ self.wm

    def l_grad(self, X, U):
        if self.prob.l is None:
            return super().l_grad(X, U)
        K = X.shape[1]
        gx, gu = self.prob.l_grad(self._split(X), self._u(U), self._p(K))[:2]
        w = np.tile(self.wm, K)
        return self._merge(gx * w, K), (gu * w).reshape(self.nu, K, self.Ns).sum(axis=2)

    def V(self, x):
        if self.prob.V is None:
            return 0.0
        return float(self.prob.V(self._split(x[:, None]), self.P) @ self.wm)

    def V_grad(self, x):
        if self.prob.V is None:
            return np.zeros_like(x)
        g = self.prob.V_grad(self._split(x[:, None]), self.P)
        return self._merge(g * self.wm, 1)[:, 0]

    def _reduce(self, H, z, K):
        m = H.shape[0]
        if self.mode == PER_SAMPLE:
            return H.reshape(m, K, self.Ns).transpose(0, 2, 1).reshape(m * self.Ns, K)
        mean, var = self.points.moments(H.reshape(m * K, self.Ns))
        return (mean + np.repeat(z[:, 0], K) * np.sqrt(np.maximum(var, 0.0))).reshape(m, K)

    def _reduce_vjp(self, H, z, K, N):
        m = H.shape[0]
        if self.mode == PER_SAMPLE:
            return N.reshape(m, self.Ns, K).transpose(0, 2, 1).reshape(m, K * self.Ns)
        Hr = H.reshape(m * K, self.Ns)
        mean, var = self.points.moments(Hr)
        mbar = N.reshape(-1)
        vbar = _tighten_vjp(var, np.repeat(z[:, 0], K), mbar)
        return self.points.moments_vjp(Hr, mean, mbar, vbar).reshape(m, K * self.Ns)

    def h(self, X, U):
        if self.prob.h is None:
            return np.zeros((0, X.shape[1]))
        K = X.shape[1]
        return self._reduce(self.prob.h(self._split(X), self._u(U)), self.z, K)

    def h_vjp(self, X, U, N):
        if self.prob.h is None:
            return super().h_vjp(X, U, N)
        K = X.shape[1]
        x, u = self._split(X), self._u(U)
        Hbar = self._reduce_vjp(self.prob.h(x, u), self.z, K, N)
        Jx, Ju = self.prob.h_jac(x, u)
        gx = np.einsum("jis,js->is", Jx, Hbar)
        gu = np.einsum("jis,js->is", Ju, Hbar)
        return self._merge(gx, K), gu.reshape(self.nu, K, self.Ns).sum(axis=2)

    def hT(self, x):
        if self.prob.hT is None:
            return np.zeros(0)
        return self._reduce(self.prob.hT(self._split(x[:, None])), self.zT, 1)[:, 0]

    def hT_vjp(self, x, nu):
        if self.prob.hT is None:
            return np.zeros_like(x)
        xs = self._split(x[:, None])
        Hbar = self._reduce_vjp(self.prob.hT(xs), self.zT, 1, np.asarray(nu).reshape(-1, 1))
        gx = np.einsum("jis,js->is", self.prob.hT_jac(xs), Hbar)
        return self._merge(gx, 1)[:, 0]

    def moments(self, X):
        K = X.shape[1]
        mean, var = self.points.moments(self._split(X).reshape(self.base_nx * K, self.Ns))
        return mean.reshape(self.base_nx, K), var.reshape(self.base_nx, K)


def build_sr(problem: StochasticProblem, method: PropagationMethod, approx: str = chance.GAUSSIAN,
             mode: str = MOMENT_TIGHTENED, rng=None) -> SRProblem:
    """Sampling-based reformulation; points of the joint ``(x0, p)`` are drawn once."""
    return SRProblem(problem, method, approx, mode, rng)


# ---------------------------------------------------------------------------
# moment-based representations


class _MRBase(DeterministicProblem):
    """State layout ``[mu (nx), Sigma (nx*nx, row-major), Sigma_xp (nx*np)]``."""

    def __init__(self, prob: StochasticProblem, approx: str):
        self.prob = prob
        n, q = prob.nx, prob.n_p
        self.base_nx = n
        self.n_p = q
        self.nx = n + n * n + n * q
        self.nu = prob.nu
        self.nh = prob.nh
        self.nhT = prob.nhT
        self.u_min, self.u_max = prob.u_min, prob.u_max
        self.T = prob.T
        self.name = prob.name
        self.z = _zvec(approx, prob.alpha)
        self.zT = _zvec(approx, prob.alphaT)
        self.mup = prob.p.mean
        self.Sp = prob.p.cov
        self.Sw = prob.Sigma_w
        self.gp = prob.gp
        self.x0 = self.pack(prob.x0.mean[:, None], prob.x0.cov[None], np.zeros((1, n, q)))[:, 0]

    def unpack(self, X):
        n, q = self.base_nx, self.n_p
        K = X.shape[1]
        mu = X[:n]
        S = X[n:n + n * n].T.reshape(K, n, n)
        S = 0.5 * (S + S.transpose(0, 2, 1))
        Sxp = X[n + n * n:].T.reshape(K, n, q)
        return mu, S, Sxp

    def pack(self, mu, S, Sxp):
        K = mu.shape[1]
        return np.concatenate([mu, S.reshape(K, -1).T, Sxp.reshape(K, -1).T])

    def _mp(self, K):
        return np.repeat(self.mup[:, None], K, axis=1)

    def moments(self, X):
        mu, S, _ = self.unpack(X)
        return mu.copy(), np.diagonal(S, axis1=1, axis2=2).T.copy()

    # GP helpers on z = [x; u] restricted to the selected inputs
    def _gpz(self, x, u):
        return np.concatenate([x, u])[list(self.gp.inputs)]

    def _gp_mean(self, x, u):
        out = np.zeros_like(x)
        mean, _ = gp_predict_batch(self.gp.model, self._gpz(x, u))
        out[list(self.gp.outputs)] = mean
        return out

    def _gp_var(self, x, u):
        _, var = gp_predict_batch(self.gp.model, self._gpz(x, u))
        return var

    def _gp_full_jac(self, x, u, variance=False):
        """GP mean (and variance) Jacobians w.r.t. [x; u]: (nx, nx+nu, S) and (nout, nx+nu, S)."""
        S = x.shape[1]
        nz = self.base_nx + self.nu
        Jm, Jv = gp_grads_batch(self.gp.model, self._gpz(x, u), variance)
        Jfull = np.zeros((self.base_nx, nz, S))
        Jfull[np.ix_(list(self.gp.outputs), list(self.gp.inputs))] = Jm
        Jvfull = None
        if variance:
            Jvfull = np.zeros((len(self.gp.outputs), nz, S))
            Jvfull[:, list(self.gp.inputs)] = Jv
        return Jfull, Jvfull

    def _add_gp_var(self, dS, mu, U):
        var = self._gp_var(mu, U)
        o = np.array(self.gp.outputs)
        dS[:, o, o] += var.T

    def _gp_var_vjp(self, LS, mu, U):
        """Gradient of sum_k <LS_k, diag(var_d(mu_k, u_k))> w.r.t. (mu, U)."""
        _, Jv = self._gp_full_jac(mu, U, variance=True)
        o = np.array(self.gp.outputs)
        w = LS[:, o, o].T                    # (nout, K)
        g = np.einsum("oK,ozK->zK", w, Jv)
        return g[:self.base_nx], g[self.base_nx:]

    def _unpack_cot(self, L):
        n, q = self.base_nx, self.n_p
        K = L.shape[1]
        return L[:n], L[n:n + n * n].T.reshape(K, n, n), L[n + n * n:].T.reshape(K, n, q)


class MRTaylorProblem(_MRBase):
    """Moment dynamics from a first-order Taylor expansion about the mean."""

    def __init__(self, prob: StochasticProblem, approx: str):
        if prob.dfdx is None or prob.dfdu is None or (prob.n_p and prob.dfdp is None):
            raise MissingDerivativeError("Taylor linearization requires dfdx, dfdu and dfdp")
        if prob.h is not None and prob.h_jac is None or prob.hT is not None and prob.hT_jac is None:
            raise MissingDerivativeError("Taylor linearization requires constraint Jacobians")
        super().__init__(prob, approx)

    def _AB(self, mu, U):
        """A = df/dx (+ GP), B = df/dp at the means; shapes (K, nx, nx), (K, nx, np)."""
        K = mu.shape[1]
        Mp = self._mp(K)
        A = self.prob.dfdx(mu, U, Mp)
        if self.gp is not None:
            J, _ = self._gp_full_jac(mu, U)
            A = A + J[:, :self.base_nx]
        A = A.transpose(2, 0, 1)
        if self.n_p:
            B = self.prob.dfdp(mu, U, Mp).transpose(2, 0, 1)
        else:
            B = np.zeros((K, self.base_nx, 0))
        return A, B

    def f(self, X, U):
        mu, S, Sxp = self.unpack(X)
        K = mu.shape[1]
        fm = self.prob.f(mu, U, self._mp(K))
        if self.gp is not None:
            fm = fm + self._gp_mean(mu, U)
        A, B = self._AB(mu, U)
        C = A @ S + B @ Sxp.transpose(0, 2, 1)
        dS = C + C.transpose(0, 2, 1) + self.Sw
        if self.gp is not None:
            self._add_gp_var(dS, mu, U)
        dSxp = A @ Sxp + B @ self.Sp
        return self.pack(fm, dS, dSxp)

    def f_vjp(self, X, U, L):
        mu, S, Sxp = self.unpack(X)
        K = mu.shape[1]
        n, nu = self.base_nx, self.nu
        Lm, LS, Lxp = self._unpack_cot(L)
        Mp = self._mp(K)
        gmu, gu, _ = self.prob.vjp(mu, U, Mp, Lm)
        if self.gp is not None:
            J, _ = self._gp_full_jac(mu, U)
            gz = np.einsum("iK,izK->zK", Lm, J)
            gmu = gmu + gz[:n]
            gu = gu + gz[n:]
        A, B = self._AB(mu, U)
        LL = LS + LS.transpose(0, 2, 1)
        At = A.transpose(0, 2, 1)
        gS = At @ LS + LS @ A
        gS = 0.5 * (gS + gS.transpose(0, 2, 1))
        gxp = LL @ B + At @ Lxp
        # sensitivities through A(mu, u), B(mu, u): central differences of the Jacobians
        GA = LL @ S + Lxp @ Sxp.transpose(0, 2, 1)
        GB = LL @ Sxp + Lxp @ self.Sp
        Z = np.concatenate([mu, U])
        m = n + nu
        step = _EPS_SQRT * (1.0 + np.abs(Z))                 # (m, K)
        E = np.eye(m)
        Zp = Z[:, None, :] + E[:, :, None] * step[None]     # (m, m, K)
        Zm = Z[:, None, :] - E[:, :, None] * step[None]
        Zall = np.concatenate([Zp, Zm], axis=1).reshape(m, 2 * m * K)
        Aall, Ball = self._AB(Zall[:n], Zall[n:])
        Aall = Aall.reshape(2, m, K, n, n)
        Ball = Ball.reshape(2, m, K, n, self.n_p)
        s = np.einsum("Kab,smKab->smK", GA, Aall) + np.einsum("Kab,smKab->smK", GB, Ball)
        gz = (s[0] - s[1]) / (2.0 * step)
        gmu = gmu + gz[:n]
        gu = gu + gz[n:]
        if self.gp is not None:
            a, b = self._gp_var_vjp(LS, mu, U)
            gmu = gmu + a
            gu = gu + b
        return self.pack(gmu, gS, gxp), gu

    def l(self, X, U):
        if self.prob.l is None:
            return np.zeros(X.shape[1])
        mu = X[:self.base_nx]
        return self.prob.l(mu, U, self._mp(mu.shape[1]))

    def l_grad(self, X, U):
        if self.prob.l is None:
            return super().l_grad(X, U)
        mu = X[:self.base_nx]
        gx, gu = self.prob.l_grad(mu, U, self._mp(mu.shape[1]))[:2]
        G = np.zeros_like(X)
        G[:self.base_nx] = gx
        return G, gu

    def V(self, x):
        if self.prob.V is None:
            return 0.0
        return float(self.prob.V(x[:self.base_nx, None], self.mup[:, None])[0])

    def V_grad(self, x):
        g = np.zeros_like(x)
        if self.prob.V is not None:
            g[:self.base_nx] = self.prob.V_grad(x[:self.base_nx, None], self.mup[:, None])[:, 0]
        return g

    def _var(self, Jx, S):
        return np.einsum("jaK,Kab,jbK->jK", Jx, S, Jx)

    def h(self, X, U):
        if self.prob.h is None:
            return np.zeros((0, X.shape[1]))
        mu, S, _ = self.unpack(X)
        Jx, _ = self.prob.h_jac(mu, U)
        return chance.tighten(self.prob.h(mu, U), self._var(Jx, S), self.z)

    def _h_vjp_core(self, mu, U, S, N, hfun, jacfun):
        n = self.base_nx
        Jx, Ju = jacfun(mu, U)
        var = self._var(Jx, S)
        vbar = _tighten_vjp(var, self.z if U is not None else self.zT, N)
        gmu = np.einsum("jaK,jK->aK", Jx, N)
        gu = np.einsum("jaK,jK->aK", Ju, N) if U is not None else None
        gS = np.einsum("jK,jaK,jbK->Kab", vbar, Jx, Jx)
        # variance through Jx(mu, u): central differences of the constraint Jacobian
        Z = mu if U is None else np.concatenate([mu, U])
        m, K = Z.shape
        step = _EPS_SQRT * (1.0 + np.abs(Z))
        E = np.eye(m)
        Zp = Z[:, None, :] + E[:, :, None] * step[None]
        Zm = Z[:, None, :] - E[:, :, None] * step[None]
        Zall = np.concatenate([Zp, Zm], axis=1).reshape(m, 2 * m * K)
        Jall = jacfun(Zall[:n], None if U is None else Zall[n:])[0]
        Jall = Jall.reshape(Jall.shape[0], n, 2, m, K)
        vall = np.einsum("jasmK,Kab,jbsmK->jsmK", Jall, S, Jall)
        gz = np.einsum("jK,jmK->mK", vbar, vall[:, 0] - vall[:, 1]) / (2.0 * step)
        gmu = gmu + gz[:n]
        if U is not None:
            gu = gu + gz[n:]
        return gmu, gS, gu

    def h_vjp(self, X, U, N):
        if self.prob.h is None:
            return super().h_vjp(X, U, N)
        mu, S, Sxp = self.unpack(X)
        gmu, gS, gu = self._h_vjp_core(mu, U, S, N, self.prob.h, self.prob.h_jac)
        return self.pack(gmu, gS, np.zeros_like(Sxp)), gu

    def hT(self, x):
        if self.prob.hT is None:
            return np.zeros(0)
        mu, S, _ = self.unpack(x[:, None])
        Jx = self.prob.hT_jac(mu)
        return chance.tighten(self.prob.hT(mu), self._var(Jx, S), self.zT)[:, 0]

    def hT_vjp(self, x, nu):
        if self.prob.hT is None:
            return np.zeros_like(x)
        mu, S, Sxp = self.unpack(x[:, None])
        jac = lambda m, _u: (self.prob.hT_jac(m), None)
        gmu, gS, _ = self._h_vjp_core(mu, None, S, np.asarray(nu).reshape(-1, 1), self.prob.hT, jac)
        return self.pack(gmu, gS, np.zeros_like(Sxp))[:, 0]


def build_mr_taylor(problem: StochasticProblem, approx: str = chance.GAUSSIAN) -> MRTaylorProblem:
    """Moment-based reformulation with Taylor-linearized moment dynamics."""
    return MRTaylorProblem(problem, approx)


class MRSamplingProblem(_MRBase):
    """Moment dynamics estimated from sigma points regenerated at every call.

    Gradients are exact reverse-mode derivatives through the point
    generation (including the Cholesky factor).
    """

    def __init__(self, prob: StochasticProblem, method: PropagationMethod, approx: str):
        if method.kind not in SIGMA_METHODS:
            raise ParameterError("moment-based sampling needs UT or Stirling points")
        super().__init__(prob, approx)
        joint = stack(JointDistribution.from_moments(np.zeros(prob.nx), np.eye(prob.nx)), prob.p)
        ps = generate_points(method, joint)
        self.method = method
        self.D = ps.offsets
        self.wm = ps.mean_weights
        self.wc = ps.cov_weights
        self.Ns = ps.size
        self.n_xi = prob.nx + prob.n_p

    # joint covariance and its factor, per time point
    def _factor(self, S, Sxp):
        K = S.shape[0]
        n, q = self.base_nx, self.n_p
        if q:
            C = np.empty((K, n + q, n + q))
            C[:, :n, :n] = S
            C[:, :n, n:] = Sxp
            C[:, n:, :n] = Sxp.transpose(0, 2, 1)
            C[:, n:, n:] = self.Sp
        else:
            C = S
        if K == 1:
            L, info = dpotrf(C[0], lower=1, clean=1)
            if info == 0:
                return L[None]
        else:
            try:
                return np.linalg.cholesky(C)
            except np.linalg.LinAlgError:
                pass
        # exactly deterministic dimensions decouple; factor with a unit pivot there
        dead = np.diagonal(C, axis1=1, axis2=2) <= 0.0
        if dead.any() and not np.any(C[np.broadcast_to(dead[:, :, None], C.shape)]):
            idx = np.arange(n + q)
            Cm = C.copy()
            Cm[:, idx, idx] += dead
            try:
                return np.linalg.cholesky(Cm) * ~dead[:, :, None]
            except np.linalg.LinAlgError:
                pass
        return np.stack([cholesky_psd(c) for c in C])

    def _points(self, mu, S, Sxp, U):
        K = mu.shape[1]
        n, Ns = self.base_nx, self.Ns
        L = self._factor(S, Sxp)
        DX = L @ self.D                                   # (K, nxi, Ns)
        m = np.concatenate([mu, self._mp(K)])              # (nxi, K)
        Xi = m.T[:, :, None] + DX
        flat = Xi.transpose(1, 0, 2).reshape(self.n_xi, K * Ns)
        return L, DX, flat[:n], np.repeat(U, Ns, axis=1), flat[n:]

    def _eval_f(self, x, u, p):
        F = self.prob.f(x, u, p)
        if self.gp is not None:
            F = F + self._gp_mean(x, u)
        return F

    def f(self, X, U):
        mu, S, Sxp = self.unpack(X)
        K = mu.shape[1]
        n = self.base_nx
        L, DX, x, u, p = self._points(mu, S, Sxp, U)
        F = self._eval_f(x, u, p).reshape(n, K, self.Ns)
        Ef = F @ self.wm
        dF = F - Ef[..., None]
        C = (dF * self.wc).transpose(1, 0, 2) @ DX.transpose(0, 2, 1)
        Cx = C[:, :, :n]
        dS = Cx + Cx.transpose(0, 2, 1) + self.Sw
        if self.gp is not None:
            self._add_gp_var(dS, mu, U)
        return self.pack(Ef, dS, C[:, :, n:].copy())

    def _chain_points(self, L, Xibar, DXbar):
        """Pull point cotangents (K, nxi, Ns) back to (mu, Sigma, Sigma_xp)."""
        n = self.base_nx
        gm = Xibar.sum(axis=2).T[:n]
        Lbar = (Xibar + DXbar) @ self.D.T
        Cbar = _chol_vjp_batch(L, Lbar)
        return gm, Cbar[:, :n, :n], 2.0 * Cbar[:, :n, n:]

    def f_vjp(self, X, U, Lc):
        mu, S, Sxp = self.unpack(X)
        K = mu.shape[1]
        n, Ns = self.base_nx, self.Ns
        Lm, LS, Lxp = self._unpack_cot(Lc)
        L, DX, x, u, p = self._points(mu, S, Sxp, U)
        F = self._eval_f(x, u, p).reshape(n, K, Ns)
        Ef = F @ self.wm
        dF = F - Ef[..., None]
        G = np.concatenate([LS + LS.transpose(0, 2, 1), Lxp], axis=2)   # (K, nx, nxi)
        dFbar = (G @ DX).transpose(1, 0, 2) * self.wc
        DXbar = G.transpose(0, 2, 1) @ (dF * self.wc).transpose(1, 0, 2)
        Efbar = Lm - dFbar.sum(axis=2)
        Fbar = (dFbar + Efbar[..., None] * self.wm).reshape(n, K * Ns)
        gx, gu, gp = self.prob.vjp(x, u, p, Fbar)
        if self.gp is not None:
            J, _ = self._gp_full_jac(x, u)
            gz = np.einsum("iS,izS->zS", Fbar, J)
            gx = gx + gz[:n]
            gu = gu + gz[n:]
        Xibar = np.concatenate([gx, gp]).reshape(self.n_xi, K, Ns).transpose(1, 0, 2)
        gmu, gS, gxp = self._chain_points(L, Xibar, DXbar)
        gU = gu.reshape(self.nu, K, Ns).sum(axis=2)
        if self.gp is not None:
            a, b = self._gp_var_vjp(LS, mu, U)
            gmu = gmu + a
            gU = gU + b
        return self.pack(gmu, gS, gxp), gU

    def _xpoints(self, X, U):
        mu, S, Sxp = self.unpack(X)
        return (mu, S, Sxp) + self._points(mu, S, Sxp, U)

    def l(self, X, U):
        if self.prob.l is None:
            return np.zeros(X.shape[1])
        K = X.shape[1]
        mu, S, Sxp, L, DX, x, u, p = self._xpoints(X, U)
        return self.prob.l(x, u, p).reshape(K, self.Ns) @ self.wm

    def _x_cot_to_state(self, L, gx, K, Sxp):
        Xibar = np.zeros((K, self.n_xi, self.Ns))
        Xibar[:, :self.base_nx] = gx.reshape(self.base_nx, K, self.Ns).transpose(1, 0, 2)
        gmu, gS, gxp = self._chain_points(L, Xibar, np.zeros_like(Xibar))
        return self.pack(gmu, gS, gxp)

    def l_grad(self, X, U):
        if self.prob.l is None:
            return super().l_grad(X, U)
        K = X.shape[1]
        mu, S, Sxp, L, DX, x, u, p = self._xpoints(X, U)
        gx, gu = self.prob.l_grad(x, u, p)[:2]
        w = np.tile(self.wm, K)
        return self._x_cot_to_state(L, gx * w, K, Sxp), (gu * w).reshape(self.nu, K, self.Ns).sum(axis=2)

    def V(self, x):
        if self.prob.V is None:
            return 0.0
        X = x[:, None]
        mu, S, Sxp, L, DX, xs, u, p = self._xpoints(X, np.zeros((self.nu, 1)))
        return float(self.prob.V(xs, p) @ self.wm)

    def V_grad(self, x):
        if self.prob.V is None:
            return np.zeros_like(x)
        X = x[:, None]
        mu, S, Sxp, L, DX, xs, u, p = self._xpoints(X, np.zeros((self.nu, 1)))
        g = self.prob.V_grad(xs, p) * self.wm
        return self._x_cot_to_state(L, g, 1, Sxp)[:, 0]

    def _tight(self, H, z, K):
        m = H.shape[0]
        Hr = H.reshape(m * K, self.Ns)
        mean = Hr @ self.wm
        dev = Hr - mean[:, None]
        var = (dev * dev) @ self.wc
        return (mean + np.repeat(z[:, 0], K) * np.sqrt(np.maximum(var, 0.0))).reshape(m, K)

    def _tight_vjp(self, H, z, K, N):
        m = H.shape[0]
        Hr = H.reshape(m * K, self.Ns)
        mean = Hr @ self.wm
        dev = Hr - mean[:, None]
        var = (dev * dev) @ self.wc
        mbar = N.reshape(-1)
        vbar = _tighten_vjp(var, np.repeat(z[:, 0], K), mbar)
        wdev = dev * self.wc
        g = 2.0 * vbar[:, None] * (wdev - wdev.sum(axis=1, keepdims=True) * self.wm) + mbar[:, None] * self.wm
        return g.reshape(m, K * self.Ns)

    def h(self, X, U):
        if self.prob.h is None:
            return np.zeros((0, X.shape[1]))
        K = X.shape[1]
        _, _, _, L, DX, x, u, p = self._xpoints(X, U)
        return self._tight(self.prob.h(x, u), self.z, K)

    def h_vjp(self, X, U, N):
        if self.prob.h is None:
            return super().h_vjp(X, U, N)
        K = X.shape[1]
        _, _, Sxp, L, DX, x, u, p = self._xpoints(X, U)
        Hbar = self._tight_vjp(self.prob.h(x, u), self.z, K, N)
        Jx, Ju = self.prob.h_jac(x, u)
        gx = np.einsum("jis,js->is", Jx, Hbar)
        gu = np.einsum("jis,js->is", Ju, Hbar)
        return self._x_cot_to_state(L, gx, K, Sxp), gu.reshape(self.nu, K, self.Ns).sum(axis=2)

    def hT(self, x):
        if self.prob.hT is None:
            return np.zeros(0)
        _, _, _, L, DX, xs, u, p = self._xpoints(x[:, None], np.zeros((self.nu, 1)))
        return self._tight(self.prob.hT(xs), self.zT, 1)[:, 0]

    def hT_vjp(self, x, nu):
        if self.prob.hT is None:
            return np.zeros_like(x)
        _, _, Sxp, L, DX, xs, u, p = self._xpoints(x[:, None], np.zeros((self.nu, 1)))
        Hbar = self._tight_vjp(self.prob.hT(xs), self.zT, 1, np.asarray(nu).reshape(-1, 1))
        gx = np.einsum("jis,js->is", self.prob.hT_jac(xs), Hbar)
        return self._x_cot_to_state(L, gx, 1, Sxp)[:, 0]


@lru_cache(maxsize=None)
def _tril_masks(n):
    T = np.tril(np.ones((n, n)))
    H = T.copy()
    H[np.diag_indices(n)] = 0.5
    return T, H


def _chol_vjp_batch(L, Lbar):
    K, n, _ = L.shape
    idx = np.arange(n)
    live = np.abs(np.diagonal(L, axis1=1, axis2=2)) > 0
    if not live.all():
        # zero rows belong to deterministic dimensions, which get zero gradient
        if np.any(L[np.broadcast_to(~live[:, :, None], L.shape)]):
            return np.stack([cholesky_vjp(L[k], Lbar[k]) for k in range(K)])
        L = L.copy()
        L[:, idx, idx] += ~live
        Lbar = Lbar * (live[:, :, None] & live[:, None, :])
    T, H = _tril_masks(n)
    P = (L.transpose(0, 2, 1) @ (Lbar * T)) * H
    if K == 1:
        # G = L^-T P L^-1 by two triangular solves
        B, _ = dtrtrs(L[0], P[0], lower=1, trans=1)
        G, _ = dtrtrs(L[0], B.T, lower=1, trans=1)
        G = G.T[None]
    else:
        Linv = np.linalg.inv(L)
        G = Linv.transpose(0, 2, 1) @ P @ Linv
    G = 0.5 * (G + G.transpose(0, 2, 1))
    if not live.all():
        G *= live[:, :, None] & live[:, None, :]
    return G


def build_mr_sampling(problem: StochasticProblem, method: PropagationMethod,
                      approx: str = chance.GAUSSIAN) -> MRSamplingProblem:
    """Moment-based reformulation with point-based moment estimates."""
    return MRSamplingProblem(problem, method, approx)


SR = "sr"
MR_TAYLOR = "mr-taylor"
MR_SAMPLING = "mr-sampling"
REPRESENTATIONS = (SR, MR_TAYLOR, MR_SAMPLING)


def build(problem: StochasticProblem, representation: str, method: Optional[PropagationMethod] = None,
          approx: str = chance.GAUSSIAN, mode: str = MOMENT_TIGHTENED, rng=None) -> DeterministicProblem:
    """Dispatch to the builder for ``representation``."""
    if representation == SR:
        return build_sr(problem, method, approx, mode, rng)
    if representation == MR_TAYLOR:
        return build_mr_taylor(problem, approx)
    if representation == MR_SAMPLING:
        return build_mr_sampling(problem, method, approx)
    raise ParameterError(f"unknown representation {representation!r}")
