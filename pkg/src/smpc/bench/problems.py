"""Benchmark models: reactor, spring chain, water tank and cart pendulum.

Every model exposes its dynamics in the vectorized convention of
:class:`smpc.reformulate.StochasticProblem` (trailing sample axis), so the
same functions drive the controller's prediction model and the truth plant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..distributions import JointDistribution, Uniform, joint_from_marginals
from ..errors import ParameterError
from ..reformulate import StochasticProblem

# ---------------------------------------------------------------------------
# continuous stirred tank reactor; rates are per hour, time is in seconds

CSTR_RATE = 1.0 / 3600.0
CSTR_P_BOUNDS = ((48.0, 52.0), (95.0, 105.0), (95.0, 105.0))
CSTR_CB_MAX = 0.14
CSTR_ALPHA = 0.9
CSTR_Q = np.array([100.0, 100.0])
CSTR_R = 0.1
CSTR_U_BOUNDS = (10.0, 100.0)


def cstr_params() -> JointDistribution:
    return joint_from_marginals([Uniform(a, b) for a, b in CSTR_P_BOUNDS])


def cstr_f(x, u, p):
    cA, cB = x
    uu = u[0]
    out = np.empty_like(x)
    out[0] = (-p[0] - p[2] * cA - uu) * cA + uu
    out[1] = p[0] * cA - (p[1] + uu) * cB
    out *= CSTR_RATE
    return out


def cstr_dfdx(x, u, p):
    cA, cB = x
    p1, p2, p3 = p
    z = np.zeros_like(cA)
    return np.array([[-p1 - 2.0 * p3 * cA - u[0], z], [p1, -p2 - u[0]]]) * CSTR_RATE


def cstr_dfdu(x, u, p):
    cA, cB = x
    return np.array([[1.0 - cA], [-cB]]) * CSTR_RATE


def cstr_dfdp(x, u, p):
    cA, cB = x
    z = np.zeros_like(cA)
    return np.array([[-cA, z, -cA * cA], [cA, -cB, z]]) * CSTR_RATE


def cstr_vjp(x, u, p, lam):
    cA, cB = x
    uu = u[0]
    p1, p2, p3 = p
    la = lam[0] * CSTR_RATE
    lb = lam[1] * CSTR_RATE
    gx = np.empty_like(x)
    gx[0] = la * (-p1 - 2.0 * p3 * cA - uu) + lb * p1
    gx[1] = -lb * (p2 + uu)
    gu = (la * (1.0 - cA) - lb * cB)[None]
    gp = np.empty_like(p)
    gp[0] = (lb - la) * cA
    gp[1] = -lb * cB
    gp[2] = -la * cA * cA
    return gx, gu, gp


def cstr_steady_state(cb_des=0.125, p=None, guess=(0.4, 50.0), iters=100):
    """Damped Newton for ``f(x, u, p) = 0`` with ``c_B`` fixed; returns ``(x_des, u_des)``."""
    p = np.array([50.0, 100.0, 100.0]) if p is None else np.asarray(p, dtype=float)
    v = np.array(guess, dtype=float)

    def res(v):
        x = np.array([[v[0]], [cb_des]])
        return cstr_f(x, np.array([[v[1]]]), p[:, None])[:, 0] / CSTR_RATE

    for _ in range(iters):
        r = res(v)
        if np.max(np.abs(r)) < 1e-12:
            break
        x = np.array([[v[0]], [cb_des]])
        J = np.column_stack([cstr_dfdx(x, np.array([[v[1]]]), p[:, None])[:, 0, 0],
                             cstr_dfdu(x, np.array([[v[1]]]), p[:, None])[:, 0, 0]]) / CSTR_RATE
        dv = np.linalg.solve(J, -r)
        t = 1.0
        while t > 1e-6 and np.linalg.norm(res(v + t * dv)) >= np.linalg.norm(r):
            t *= 0.5
        v = v + t * dv
    else:
        raise ParameterError("steady-state Newton iteration did not converge")
    return np.array([v[0], cb_des]), np.array([v[1]])


def cstr_problem(x0: JointDistribution, x_des, u_des, T=36.0, params=None) -> StochasticProblem:
    x_des = np.asarray(x_des, dtype=float).reshape(2, 1)
    u_des = np.asarray(u_des, dtype=float).reshape(1, 1)

    def l(x, u, p):
        dx = x - x_des
        du = u - u_des
        return CSTR_Q @ (dx * dx) + CSTR_R * du[0] ** 2

    def l_grad(x, u, p):
        return 2.0 * CSTR_Q[:, None] * (x - x_des), 2.0 * CSTR_R * (u - u_des)

    def h(x, u):
        return x[1:2] - CSTR_CB_MAX

    def h_jac(x, u):
        S = x.shape[1]
        Jx = np.zeros((1, 2, S))
        Jx[0, 1] = 1.0
        return Jx, np.zeros((1, 1, S))

    return StochasticProblem(
        nx=2, nu=1, f=cstr_f, x0=x0, T=T, u_min=CSTR_U_BOUNDS[0], u_max=CSTR_U_BOUNDS[1],
        p=cstr_params() if params is None else params,
        dfdx=cstr_dfdx, dfdu=cstr_dfdu, dfdp=cstr_dfdp, f_vjp=cstr_vjp,
        l=l, l_grad=l_grad, h=h, h_jac=h_jac, alpha=(CSTR_ALPHA,), name="cstr")


# ---------------------------------------------------------------------------
# spring-damper chain: masses 0..n, mass 0 fixed at the origin, mass n is
# velocity-controlled; state = [pos_1..pos_{n-1}, vel_1..vel_{n-1}, pos_n]


@dataclass(frozen=True)
class ChainParams:
    n: int = 2
    mass: float = 0.03
    stiffness: float = 1.0
    rest_length: float = 0.033
    damping: float = 0.1
    gravity: float = 9.81
    wall: float = -0.1
    alpha: float = 0.9

    def __post_init__(self):
        if not 2 <= self.n <= 14:
            raise ParameterError("chain needs 2 <= n <= 14 elements")

    @property
    def nx(self) -> int:
        return 6 * self.n - 3


def _chain_split(x, n):
    S = x.shape[1]
    m = n - 1
    pos = x[:3 * m].reshape(m, 3, S)
    vel = x[3 * m:6 * m].reshape(m, 3, S)
    end = x[6 * m:].reshape(1, 3, S)
    return pos, vel, end


def _chain_links(pos, end):
    S = pos.shape[2]
    allpos = np.concatenate([np.zeros((1, 3, S)), pos, end])
    d = allpos[1:] - allpos[:-1]                  # (n, 3, S)
    r = np.sqrt(np.einsum("ias,ias->is", d, d))
    return d, r


def chain_f(cp: ChainParams):
    n = cp.n

    def f(x, u, p):
        pos, vel, end = _chain_split(x, n)
        d, r = _chain_links(pos, end)
        F = (cp.stiffness * (1.0 - cp.rest_length / r))[:, None, :] * d   # force along link
        acc = (F[1:] - F[:-1]) / cp.mass - (cp.damping / cp.mass) * vel
        acc[:, 2, :] -= cp.gravity
        return np.concatenate([vel.reshape(-1, x.shape[1]), acc.reshape(-1, x.shape[1]), u])

    def vjp(x, u, p, lam):
        S = x.shape[1]
        m = n - 1
        pos, vel, end = _chain_split(x, n)
        d, r = _chain_links(pos, end)
        lp = lam[:3 * m].reshape(m, 3, S)
        la = lam[3 * m:6 * m].reshape(m, 3, S) / cp.mass
        le = lam[6 * m:]
        # F_i = k (1 - L/r_i) d_i; acc_j = F_{j+1} - F_j (scaled)
        Fbar = np.zeros((n, 3, S))
        Fbar[1:] += la
        Fbar[:-1] -= la
        c = cp.stiffness * (1.0 - cp.rest_length / r)
        fd = np.einsum("ias,ias->is", Fbar, d)
        dbar = c[:, None, :] * Fbar + (cp.stiffness * cp.rest_length / r ** 3 * fd)[:, None, :] * d
        # d_i = P_{i+1} - P_i over positions 0..n
        Pbar = np.zeros((n + 1, 3, S))
        Pbar[1:] += dbar
        Pbar[:-1] -= dbar
        gpos = Pbar[1:n]
        gvel = lp - cp.damping * la
        gx = np.concatenate([gpos.reshape(-1, S), gvel.reshape(-1, S), Pbar[n]])
        return gx, le.copy(), np.zeros((0, S))

    return f, vjp


def chain_rest_state(cp: ChainParams, end=None):
    """Straight chain along +x with the free end at ``end`` (default n * rest length), at rest."""
    n = cp.n
    end = np.array([n * cp.rest_length * 1.5, 0.0, 0.0]) if end is None else np.asarray(end, dtype=float)
    pos = np.outer(np.arange(1, n) / n, end)
    return np.concatenate([pos.ravel(), np.zeros(3 * (n - 1)), end])


def chain_equilibrium(cp: ChainParams, end=None, t_end=20.0):
    """Hanging equilibrium reached by integrating the damped dynamics with the end held."""
    from scipy.integrate import solve_ivp

    f, _ = chain_f(cp)
    x0 = chain_rest_state(cp, end)
    sol = solve_ivp(lambda t, x: f(x[:, None], np.zeros((3, 1)), None)[:, 0], (0.0, t_end), x0,
                    method="LSODA", rtol=1e-10, atol=1e-12)
    return sol.y[:, -1]


def chain_problem(cp: ChainParams, x0: JointDistribution, x_ref, T=1.0) -> StochasticProblem:
    n = cp.n
    f, vjp = chain_f(cp)
    x_ref = np.asarray(x_ref, dtype=float).reshape(-1, 1)
    m = n - 1
    W = np.ones((cp.nx, 1))
    W[3 * m:6 * m] = 0.1          # velocities
    W[6 * m:] = 10.0              # end position

    def l(x, u, p):
        dx = x - x_ref
        return np.sum(W * dx * dx, axis=0) + 0.01 * np.sum(u * u, axis=0)

    def l_grad(x, u, p):
        return 2.0 * W * (x - x_ref), 0.02 * u

    # wall: z-coordinate of every intermediate mass stays above cp.wall
    def h(x, u):
        return cp.wall - x[2:3 * m:3]

    def h_jac(x, u):
        S = x.shape[1]
        Jx = np.zeros((m, cp.nx, S))
        Jx[np.arange(m), 3 * np.arange(m) + 2] = -1.0
        return Jx, np.zeros((m, 3, S))

    return StochasticProblem(
        nx=cp.nx, nu=3, f=f, x0=x0, T=T, u_min=-1.0, u_max=1.0, f_vjp=vjp,
        l=l, l_grad=l_grad, h=h, h_jac=h_jac, alpha=(cp.alpha,) * m, name="chain")


def chain_jacobians(cp: ChainParams):
    """Dense Jacobians of the chain dynamics (for moment-based Taylor prediction)."""
    f, vjp = chain_f(cp)
    nx = cp.nx

    def dfdx(x, u, p):
        S = x.shape[1]
        J = np.empty((nx, nx, S))
        for i in range(nx):
            lam = np.zeros((nx, S))
            lam[i] = 1.0
            J[i] = vjp(x, u, p, lam)[0]
        return J

    def dfdu(x, u, p):
        S = x.shape[1]
        J = np.zeros((nx, 3, S))
        J[nx - 3:, :, :] = np.eye(3)[:, :, None]
        return J

    return dfdx, dfdu


# ---------------------------------------------------------------------------
# water tank with Torricelli outflow; state [q, h]

TANK_A = 1.0
TANK_DRAIN = 1.0 / 30.0
TANK_G = 9.81
TANK_H_MAX = 1.0
TANK_ALPHA = 0.95
TANK_U_BOUNDS = (0.0, 0.2)


def tank_outflow(h):
    return -(TANK_DRAIN / TANK_A) * np.sqrt(2.0 * TANK_G * np.maximum(h, 0.0))


def tank_f_true(x, u, p=None):
    return np.stack([u[0], x[0] / TANK_A + tank_outflow(x[1])])


def tank_f_known(x, u, p=None):
    return np.stack([u[0], x[0] / TANK_A])


def tank_problem(x0: JointDistribution, T=1.5, q_max=None) -> StochasticProblem:
    """Controller model without the outflow term; attach a GP for ``g(h)``.

    The inflow can only grow, so a level below ``h_max`` is sustainable only
    if the inflow stays below the outflow at ``h_max``.  ``q_max`` adds that
    bound as a terminal chance constraint on ``q``.
    """

    def dfdx(x, u, p):
        S = x.shape[1]
        J = np.zeros((2, 2, S))
        J[1, 0] = 1.0 / TANK_A
        return J

    def dfdu(x, u, p):
        S = x.shape[1]
        J = np.zeros((2, 1, S))
        J[0, 0] = 1.0
        return J

    def vjp(x, u, p, lam):
        return np.stack([lam[1] / TANK_A, np.zeros_like(lam[0])]), lam[0:1].copy(), np.zeros((0, x.shape[1]))

    def l(x, u, p):
        return (x[1] - 1.0) ** 2 + u[0] ** 2

    def l_grad(x, u, p):
        return np.stack([np.zeros_like(x[0]), 2.0 * (x[1] - 1.0)]), 2.0 * u

    def h(x, u):
        return x[1:2] - TANK_H_MAX

    def h_jac(x, u):
        S = x.shape[1]
        Jx = np.zeros((1, 2, S))
        Jx[0, 1] = 1.0
        return Jx, np.zeros((1, 1, S))

    terminal = {}
    if q_max is not None:
        def hT(x):
            return x[0:1] / TANK_A - q_max

        def hT_jac(x):
            J = np.zeros((1, 2, x.shape[1]))
            J[0, 0] = 1.0 / TANK_A
            return J

        terminal = dict(hT=hT, hT_jac=hT_jac, alphaT=(TANK_ALPHA,))

    return StochasticProblem(
        nx=2, nu=1, f=tank_f_known, x0=x0, T=T, u_min=TANK_U_BOUNDS[0], u_max=TANK_U_BOUNDS[1],
        dfdx=dfdx, dfdu=dfdu, f_vjp=vjp, l=l, l_grad=l_grad, h=h, h_jac=h_jac,
        alpha=(TANK_ALPHA,), name="watertank", **terminal)


# ---------------------------------------------------------------------------
# cart with pendulum; state [x_c, v_c, alpha, omega], input cart acceleration

PEND_D = 2.4e-3
PEND_L = 0.356
PEND_M = 0.127
PEND_J = 1.198e-3
PEND_G = 9.81
PEND_X_MAX = 0.65
PEND_ALPHA = 0.95
PEND_U_BOUNDS = (-5.0, 5.0)
_PEND_DEN = 0.25 * PEND_M * PEND_L ** 2 + PEND_J
_PEND_KU = 0.5 * PEND_L * PEND_M / _PEND_DEN
_PEND_KG = 0.5 * PEND_L * PEND_M * PEND_G / _PEND_DEN
_PEND_KD = PEND_D / _PEND_DEN


def pend_f(x, u, p=None):
    a, w = x[2], x[3]
    out = np.empty_like(x)
    out[0] = x[1]
    out[1] = u[0]
    out[2] = w
    out[3] = -_PEND_KD * w - _PEND_KU * u[0] * np.cos(a) - _PEND_KG * np.sin(a)
    return out


def pend_vjp(x, u, p, lam):
    a = x[2]
    l3 = lam[3]
    gx = np.empty_like(lam)
    gx[0] = 0.0
    gx[1] = lam[0]
    gx[2] = l3 * (_PEND_KU * u[0] * np.sin(a) - _PEND_KG * np.cos(a))
    gx[3] = lam[2] - _PEND_KD * l3
    gu = (lam[1] - _PEND_KU * np.cos(a) * l3)[None]
    return gx, gu, np.zeros((0, x.shape[1]))


def pend_dfdx(x, u, p=None):
    a = x[2]
    S = x.shape[1]
    J = np.zeros((4, 4, S))
    J[0, 1] = 1.0
    J[2, 3] = 1.0
    J[3, 2] = _PEND_KU * u[0] * np.sin(a) - _PEND_KG * np.cos(a)
    J[3, 3] = -_PEND_KD
    return J


def pend_dfdu(x, u, p=None):
    S = x.shape[1]
    J = np.zeros((4, 1, S))
    J[1, 0] = 1.0
    J[3, 0] = -_PEND_KU * np.cos(x[2])
    return J


def pend_linearization():
    """Continuous-time ``(A, B)`` at the origin with zero input."""
    x = np.zeros((4, 1))
    u = np.zeros((1, 1))
    return pend_dfdx(x, u)[:, :, 0], pend_dfdu(x, u)[:, :, 0]


def pend_problem(x0: JointDistribution, x_des, T=0.7) -> StochasticProblem:
    W = np.array([100.0, 1.0, 1.0, 1.0])[:, None]
    ref = np.array([x_des, 0.0, 0.0, 0.0])[:, None]

    def l(x, u, p):
        d = x - ref
        return np.sum(W * d * d, axis=0) + 1e-9 * u[0] ** 2

    def l_grad(x, u, p):
        return 2.0 * W * (x - ref), 2e-9 * u

    def h(x, u):
        return x[0:1] - PEND_X_MAX

    def h_jac(x, u):
        S = x.shape[1]
        Jx = np.zeros((1, 4, S))
        Jx[0, 0] = 1.0
        return Jx, np.zeros((1, 1, S))

    return StochasticProblem(
        nx=4, nu=1, f=pend_f, x0=x0, T=T, u_min=PEND_U_BOUNDS[0], u_max=PEND_U_BOUNDS[1],
        dfdx=pend_dfdx, dfdu=pend_dfdu, f_vjp=pend_vjp, l=l, l_grad=l_grad, h=h, h_jac=h_jac,
        alpha=(PEND_ALPHA,), name="pendulum")
