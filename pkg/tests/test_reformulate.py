import warnings
from dataclasses import replace

import numpy as np
import pytest

from smpc import chance, transform as tr
from smpc.bench import problems as bp
from smpc.bench.runners import run, tank_gp
from smpc.bench.scenario import Scenario
from smpc.distributions import JointDistribution
from smpc.errors import MissingDerivativeError, ParameterError, UnsupportedGPError, UnsupportedWienerError
from smpc.gp import SquaredExponential, gp_fit
from smpc.reformulate import (PER_SAMPLE, StochasticProblem, attach_gp, build, build_mr_sampling,
                              build_mr_taylor, build_sr)
from smpc.solver import integrate_forward

import probes


def _linear_problem(sigma_w=None, cov0=None):
    A = np.array([[-1.0, 0.5], [-0.3, -2.0]])
    Bp = np.array([[1.0], [0.2]])

    def f(x, u, p):
        return A @ x + Bp @ p + np.stack([u[0], np.zeros_like(u[0])])

    def dfdx(x, u, p):
        return np.repeat(A[:, :, None], x.shape[1], axis=2)

    def dfdu(x, u, p):
        J = np.zeros((2, 1, x.shape[1]))
        J[0, 0] = 1.0
        return J

    def dfdp(x, u, p):
        return np.repeat(Bp[:, :, None], x.shape[1], axis=2)

    cov0 = np.array([[0.2, 0.05], [0.05, 0.1]]) if cov0 is None else cov0
    return StochasticProblem(
        nx=2, nu=1, f=f, x0=JointDistribution.gaussian([1.0, -0.5], cov0), T=1.0, u_min=-1, u_max=1,
        p=JointDistribution.gaussian([0.3], [[0.04]]), dfdx=dfdx, dfdu=dfdu, dfdp=dfdp, sigma_w=sigma_w)




# ---------------------------------------------------------------- structure


def test_cstr_ut_state_dimension():
    dp = build_sr(probes.cstr(), tr.Unscented())
    assert dp.Ns == 11
    assert dp.nx == 22
    assert dp.x0.shape == (22,)


def test_deterministic_inputs_give_identical_samples():
    prob = probes.pendulum(0.0)
    dp = build_sr(prob, tr.Unscented())
    U = np.linspace(-1, 1, 30)[None]
    _, X = integrate_forward(dp, U)
    Xs = X.reshape(dp.Ns, 4, -1)
    np.testing.assert_array_equal(Xs, np.broadcast_to(Xs[:1], Xs.shape))


def test_zero_uncertainty_reduces_to_nominal():
    prob = probes.pendulum(0.0)
    U = 2.0 * np.sin(np.linspace(0, 3, 25))[None]
    nominal = replace(prob, x0=JointDistribution.gaussian(prob.x0.mean, np.zeros((4, 4))))
    _, Xn = integrate_forward(build_sr(nominal, tr.Unscented()), U)
    Xn = Xn[:4]
    for dp in (build_sr(prob, tr.Unscented()), build_mr_taylor(prob), build_mr_sampling(prob, tr.Unscented())):
        _, X = integrate_forward(dp, U)
        mu, var = dp.moments(X)
        np.testing.assert_allclose(mu, Xn, atol=1e-12)
        np.testing.assert_allclose(var, 0.0, atol=1e-20)
        np.testing.assert_allclose(dp.h(X, U), Xn[0:1] - bp.PEND_X_MAX, atol=1e-12)


@pytest.mark.parametrize("builder", [build_mr_taylor, lambda p: build_mr_sampling(p, tr.Unscented())])
def test_scalar_sde_stationary_variance(builder):
    sigma = 0.3
    prob = StochasticProblem(nx=1, nu=1, f=lambda x, u, p: -x, x0=JointDistribution.gaussian([1.0], [[0.0]]),
                             T=20.0, u_min=0, u_max=0, dfdx=lambda x, u, p: -np.ones((1, 1, x.shape[1])),
                             dfdu=lambda x, u, p: np.zeros((1, 1, x.shape[1])), sigma_w=[[sigma]])
    dp = builder(prob)
    _, X = integrate_forward(dp, np.zeros((1, 401)))
    _, var = dp.moments(X)
    assert var[0, -1] == pytest.approx(sigma ** 2 / 2, rel=1e-8)


def test_linear_sampling_matches_taylor():
    prob = _linear_problem(sigma_w=0.1 * np.eye(2))
    taylor = build_mr_taylor(prob)
    rng = np.random.default_rng(0)
    for method in (tr.Unscented(), tr.Stirling1(), tr.Stirling2()):
        samp = build_mr_sampling(prob, method)
        X = np.repeat(taylor.x0[:, None], 3, axis=1) + 0.01 * rng.standard_normal((taylor.nx, 3))
        X[2:6] = np.repeat(prob.x0.cov.reshape(-1, 1), 3, axis=1)
        U = rng.uniform(-1, 1, (1, 3))
        np.testing.assert_allclose(samp.f(X, U), taylor.f(X, U), atol=1e-8)
    _, Xt = integrate_forward(taylor, np.full((1, 50), 0.4))
    _, Xs = integrate_forward(build_mr_sampling(prob, tr.Unscented()), np.full((1, 50), 0.4))
    np.testing.assert_allclose(Xs, Xt, atol=1e-8)


def test_linear_sr_matches_moment_mean():
    prob = _linear_problem()
    U = np.full((1, 30), -0.2)
    _, Xs = integrate_forward(build_sr(prob, tr.Unscented()), U)
    dp = build_mr_taylor(prob)
    _, Xt = integrate_forward(dp, U)
    mu_sr, var_sr = build_sr(prob, tr.Unscented()).moments(Xs)
    mu_t, var_t = dp.moments(Xt)
    np.testing.assert_allclose(mu_sr, mu_t, atol=1e-10)


def test_prior_gp_adds_constant_variance():
    prob = _linear_problem()
    prior = gp_fit(SquaredExponential(0.7, 1.0), np.zeros((0, 3)), np.zeros((0, 2)), 0.0)
    with_gp = attach_gp(prob, prior)
    rng = np.random.default_rng(1)
    for builder in (build_mr_taylor, lambda p: build_mr_sampling(p, tr.Unscented())):
        a, b = builder(prob), builder(with_gp)
        X = np.repeat(a.x0[:, None], 2, axis=1)
        U = rng.uniform(-1, 1, (1, 2))
        d = b.f(X, U) - a.f(X, U)
        _, dS, dxp = a.unpack(d)
        np.testing.assert_allclose(d[:2], 0.0, atol=1e-14)
        np.testing.assert_allclose(dS, np.broadcast_to(0.7 * np.eye(2), dS.shape), atol=1e-12)
        np.testing.assert_allclose(dxp, 0.0, atol=1e-14)


def test_mr_sampling_point_count_per_call():
    calls = []
    prob = probes.cstr()

    def counting(x, u, p):
        calls.append(x.shape[1])
        return bp.cstr_f(x, u, p)

    dp = build_mr_sampling(replace(prob, f=counting), tr.Unscented())
    dp.f(dp.x0[:, None], np.array([[50.0]]))
    assert calls == [11]


def test_covariance_stays_symmetric():
    prob = probes.cstr()
    for dp in (build_mr_taylor(prob), build_mr_sampling(prob, tr.Unscented())):
        _, X = integrate_forward(dp, np.full((1, 20), 40.0))
        S = X[2:6].T.reshape(-1, 2, 2)
        np.testing.assert_allclose(S, S.transpose(0, 2, 1), atol=1e-15 * np.abs(S).max())


# ---------------------------------------------------------------- errors


def test_sr_rejects_wiener_process():
    with pytest.raises(UnsupportedWienerError):
        build_sr(_linear_problem(sigma_w=0.1 * np.eye(2)), tr.Unscented())


def test_sr_rejects_gp():
    with pytest.raises(UnsupportedGPError):
        build_sr(probes.tank(), tr.Unscented())


def test_sr_rejects_taylor_method():
    with pytest.raises(ParameterError):
        build_sr(_linear_problem(), tr.Taylor())


def test_mr_sampling_needs_sigma_points():
    with pytest.raises(ParameterError):
        build_mr_sampling(_linear_problem(), tr.MonteCarlo(n_points=50))


def test_taylor_needs_jacobians():
    with pytest.raises(MissingDerivativeError):
        build_mr_taylor(replace(_linear_problem(), dfdp=None))


def test_unknown_representation():
    with pytest.raises(ParameterError):
        build(_linear_problem(), "particles", tr.Unscented())


def test_per_sample_monte_carlo_warns():
    with pytest.warns(RuntimeWarning):
        build_sr(probes.cstr(), tr.MonteCarlo(n_points=20, seed=0), mode=PER_SAMPLE)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        build_sr(probes.cstr(), tr.MonteCarlo(n_points=2000, seed=0), mode=PER_SAMPLE)


def test_gp_dimension_mismatch():
    model = tank_gp(5, 1e-3)
    with pytest.raises(ParameterError):
        attach_gp(bp.tank_problem(JointDistribution.gaussian([0.0, 0.1], np.eye(2))), model)


def test_problem_check_reports_shape():
    prob = replace(_linear_problem(), f=lambda x, u, p: x[:1])
    with pytest.raises(ParameterError):
        prob.check()
    assert _linear_problem().check()


# ---------------------------------------------------------------- gradients


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("name", sorted(probes.PROBLEMS))
def test_gradients_match_finite_differences(name):
    fails = probes.builder_gradient_failures(name)
    assert not fails, fails[:5]


# ---------------------------------------------------------------- cautiousness


@pytest.mark.slow
def test_cautiousness_is_monotone_in_approximation():
    peaks = [run(Scenario("cstr", mode="open", approx=a, rollouts=20)).stats["mean_peak"]
             for a in (chance.GAUSSIAN, chance.SYMMETRIC, chance.CHEBYSHEV)]
    assert peaks[0] >= peaks[1] >= peaks[2]
