import csv
import json
import math

import numpy as np
import pytest
from scipy.linalg import expm, solve_discrete_lyapunov

from smpc.bench import problems as bp
from smpc.bench.kalman import KalmanFilter, discretize, kf_predict, kf_update
from smpc.bench.plant import TruthPlant, rollout_rngs
from smpc.bench.runners import (chain_memory_estimate, chain_setup, cstr_timing_table, run, tank_gp,
                                 tank_inflow_limit)
from smpc.bench.scenario import Scenario, TrajectoryLog, make_method, mean_step_time, write_outputs
from smpc.errors import ConfigurationError, FilterError, ParameterError

A2 = np.array([[0.0, 1.0], [-2.0, -0.5]])
B2 = np.array([[0.0], [1.0]])


# ---------------------------------------------------------------- problems


def test_cstr_steady_state_is_stationary():
    x, u = bp.cstr_steady_state(0.125)
    assert x[1] == 0.125
    r = bp.cstr_f(x[:, None], u[:, None], np.array([[50.0], [100.0], [100.0]]))
    np.testing.assert_allclose(r, 0.0, atol=1e-15)
    assert 10.0 <= u[0] <= 100.0


def test_cstr_vjp_matches_jacobians():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.1, 1, (2, 4))
    u = rng.uniform(10, 100, (1, 4))
    p = rng.uniform(48, 105, (3, 4))
    lam = rng.standard_normal((2, 4))
    gx, gu, gp = bp.cstr_vjp(x, u, p, lam)
    np.testing.assert_allclose(gx, np.einsum("ijs,is->js", bp.cstr_dfdx(x, u, p), lam), rtol=1e-13)
    np.testing.assert_allclose(gu, np.einsum("ijs,is->js", bp.cstr_dfdu(x, u, p), lam), rtol=1e-13)
    np.testing.assert_allclose(gp, np.einsum("ijs,is->js", bp.cstr_dfdp(x, u, p), lam), rtol=1e-13)


@pytest.mark.parametrize("n", [2, 3, 8, 14])
def test_chain_state_count(n):
    cp = bp.ChainParams(n=n)
    assert cp.nx == 6 * n - 3
    f, _ = bp.chain_f(cp)
    assert f(np.zeros((cp.nx, 2)) + bp.chain_rest_state(cp)[:, None], np.zeros((3, 2)), None).shape == (cp.nx, 2)


def test_chain_size_limits():
    for n in (1, 15):
        with pytest.raises(ParameterError):
            bp.ChainParams(n=n)


def test_chain_vjp_matches_finite_differences():
    cp = bp.ChainParams(n=3)
    f, vjp = bp.chain_f(cp)
    rng = np.random.default_rng(1)
    x = bp.chain_rest_state(cp)[:, None] + 0.01 * rng.standard_normal((cp.nx, 1))
    u = rng.standard_normal((3, 1))
    lam = rng.standard_normal((cp.nx, 1))
    gx, gu, _ = vjp(x, u, None, lam)
    d = rng.standard_normal((cp.nx, 1))
    fd = np.sum(lam * (f(x + 1e-6 * d, u, None) - f(x - 1e-6 * d, u, None))) / 2e-6
    assert np.sum(gx * d) == pytest.approx(fd, rel=1e-6)
    np.testing.assert_array_equal(gu[:, 0], lam[-3:, 0])


def test_chain_equilibrium_is_at_rest():
    cp, x_ref, _ = chain_setup(3)
    f, _ = bp.chain_f(cp)
    assert np.max(np.abs(f(x_ref[:, None], np.zeros((3, 1)), None))) < 1e-6
    m = cp.n - 1
    assert np.min(x_ref[2:3 * m:3]) > cp.wall


def test_pendulum_jacobians_match_vjp():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (4, 3))
    u = rng.uniform(-5, 5, (1, 3))
    lam = rng.standard_normal((4, 3))
    gx, gu, _ = bp.pend_vjp(x, u, None, lam)
    np.testing.assert_allclose(gx, np.einsum("ijs,is->js", bp.pend_dfdx(x, u), lam), rtol=1e-13)
    np.testing.assert_allclose(gu, np.einsum("ijs,is->js", bp.pend_dfdu(x, u), lam), rtol=1e-13)
    A, B = bp.pend_linearization()
    assert A[3, 2] < 0 and B[3, 0] < 0


def test_tank_gp_and_inflow_limit():
    model = tank_gp(10, 1e-3)
    assert model.n_data == 10
    q = tank_inflow_limit(model)
    assert 0.0 < q < -bp.tank_outflow(bp.TANK_H_MAX)


# ---------------------------------------------------------------- plant


def test_plant_needs_ten_substeps():
    with pytest.raises(ParameterError):
        TruthPlant(bp.pend_f, 4, substeps=9)


def test_noiseless_plant_is_euler_with_hold():
    plant = TruthPlant(lambda x, u, p: -x + u, 1, substeps=1000)
    X = plant.step(np.array([[1.0]]), [0.0], [0.0], 1.0)
    assert X[0, 0] == pytest.approx(math.exp(-1.0), abs=1e-3)


def test_noisy_plant_requires_generators():
    plant = TruthPlant(lambda x, u, p: -x, 1, sigma_w=[[0.1]])
    with pytest.raises(ParameterError):
        plant.step(np.zeros((1, 2)), [0.0], [0.0], 0.1)


def test_rollouts_are_independent_of_batch_size():
    plant = TruthPlant(lambda x, u, p: -x, 2, sigma_w=0.1 * np.eye(2))
    a = plant.step(np.zeros((2, 3)), [0.0], [0.0], 0.1, rngs=rollout_rngs(5, 3))
    b = plant.step(np.zeros((2, 1)), [0.0], [0.0], 0.1, rngs=rollout_rngs(5, 1))
    np.testing.assert_array_equal(a[:, :1], b)
    c = plant.step(np.zeros((2, 3)), [0.0], [0.0], 0.1, rngs=rollout_rngs(5, 3))
    np.testing.assert_array_equal(a, c)


def test_plant_stationary_variance():
    plant = TruthPlant(lambda x, u, p: -x, 1, sigma_w=[[1.0]], substeps=20)
    rngs = rollout_rngs(0, 4000)
    X = np.zeros((1, 4000))
    for _ in range(40):
        X = plant.step(X, [0.0], [0.0], 0.25, rngs=rngs)
    assert X.var() == pytest.approx(0.5, rel=0.1)


# ---------------------------------------------------------------- Kalman filter


def test_discretize_matches_matrix_exponential():
    Ad, Bd, cd, Qd = discretize(A2, B2, np.eye(2), 0.1)
    np.testing.assert_allclose(Ad, expm(0.1 * A2), rtol=1e-12)
    ts = np.linspace(0, 0.1, 2001)
    Bq = np.trapezoid([expm(t * A2) @ B2 for t in ts], ts, axis=0)
    np.testing.assert_allclose(Bd, Bq, rtol=1e-6)
    Qq = np.trapezoid([expm(t * A2) @ expm(t * A2).T for t in ts], ts, axis=0)
    np.testing.assert_allclose(Qd, Qq, rtol=1e-6)
    np.testing.assert_array_equal(cd, 0.0)


def test_predict_converges_to_lyapunov_fixed_point():
    kf = KalmanFilter(A2, B2, [[1.0, 0.0]], 0.1 * np.eye(2), [[1.0]], 0.1, np.zeros(2), np.eye(2))
    for _ in range(2000):
        kf_predict(kf, [0.0])
    np.testing.assert_allclose(kf.cov, solve_discrete_lyapunov(kf.Ad, kf.Qd), rtol=1e-8)


def test_infinite_measurement_noise_leaves_state_unchanged():
    kf = KalmanFilter(A2, B2, [[1.0, 0.0]], np.eye(2), [[np.inf]], 0.1, np.array([0.3, -0.1]), np.eye(2))
    mean, cov = kf_update(kf, [5.0])
    np.testing.assert_array_equal(mean, [0.3, -0.1])
    np.testing.assert_array_equal(cov, np.eye(2))


def test_noiseless_filter_tracks_truth():
    kf = KalmanFilter(A2, B2, np.eye(2), np.zeros((2, 2)), 1e-12 * np.eye(2), 0.1, np.zeros(2), np.eye(2))
    x = np.array([1.0, 0.0])
    for k in range(50):
        u = np.array([np.sin(0.3 * k)])
        kf.update(x)
        kf.predict(u)
        x = kf.Ad @ x + kf.Bd @ u
    assert np.max(np.abs(kf.mean - x)) < 1e-9
    assert np.max(np.abs(kf.cov)) < 1e-10


def test_update_keeps_covariance_symmetric_psd():
    rng = np.random.default_rng(3)
    B = rng.standard_normal((2, 2))
    kf = KalmanFilter(A2, B2, [[1.0, 0.3]], np.eye(2), [[0.2]], 0.1, np.zeros(2), B @ B.T + np.eye(2))
    for _ in range(20):
        kf.update(rng.standard_normal(1))
        kf.predict(rng.standard_normal(1))
        np.testing.assert_array_equal(kf.cov, kf.cov.T)
        assert np.min(np.linalg.eigvalsh(kf.cov)) >= 0


def test_singular_innovation_raises():
    kf = KalmanFilter(A2, B2, [[1.0, 0.0]], np.eye(2), [[0.0]], 0.1, np.zeros(2), np.zeros((2, 2)))
    with pytest.raises(FilterError):
        kf.update([1.0])


def test_filter_shape_check():
    with pytest.raises(ParameterError):
        KalmanFilter(A2, B2, [[1.0, 0.0, 0.0]], np.eye(2), [[1.0]], 0.1, np.zeros(2), np.eye(2))


# ---------------------------------------------------------------- scenario


def test_scenario_defaults_and_method_by_representation():
    s = Scenario("cstr").resolved()
    assert (s.dt, s.T, s.n_grid, s.outer, s.inner) == (1.0, 36.0, 20, 2, 2)
    assert s.method == "ut"
    assert Scenario("cstr", representation="mr-taylor").resolved().method == "taylor"
    assert Scenario("watertank").resolved().representation == "mr-sampling"


@pytest.mark.parametrize("bad", [
    dict(problem="rocket"), dict(problem="cstr", duration=10.5), dict(problem="cstr", method="mc",
                                                                      representation="mr-sampling"),
    dict(problem="cstr", representation="sr", method="taylor"), dict(problem="chain", chain_n=15),
    dict(problem="watertank", gp_points=0), dict(problem="cstr", approx="laplace"),
    dict(problem="chain", mode="open"), dict(problem="cstr", rollouts=0), dict(problem="cstr", seed=-1)])
def test_invalid_scenarios(bad):
    with pytest.raises(ConfigurationError):
        Scenario(**bad).resolved()


def test_unknown_scenario_key():
    with pytest.raises(ConfigurationError):
        Scenario.from_dict({"problem": "cstr", "horizon": 3})
    with pytest.raises(ConfigurationError):
        Scenario.from_dict({"seed": 1})


def test_make_method_names():
    assert make_method("mc", n_points=50, seed=3).n_points == 50
    with pytest.raises(ConfigurationError):
        make_method("sobol")


def test_mean_step_time_discards_warmup():
    assert mean_step_time([10 ** 9] * 5 + [2 * 10 ** 9] * 3) == pytest.approx(2.0)


def test_chain_quadrature_skipped_over_budget():
    s = Scenario("chain", chain_n=4, representation="sr", method="quad").resolved()
    assert chain_memory_estimate(s) > 2 ** 31
    log = run(s)
    assert log.stats["skipped"] and "GiB" in log.stats["reason"]


# ---------------------------------------------------------------- outputs


def test_write_outputs_layout(tmp_path):
    log = TrajectoryLog(np.array([0.0, 0.1]), np.array([[1.0, 2.0]]), np.array([[0.1, 1 / 3], [0.0, 0.5]]),
                        np.zeros((2, 2)), np.array([[-0.1, -0.2]]), np.array([0.0, 1.0]),
                        np.zeros((1, 2, 2)), [100, 200], dict(seed=1, x=np.float64(0.5)), {})
    write_outputs(log, tmp_path)
    rows = list(csv.reader(open(tmp_path / "trajectory.csv")))
    assert rows[0] == ["t", "u_1", "mu_x_1", "mu_x_2", "var_x_1", "var_x_2", "htilde_1"]
    assert rows[2][2] == "0.33333333333333331"
    assert float(rows[2][2]) == 1 / 3
    assert list(csv.reader(open(tmp_path / "timing.csv"))) == [["step", "wall_ns"], ["0", "100"], ["1", "200"]]
    assert json.load(open(tmp_path / "meta.json")) == {"seed": 1, "x": 0.5}
    assert open(tmp_path / "rollouts.csv").readline().strip() == "rollout,t,x_1,x_2"


@pytest.mark.parametrize("scenario", [dict(problem="cstr", duration=4.0, rollouts=2, noise_var=1e-6),
                                      dict(problem="chain", duration=0.4),
                                      dict(problem="pendulum", duration=0.02)])
def test_full_run_determinism(tmp_path, scenario):
    for d in ("a", "b"):
        write_outputs(run(Scenario(**scenario)), tmp_path / d)
    for name in ("trajectory.csv", "rollouts.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # wall-clock statistics are the only meta entries allowed to differ
    metas = [json.load(open(tmp_path / d / "meta.json")) for d in ("a", "b")]
    for m in metas:
        m["statistics"] = {k: v for k, v in m["statistics"].items() if not k.endswith("_s")}
    assert metas[0] == metas[1]


def test_noiseless_pendulum_matches_nominal():
    a = run(Scenario("pendulum", duration=0.02, noise_var=0.0))
    b = run(Scenario("pendulum", duration=0.02, noise_var=0.0, seed=7))
    np.testing.assert_array_equal(a.rollouts, b.rollouts)
    np.testing.assert_array_equal(a.var, 0.0)


# ---------------------------------------------------------------- closed-loop properties


@pytest.mark.slow
def test_cstr_closed_loop_chance_validation():
    log = run(Scenario("cstr", approx="gaussian", rollouts=1000, seed=11))
    alpha = bp.CSTR_ALPHA
    limit = (1 - alpha) + 2 * math.sqrt(alpha * (1 - alpha) / 1000)
    assert log.stats["violation_fraction"] <= limit, (log.stats["violation_fraction"], limit)


@pytest.mark.slow
def test_cstr_timing_ordering():
    rows = cstr_timing_table(Scenario("cstr"), repeats=3)
    t = {(r["representation"], r["method"]): r["mean_step_s"] for r in rows}
    ut = t["sr", "ut"]
    for meth in ("stirling1", "stirling2"):
        assert ut / 1.5 < t["sr", meth] < 1.5 * ut, t
    assert max(ut, t["sr", "stirling1"], t["sr", "stirling2"]) < t["mr-taylor", "taylor"] < t["mr-sampling", "ut"], t
    assert t["sr", "quad"] > 5 * ut, t
    assert t["sr", "pce"] > 5 * ut, t
