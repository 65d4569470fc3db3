import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smpc.errors import IndefiniteGramError, ParameterError
from smpc.gp import (LocallyPeriodic, SquaredExponential, gp_fit, gp_grads_batch, gp_mean_jacobian,
                     gp_predict, gp_predict_batch, kernel_eval, load_csv, save_csv)


def tank_outflow(h):
    return -(1.0 / 30.0) * np.sqrt(2 * 9.81 * h)


def test_kernel_examples():
    k = SquaredExponential(1.0, 1.0)
    assert kernel_eval(k, [0.3], [0.3]) == 1.0
    assert kernel_eval(k, [0.0], [1.0]) == pytest.approx(math.exp(-0.5), rel=1e-15)
    k2 = SquaredExponential(2.0, [1.0, 2.0])
    assert kernel_eval(k2, [0, 0], [1, 2]) == pytest.approx(2 * math.exp(-1.0), rel=1e-15)


def test_locally_periodic_form():
    k = LocallyPeriodic(1.5, 0.7, 2.0)
    r = 0.8
    expect = 1.5 * math.exp(-2 * math.sin(math.pi * r / 2.0) ** 2 / 0.49) * math.exp(-r * r / (2 * 0.49))
    assert kernel_eval(k, [0.1], [0.9]) == pytest.approx(expect, rel=1e-14)
    assert kernel_eval(k, [0.4], [0.4]) == 1.5


@pytest.mark.parametrize("bad", [dict(sf2=0.0), dict(ell=-1.0)])
def test_kernel_hyperparameters(bad):
    with pytest.raises(ParameterError):
        SquaredExponential(**{**dict(sf2=1.0, ell=1.0), **bad})


def test_single_point_interpolates():
    m = gp_fit(SquaredExponential(1, 1), [[0.0]], [[3.0]], 0.0)
    mean, var = gp_predict(m, [0.0])
    assert mean[0] == pytest.approx(3.0, abs=1e-12)
    assert var[0] == pytest.approx(0.0, abs=1e-12)


def test_duplicate_inputs_without_noise():
    with pytest.raises(IndefiniteGramError):
        gp_fit(SquaredExponential(1, 1), [[0.5], [0.5]], [[1.0], [1.0]], 0.0)


def test_tank_dataset_fit():
    h = np.linspace(0.0, 1.2, 10)
    rng = np.random.default_rng(0)
    y = tank_outflow(h) + math.sqrt(1e-3) * rng.standard_normal(10)
    m = gp_fit(SquaredExponential(0.01, 0.4), h[:, None], y[:, None], 1e-3)
    mean, _ = gp_predict_batch(m, h[None, :])
    assert np.all(np.abs(mean[0] - y) <= 3 * math.sqrt(1e-3))


def test_far_prediction_reverts_to_prior():
    m = gp_fit(SquaredExponential(2.0, 0.1), [[0.0], [0.2]], [[1.0], [-1.0]], 1e-6)
    mean, var = gp_predict(m, [50.0])
    assert abs(mean[0]) < 1e-12
    assert var[0] == pytest.approx(2.0, rel=1e-12)


def test_two_point_model_matches_hand_solve():
    k = SquaredExponential(1.3, 0.6)
    Z = np.array([[0.1], [0.9]])
    y = np.array([0.4, -0.2])
    noise = 0.05
    m = gp_fit(k, Z, y[:, None], noise)
    z = 0.37
    k11 = 1.3
    k12 = 1.3 * math.exp(-0.5 * (0.8 / 0.6) ** 2)
    K = np.array([[k11 + noise, k12], [k12, k11 + noise]])
    ks = np.array([1.3 * math.exp(-0.5 * ((z - 0.1) / 0.6) ** 2), 1.3 * math.exp(-0.5 * ((z - 0.9) / 0.6) ** 2)])
    mean, var = gp_predict(m, [z])
    assert mean[0] == pytest.approx(ks @ np.linalg.solve(K, y), rel=1e-12)
    assert var[0] == pytest.approx(1.3 - ks @ np.linalg.solve(K, ks), rel=1e-10)


def test_batch_matches_single_and_gradients():
    rng = np.random.default_rng(1)
    Z = rng.uniform(-1, 1, (8, 2))
    Y = np.stack([np.sin(Z[:, 0]) * Z[:, 1], Z[:, 0] ** 2], axis=1)
    m = gp_fit([SquaredExponential(1.0, [0.5, 0.8]), LocallyPeriodic(0.5, 0.9, 1.7)], Z, Y, [1e-4, 1e-3])
    Q = rng.uniform(-1, 1, (2, 5))
    mb, vb = gp_predict_batch(m, Q)
    for s in range(5):
        ms, vs = gp_predict(m, Q[:, s])
        np.testing.assert_allclose(mb[:, s], ms, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(vb[:, s], vs, rtol=1e-10, atol=1e-14)
    Jm, Jv = gp_grads_batch(m, Q)
    eps = 1e-6
    for d in range(2):
        e = np.zeros((2, 1))
        e[d] = eps
        mp, vp = gp_predict_batch(m, Q + e)
        mm, vm = gp_predict_batch(m, Q - e)
        np.testing.assert_allclose(Jm[:, d], (mp - mm) / (2 * eps), rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(Jv[:, d], (vp - vm) / (2 * eps), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(gp_mean_jacobian(m, Q[:, 0]), Jm[:, :, 0], rtol=1e-12, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), noise=st.sampled_from([1e-9, 1e-3, 0.1]))
def test_variance_bounds(seed, noise):
    rng = np.random.default_rng(seed)
    Z = rng.uniform(0, 1.2, (int(rng.integers(1, 15)), 1))
    m = gp_fit(SquaredExponential(0.01, 0.4), Z, tank_outflow(Z), noise)
    Q = np.linspace(-1, 2.5, 50)[None, :]
    _, var = gp_predict_batch(m, Q)
    assert np.all(var >= 0) and np.all(var <= 0.01 + 1e-15)


def test_noise_monotonicity_at_training_inputs():
    h = np.linspace(0, 1.2, 10)[:, None]
    lo = gp_fit(SquaredExponential(0.01, 0.4), h, tank_outflow(h), 1e-9)
    hi = gp_fit(SquaredExponential(0.01, 0.4), h, tank_outflow(h), 1e-3)
    _, v_lo = gp_predict_batch(lo, h.T)
    _, v_hi = gp_predict_batch(hi, h.T)
    assert np.all(v_hi >= v_lo)


def test_permutation_invariance():
    rng = np.random.default_rng(4)
    Z = rng.uniform(0, 1, (12, 1))
    Y = np.sin(4 * Z)
    p = rng.permutation(12)
    a = gp_fit(SquaredExponential(1.0, 0.3), Z, Y, 1e-4)
    b = gp_fit(SquaredExponential(1.0, 0.3), Z[p], Y[p], 1e-4)
    Q = np.linspace(0, 1, 7)[None, :]
    for x, y in zip(gp_predict_batch(a, Q), gp_predict_batch(b, Q)):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_csv_round_trip(tmp_path):
    Z = np.array([[0.0, 1.0], [0.5, -1.0]])
    Y = np.array([[1.5], [2.5]])
    path = tmp_path / "gp.csv"
    save_csv(path, Z, Y)
    assert path.read_text().splitlines()[0] == "z_1,z_2,out_1"
    Z2, Y2 = load_csv(path)
    np.testing.assert_array_equal(Z2, Z)
    np.testing.assert_array_equal(Y2, Y)
