import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from metrosynth import autodiff as ad
from metrosynth import models


def test_nv_likelihood_examples():
    assert models.nv_likelihood(1, 0.0, 0.4) == 1.0
    np.testing.assert_allclose(models.nv_likelihood(1, np.pi / 0.5, 0.5), 0.0, atol=1e-16)
    np.testing.assert_allclose(models.nv_likelihood(1, 1.0, 1.0, 2.0), 0.5 + 0.5 * np.exp(-0.5) * np.cos(1.0))
    np.testing.assert_allclose(models.nv_likelihood(1, 1.0, 1.0, 2.0), 0.6639, atol=5e-5)


def test_nv_likelihood_outcomes_sum_to_one():
    rng = np.random.default_rng(0)
    tau, omega = rng.uniform(0, 50, 200), rng.uniform(0, 1, 200)
    for T2 in (math.inf, 3.0):
        total = models.nv_likelihood(1, tau, omega, T2) + models.nv_likelihood(-1, tau, omega, T2)
        np.testing.assert_allclose(total, 1.0, rtol=0, atol=1e-15)


def test_nv_likelihood_node_matches_array():
    tau = ad.variable(np.array([[1.3], [4.0]]))
    node = models.nv_likelihood(-1, tau, np.array([[0.2, 0.7]]), 5.0)
    np.testing.assert_allclose(node.value, models.nv_likelihood(-1, tau.value, np.array([[0.2, 0.7]]), 5.0))


def test_nv_score_matches_finite_differences():
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(50):
        y, tau, omega = rng.choice([-1, 1]), rng.uniform(0.1, 20), rng.uniform(0.05, 0.95)
        T2 = rng.choice([math.inf, rng.uniform(1, 30)])
        fd = (np.log(models.nv_likelihood(y, tau, omega + h, T2)) - np.log(models.nv_likelihood(y, tau, omega - h, T2))) / (2 * h)
        np.testing.assert_allclose(models.nv_score(y, tau, omega, T2), fd, rtol=1e-7, atol=1e-9)


def test_nv_score_examples():
    tau = 3.0
    omega = np.pi / (2 * tau)
    assert abs(models.nv_dp_domega(1, tau, omega)) == pytest.approx(tau / 2)
    assert abs(models.nv_score(1, 1e-4, 0.3)) < 1e-8
    with pytest.raises(ValueError):
        models.nv_score(1, 0.0, 0.3)


def test_nv_expected_squared_score_is_tau_squared():
    for tau, omega in [(0.7, 0.3), (5.0, 0.81), (13.0, 0.17)]:
        e = sum(models.nv_likelihood(y, tau, omega) * models.nv_score(y, tau, omega) ** 2 for y in (-1, 1))
        np.testing.assert_allclose(e, tau**2, rtol=1e-10)


def test_nv_model_defaults():
    m = models.NvDcModel()
    np.testing.assert_allclose(m.control_bounds, [(1.0, 10_000.0)])
    np.testing.assert_allclose(models.NvDcModel(T2=5.0).control_bounds, [(0.05, 500.0)])
    x = m.sample_prior(1000, np.random.default_rng(0))
    assert x.shape == (1000, 1) and x.min() > 0 and x.max() < 1
    np.testing.assert_array_equal(models.NvDcModel(resource_mode="time").resource(np.array([[2.5], [1.0]])), [2.5, 1.0])
    np.testing.assert_array_equal(m.resource(np.array([[2.5], [1.0]])), [1.0, 1.0])


def test_beam_splitter_examples():
    m, r = models.beam_splitter(0.8, 0.5, 0.0)
    assert m == 0.5 and r == 0.8
    np.testing.assert_allclose(models.poisson_mass(0, 1.0), np.exp(-1.0))
    # +alpha signal nulled by the reference at 3pi/4
    m, _ = models.beam_splitter(0.6, 0.6, 3 * np.pi / 4)
    np.testing.assert_allclose(m, 0.0, atol=1e-15)
    y, _, p = models.dolinar_step(0.6, 0.6, 3 * np.pi / 4, np.random.default_rng(0))
    assert y == 0 and p == pytest.approx(1.0)


def test_beam_splitter_conserves_energy():
    rng = np.random.default_rng(2)
    r, a, t = rng.normal(size=100), rng.uniform(0.05, 1.5, 100), rng.uniform(0, np.pi, 100)
    m, rp = models.beam_splitter(r, a, t)
    np.testing.assert_allclose(m**2 + rp**2, r**2 + a**2, rtol=1e-14)


def test_poisson_mass_sums_to_one():
    for mean in (0.0, 0.01, 1.0, 4.5, 9.0):
        ys = np.arange(models.poisson_truncation(mean) + 1)
        assert abs(models.poisson_mass(ys, mean).sum() - 1.0) < 1e-12


def test_dolinar_step_rejects_non_finite():
    with pytest.raises(ValueError):
        models.dolinar_step(np.nan, 0.5, 1.0, np.random.default_rng(0))


def test_dolinar_model_state_tracks_residual():
    m = models.DolinarModel()
    theta = [ad.constant(np.array([[1.0, -1.0]])), ad.constant(np.array([[0.7, 0.7]]))]
    state = m.initial_state(theta)
    np.testing.assert_allclose(state.value, [[0.7, -0.7]])
    control = ad.constant(np.array([[3 * np.pi / 4]]))
    lik0 = m.likelihood(np.array([0.0]), control, theta, state, 0)
    np.testing.assert_allclose(lik0.value[0, 0], 1.0)
    assert lik0.value[0, 1] == pytest.approx(np.exp(-2 * 0.49))
    state = m.advance(state, control, theta, 0)
    _, expected = models.beam_splitter(np.array([0.7, -0.7]), 0.7, 3 * np.pi / 4)
    np.testing.assert_allclose(state.value[0], expected)
    # last stage counts the residual itself
    final = m.likelihood(np.array([0.0]), control, theta, state, m.n)
    np.testing.assert_allclose(final.value[0], np.exp(-(expected**2)))


def test_dolinar_prior():
    x = models.DolinarModel().sample_prior(4000, np.random.default_rng(3))
    assert set(np.unique(x[:, 0])) == {-1.0, 1.0}
    assert x[:, 1].min() >= 0.05 and x[:, 1].max() <= 1.5
    assert abs(np.mean(x[:, 0] > 0) - 0.5) < 0.03


def test_bound_examples():
    inf_meas = models.BoundSpec("measurements")
    np.testing.assert_allclose(models.dc_lower_bound(inf_meas, 20), 2.0**-42 / 3, rtol=1e-15)
    np.testing.assert_allclose(models.dc_lower_bound(inf_meas, 20), 7.58e-14, rtol=1e-3)
    np.testing.assert_allclose(models.dc_lower_bound(models.BoundSpec("time"), 10.0), 1 / 112, rtol=1e-15)
    with pytest.raises(ValueError):
        models.dc_lower_bound(inf_meas, 0)
    with pytest.raises(ValueError):
        models.BoundSpec("energy")


def test_decoherence_constant():
    res = minimize_scalar(lambda x: -models.decoherence_factor(x), bounds=(1e-3, 3.0), method="bounded", options={"xatol": 1e-10})
    assert abs(-res.fun - 0.1619) < 1e-3
    assert models.MU_DECOHERENCE == 0.1619


def test_build_model():
    assert isinstance(models.build_model({"name": "nv", "T2": "inf"}), models.NvDcModel)
    assert models.build_model({"name": "dolinar", "n": 3}).natural_steps == 4
    with pytest.raises(ValueError, match="model.name"):
        models.build_model({"name": "cavity"})
