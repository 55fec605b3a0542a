import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphoscale.gp import GPError, Kernel, band, gp_fit, gp_predict, select_hyperparameters


def test_one_point_closed_form():
    fit = gp_fit([0.0], [1.0], Kernel(1.0, 0.6, 0.01))
    mean, var = gp_predict(fit, [0.0])
    assert mean[0] == pytest.approx(1 / 1.01, rel=1e-12)
    # latent variance 1 - 1/1.01, plus the noise of a new observation
    assert var[0] == pytest.approx(1 - 1 / 1.01 + 0.01, rel=1e-9)


def test_duplicate_inputs_without_noise():
    with pytest.raises(GPError):
        gp_fit([0.0, 1.0, 1.0], [1.0, 2.0, 3.0], Kernel(noise_variance=0.0))
    gp_fit([0.0, 1.0, 1.0], [1.0, 2.0, 3.0], Kernel(noise_variance=1e-3))


def test_invalid_inputs():
    with pytest.raises(GPError):
        gp_fit([], [], Kernel())
    with pytest.raises(GPError):
        gp_fit([0.0, 1.0], [1.0], Kernel())
    with pytest.raises(GPError):
        Kernel(signal_variance=0.0)
    with pytest.raises(GPError):
        Kernel(length_scale=-1.0)
    with pytest.raises(GPError):
        Kernel(noise_variance=-1e-3)


def test_reverts_to_prior_far_away():
    kernel = Kernel(1.0, 0.6, 0.01)
    fit = gp_fit([0.0], [1.0], kernel)
    mean, var = gp_predict(fit, [6.0, -6.0])
    assert np.all(np.abs(mean) < 1e-3)
    np.testing.assert_allclose(var, kernel.prior_variance, atol=1e-12)


def test_interpolates_without_noise():
    rng = np.random.default_rng(0)
    X = np.sort(rng.uniform(-3, 3, 8))
    X = X[np.concatenate([[True], np.diff(X) > 0.2])]
    y = np.sin(2 * X)
    fit = gp_fit(X, y, Kernel(1.0, 0.6, 1e-10))
    mean, _ = gp_predict(fit, X)
    np.testing.assert_allclose(mean, y, atol=1e-6)


def test_symmetric_data_symmetric_mean():
    X = np.array([-2.0, -1.0, -0.3, 0.3, 1.0, 2.0])
    y = X**2
    fit = gp_fit(X, y, Kernel(2.0, 0.6, 1e-3))
    grid = np.linspace(0, 3, 13)
    np.testing.assert_allclose(gp_predict(fit, grid)[0], gp_predict(fit, -grid)[0], atol=1e-10)


training_sets = st.lists(st.floats(-4, 4), min_size=1, max_size=10, unique=True)


@settings(max_examples=50, deadline=None)
@given(training_sets, st.floats(-4, 4), st.integers(0, 2**32 - 1))
def test_adding_data_never_increases_variance(xs, extra, seed):
    rng = np.random.default_rng(seed)
    kernel = Kernel(1.0, 0.6, 1e-4)
    X = np.array(xs)
    y = rng.normal(size=X.size)
    grid = np.linspace(-6, 6, 61)
    _, before = gp_predict(gp_fit(X, y, kernel), grid)
    _, after = gp_predict(gp_fit(np.append(X, extra), np.append(y, rng.normal()), kernel), grid)
    assert np.all(after <= before + 1e-9)
    assert np.all(after >= 0) and np.all(before <= kernel.prior_variance + 1e-12)


@settings(max_examples=30, deadline=None)
@given(training_sets, st.integers(0, 2**32 - 1))
def test_permutation_invariance(xs, seed):
    rng = np.random.default_rng(seed)
    kernel = Kernel(1.5, 0.6, 1e-3)
    X = np.array(xs)
    y = rng.normal(size=X.size)
    perm = rng.permutation(X.size)
    grid = np.linspace(-5, 5, 21)
    m1, v1 = gp_predict(gp_fit(X, y, kernel), grid)
    m2, v2 = gp_predict(gp_fit(X[perm], y[perm], kernel), grid)
    np.testing.assert_allclose(m1, m2, atol=1e-8)
    np.testing.assert_allclose(v1, v2, atol=1e-10)


def test_standardized_fit_reverts_to_sample_mean():
    X = np.array([0.0, 0.5, 1.0])
    y = np.array([10.0, 11.0, 12.0])
    fit = gp_fit(X, y, Kernel(1.0, 0.6, 1e-2), standardize=True)
    mean, _ = gp_predict(fit, [50.0])
    assert mean[0] == pytest.approx(11.0, abs=1e-9)


def test_hyperparameter_selection_prefers_noise_for_noisy_data():
    rng = np.random.default_rng(3)
    X = np.linspace(0, 5, 40)
    quiet = np.sin(X)
    noisy = quiet + rng.normal(0, 0.5, X.size)
    k_quiet, _ = select_hyperparameters(X, quiet)
    k_noisy, _ = select_hyperparameters(X, noisy)
    assert k_noisy.noise_variance > k_quiet.noise_variance
    assert k_noisy.length_scale == 0.6


def test_band_columns():
    fit = gp_fit([0.0, 1.0], [0.0, 1.0], Kernel(1.0, 0.6, 0.01))
    rows = band(fit, np.linspace(-1, 2, 5))
    assert rows.shape == (5, 4)
    assert np.all(rows[:, 2] <= rows[:, 1]) and np.all(rows[:, 1] <= rows[:, 3])
