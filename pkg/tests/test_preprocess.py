import numpy as np
import pytest

from emg_iae.preprocess import (
    FilterConfigError,
    ShapeError,
    bandpass_filter,
    butterworth_sos,
    double_differences,
    minmax_scale,
    preprocess,
)
from emg_iae.synth import rng_stream

FS = 5000.0


def test_double_difference_small_examples():
    np.testing.assert_array_equal(double_differences(np.array([[1.0], [2.0], [4.0]])), [[1.0]])
    # an affine profile across electrodes has no second difference
    psi = 3.0 + 0.5 * np.arange(10)[:, None] * np.ones((1, 7))
    assert np.abs(double_differences(psi)).max() < 1e-14
    assert double_differences(np.zeros((40, 195))).shape == (38, 195)


def test_double_difference_shape_errors():
    with pytest.raises(ShapeError):
        double_differences(np.zeros((2, 10)))
    with pytest.raises(ShapeError):
        double_differences(np.zeros(10))


def _steady_gain(freq, n=20000):
    t = np.arange(n) / FS
    x = np.sin(2 * np.pi * freq * t)
    y = bandpass_filter(x[None, :], FS)[0]
    mid = slice(n // 4, 3 * n // 4)
    return np.sqrt(np.mean(y[mid] ** 2) / np.mean(x[mid] ** 2))


def test_filter_passband_and_stopbands():
    dc = bandpass_filter(np.ones((1, 4000)), FS)[0]
    assert np.abs(dc[1000:3000]).max() < 1e-3
    assert 0.95 <= _steady_gain(50.0) <= 1.05
    assert _steady_gain(2000.0) < 0.01


def test_filter_rejects_band_above_nyquist():
    with pytest.raises(FilterConfigError):
        butterworth_sos(600.0)
    with pytest.raises(FilterConfigError):
        bandpass_filter(np.zeros((2, 100)), 800.0)


def test_filter_is_zero_phase():
    n = 400
    t = np.arange(n)
    pulse = np.exp(-0.5 * ((t - 200) / 6.0) ** 2)
    y = bandpass_filter(pulse[None, :], FS)[0]
    # centre of mass of the response lines up with the pulse
    k = np.argmax(y)
    assert abs(k - 200) < 1


def test_minmax_examples():
    out = minmax_scale(np.array([[2.0, 4.0, 6.0], [7.0, 7.0, 7.0]]))
    np.testing.assert_allclose(out.matrix[0], [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(out.matrix[1], [0.5, 0.5, 0.5])
    np.testing.assert_array_equal(out.channel_min, [2.0, 7.0])
    np.testing.assert_array_equal(out.channel_max, [6.0, 7.0])


def test_minmax_range_idempotence_and_affine_invariance(rng):
    x = rng.standard_normal((6, 50))
    m = minmax_scale(x).matrix
    assert np.all(m.min(axis=1) == 0.0) and np.all(m.max(axis=1) == 1.0)
    np.testing.assert_allclose(minmax_scale(m).matrix, m, atol=1e-15)
    np.testing.assert_allclose(minmax_scale(2.5 * x - 4.0).matrix, m, atol=1e-12)


def test_filter_linear(rng):
    a = rng.standard_normal((3, 195))
    b = rng.standard_normal((3, 195))
    lhs = bandpass_filter(2.0 * a - 3.0 * b, FS)
    rhs = 2.0 * bandpass_filter(a, FS) - 3.0 * bandpass_filter(b, FS)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_preprocess_chain_output(rng):
    psi = rng.standard_normal((40, 195))
    out = preprocess(psi, FS)
    assert out.matrix.shape == (38, 195)
    assert out.matrix.min() >= 0.0 and out.matrix.max() <= 1.0
    # scaling ignores the amplitude of the input
    np.testing.assert_allclose(preprocess(1e-6 * psi, FS).matrix, out.matrix, atol=1e-9)


def test_preprocess_noise_needs_rng_and_is_reproducible(rng):
    psi = rng.standard_normal((10, 195))
    with pytest.raises(ValueError):
        preprocess(psi, FS, snr_db=1.0)
    a = preprocess(psi, FS, snr_db=1.0, rng=rng_stream(4, 0, "noise")).matrix
    b = preprocess(psi, FS, snr_db=1.0, rng=rng_stream(4, 0, "noise")).matrix
    assert a.tobytes() == b.tobytes()
    assert not np.allclose(a, preprocess(psi, FS).matrix)
