"""Double differences, band-pass filtering and per-channel min-max scaling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .synth import add_noise_after_dd

BAND = (4.0, 400.0)
FILTER_ORDER = 8
EPS_SCALE = 1e-15


class ShapeError(ValueError):
    pass


class FilterConfigError(ValueError):
    pass


@dataclass
class PreprocessedRecording:
    matrix: np.ndarray  # (n_E - 2, k), values in [0, 1]
    channel_min: np.ndarray
    channel_max: np.ndarray


def double_differences(psi: np.ndarray) -> np.ndarray:
    """``psi[j+2] - 2 psi[j+1] + psi[j]`` along the electrode axis (rows)."""
    psi = np.asarray(psi, dtype=float)
    if psi.ndim != 2 or psi.shape[0] < 3:
        raise ShapeError(f"need at least 3 electrode rows, got shape {psi.shape}")
    return psi[2:] - 2.0 * psi[1:-1] + psi[:-2]


def butterworth_sos(sample_rate: float, band=BAND, order: int = FILTER_ORDER) -> np.ndarray:
    nyquist = 0.5 * sample_rate
    if not band[1] < nyquist:
        raise FilterConfigError(f"upper band edge {band[1]} Hz is not below Nyquist ({nyquist} Hz)")
    # a band-pass designed from an order-N prototype has order 2N
    return butter(order // 2, band, btype="bandpass", fs=sample_rate, output="sos")


def bandpass_filter(signal: np.ndarray, sample_rate: float) -> np.ndarray:
    """Zero-phase 4-400 Hz Butterworth band-pass, applied per channel (rows)."""
    sos = butterworth_sos(sample_rate)
    signal = np.asarray(signal, dtype=float)
    return sosfiltfilt(sos, signal, axis=-1, padtype="even", padlen=3 * FILTER_ORDER)


def minmax_scale(signal: np.ndarray) -> PreprocessedRecording:
    signal = np.asarray(signal, dtype=float)
    lo = signal.min(axis=1)
    hi = signal.max(axis=1)
    span = hi - lo
    ok = span >= EPS_SCALE
    out = np.full_like(signal, 0.5)
    out[ok] = (signal[ok] - lo[ok, None]) / span[ok, None]
    return PreprocessedRecording(out, lo, hi)


def preprocess(psi: np.ndarray, sample_rate: float, snr_db: float | None = None,
               rng: np.random.Generator | None = None) -> PreprocessedRecording:
    """Full chain: double differences, optional noise, band-pass, min-max.

    Noise (when ``snr_db`` is given) is added to the double differences,
    before filtering and scaling.
    """
    dd = double_differences(psi)
    if snr_db is not None:
        if rng is None:
            raise ValueError("adding noise needs an explicit rng")
        dd = add_noise_after_dd(dd, snr_db, rng)
    return minmax_scale(bandpass_filter(dd, sample_rate))
