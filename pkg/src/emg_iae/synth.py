"""Synthetic muscles, motor units and single-discharge sEMG recordings."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .forward_model import (
    ElectrodeArray,
    FibreParams,
    MotorUnit,
    SamplingGrid,
    VolumeConductorConfig,
    motor_unit_matrix,
)

MAX_V_RETRIES = 100


class SynthConfigError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_motor_units_total: int = Field(774, ge=1)
    fibres_per_mu_range: tuple[int, int] = (315, 3367)
    cv_mean_range: tuple[float, float] = (2.5, 5.4)
    cv_std: float = Field(0.22, ge=0)
    length_ranges: tuple[tuple[float, float], tuple[float, float]] = ((0.145, 0.155), (0.185, 0.195))
    cross_section_area: float = Field(0.001, gt=0)
    iz_spread_std: float = Field(0.002, ge=0)
    # window of MU innervation-zone centres, axial metres
    iz_centre_window: tuple[float, float] = (-0.012, 0.012)
    # skin to the top of the muscle cross-section
    muscle_depth_offset: float = Field(0.005, gt=0)
    muscle_id: int = Field(0, ge=0)
    n_extracted: int = Field(8, ge=1)
    # mean velocities of the extracted units are evenly spaced over this sub-range;
    # None spreads them over the whole cv_mean_range
    extraction_cv_range: tuple[float, float] | None = (3.98, 5.32)
    snr_db: float = 1.0  # measurement noise, applied to the double differences
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self):
        lo, hi = self.fibres_per_mu_range
        if not 1 <= lo <= hi:
            raise ValueError("fibres_per_mu_range must be a non-empty interval of positive counts")
        for name in ("cv_mean_range", "iz_centre_window"):
            a, b = getattr(self, name)
            if not a <= b:
                raise ValueError(f"{name} must be a non-empty interval")
        for a, b in self.length_ranges:
            if not 0 < a <= b:
                raise ValueError("length ranges must be non-empty positive intervals")
        if self.extraction_cv_range is not None:
            a, b = self.extraction_cv_range
            lo, hi = self.cv_mean_range
            if not lo <= a <= b <= hi:
                raise ValueError("extraction_cv_range must lie inside cv_mean_range")
        if self.n_extracted > self.n_motor_units_total:
            raise ValueError("cannot extract more motor units than the muscle holds")
        return self

    @property
    def muscle_radius(self) -> float:
        return math.sqrt(self.cross_section_area / math.pi)

    @property
    def length_range(self) -> tuple[float, float]:
        """Fibre length interval used by this muscle (muscles alternate between the two)."""
        return self.length_ranges[self.muscle_id % len(self.length_ranges)]

    def cv_mean(self, mu_index: int) -> float:
        lo, hi = self.cv_mean_range
        if self.n_motor_units_total == 1:
            return 0.5 * (lo + hi)
        return lo + (hi - lo) * mu_index / (self.n_motor_units_total - 1)

    def extracted_indices(self) -> list[int]:
        """Motor units whose mean velocities are evenly spaced over ``extraction_cv_range``."""
        lo, hi = self.cv_mean_range
        a, b = self.extraction_cv_range or self.cv_mean_range
        last = self.n_motor_units_total - 1
        if hi == lo or last == 0:
            return [0] * self.n_extracted
        targets = np.linspace(a, b, self.n_extracted)
        idx = [int(round((t - lo) / (hi - lo) * last)) for t in targets]
        if len(set(idx)) != len(idx):
            raise ValueError("extraction range too narrow for distinct motor units")
        return idx

    def template_fibre(self) -> FibreParams:
        """Mean-fibre geometry known a priori: mid-length fibre at the centre of the cross-section."""
        lo, hi = self.length_range
        return FibreParams(iz=0.0, v=4.5, length=0.5 * (lo + hi),
                           depth=self.muscle_depth_offset + self.muscle_radius)


class ArrayConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_electrodes: int = Field(40, ge=3)
    span: float = Field(0.195, gt=0)
    n_samples: int = Field(195, ge=2)
    sample_rate: float = Field(5000.0, gt=0)

    @property
    def ied(self) -> float:
        return self.span / (self.n_electrodes - 1)

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def electrode_array(self) -> ElectrodeArray:
        return ElectrodeArray.linear(self.n_electrodes, self.span)

    def sampling_grid(self) -> SamplingGrid:
        return SamplingGrid(self.sample_rate, self.n_samples)


@dataclass
class Recording:
    """Electrode voltages ``(rows, k)`` with geometry and sampling metadata.

    ``kind`` is ``"raw"`` (one row per electrode) or ``"preprocessed"``
    (``n_E - 2`` double-difference rows scaled to [0, 1]).
    """

    voltages: np.ndarray
    array: ElectrodeArray
    grid: SamplingGrid
    ground_truth: MotorUnit | None = None
    kind: str = "raw"
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.voltages = np.asarray(self.voltages, dtype=np.float64)
        expected = self.array.count if self.kind == "raw" else self.array.count - 2
        if self.voltages.shape != (expected, self.grid.n_samples):
            raise ValueError(
                f"{self.kind} recording must be {expected} x {self.grid.n_samples}, got {self.voltages.shape}"
            )


def rng_stream(seed: int, mu_index: int, purpose: str) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, mu_index, purpose)``."""
    tag = zlib.crc32(purpose.encode())
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, mu_index, tag])
    return np.random.Generator(np.random.Philox(ss))


def _positive_normal(rng, mean, std, size):
    v = rng.normal(mean, std, size)
    for _ in range(MAX_V_RETRIES):
        bad = v <= 0
        if not bad.any():
            return v
        v[bad] = rng.normal(mean, std, int(bad.sum()))
    raise SynthConfigError(f"could not draw positive conduction velocities from N({mean}, {std})")


def generate_motor_unit(cfg: SynthConfig, mu_index: int, rng: np.random.Generator | None = None) -> MotorUnit:
    """Sample the fibres of one motor unit.

    Every fibre of the unit spans the same tendon-to-tendon segment, centred
    on the unit's innervation-zone centre; innervation points scatter
    normally around that centre and fibres sit uniformly in a disc-shaped
    cross-section below the array. Without ``rng`` a stream derived from
    ``(cfg.seed, mu_index)`` is used, so the result is reproducible.
    """
    if not 0 <= mu_index < cfg.n_motor_units_total:
        raise SynthConfigError(f"mu_index {mu_index} out of range")
    if rng is None:
        rng = rng_stream(cfg.seed, mu_index, f"motor_unit/muscle{cfg.muscle_id}")
    lo, hi = cfg.fibres_per_mu_range
    n = int(rng.integers(lo, hi + 1))
    centre = float(rng.uniform(*cfg.iz_centre_window))
    v = _positive_normal(rng, cfg.cv_mean(mu_index), cfg.cv_std, n) if cfg.cv_std > 0 \
        else np.full(n, cfg.cv_mean(mu_index))
    llo, lhi = cfg.length_range
    lengths = rng.triangular(llo, 0.5 * (llo + lhi), lhi, n) if lhi > llo else np.full(n, llo)
    iz = rng.normal(centre, cfg.iz_spread_std, n) if cfg.iz_spread_std > 0 else np.full(n, centre)
    radius = cfg.muscle_radius
    rad = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    ang = rng.uniform(0.0, 2.0 * math.pi, n)
    lateral = rad * np.cos(ang)
    depth = cfg.muscle_depth_offset + radius + rad * np.sin(ang)

    fibres = []
    for i in range(n):
        z_start = centre - 0.5 * lengths[i]
        iz_i = min(max(iz[i], z_start), z_start + lengths[i])
        fibres.append(FibreParams(iz=float(iz_i), v=float(v[i]), length=float(lengths[i]),
                                  depth=float(depth[i]), lateral_offset=float(lateral[i]),
                                  z_start=float(z_start)))
    return MotorUnit(tuple(fibres))


def simulate_recording(mu: MotorUnit, arr: ArrayConfig = ArrayConfig(),
                       vc: VolumeConductorConfig = VolumeConductorConfig()) -> Recording:
    array = arr.electrode_array()
    grid = arr.sampling_grid()
    volts = motor_unit_matrix(array.positions, mu, grid.times, vc)
    return Recording(volts, array, grid, ground_truth=mu)


def add_noise_after_dd(dd: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise at a per-channel signal-to-noise ratio.

    ``snr_db = inf`` returns an unchanged copy.
    """
    dd = np.asarray(dd, dtype=float)
    if dd.size == 0:
        raise DegenerateInputError("empty input")
    if math.isinf(snr_db) and snr_db > 0:
        return dd.copy()
    power = np.mean(dd**2, axis=1)
    if np.any(power == 0):
        raise DegenerateInputError("a channel is identically zero; SNR is undefined")
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return dd + sigma[:, None] * rng.standard_normal(dd.shape)
