"""Clustering-based innervation-zone estimator used as the comparison method.

Per channel, the arrival time of the motor unit potential is the peak of a
Mexican-hat wavelet response. Straight lines fitted to short windows of
adjacent channels trace the propagating potential; lines travelling in
opposite directions are traced back to their intersections, and DBSCAN
picks the densest group of intersections. Positions are handled in mm and times in ms, the
time axis being multiplied by a reference velocity (mm/ms) so that both
clustering coordinates are lengths.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from sklearn.cluster import DBSCAN

from .forward_model import ElectrodeArray
from .preprocess import double_differences

log = logging.getLogger(__name__)

# the wavelet width magnitude is the total support, spanning +-4 Ricker scales
SUPPORT_IN_SCALES = 8.0


class BaselineError(RuntimeError):
    pass


class InsufficientSignalError(BaselineError):
    pass


class OneSidedDataError(BaselineError):
    pass


class NonPropagatingError(BaselineError):
    pass


class NoClusterError(BaselineError):
    pass


class BaselineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    wavelet_width: float = -0.00391667  # s; magnitude is the wavelet support
    dbscan_eps: float = Field(1.10083333, gt=0)  # mm
    dbscan_min_points: int = Field(3, ge=1)
    ref_cv: float = Field(5.0, gt=0)  # m/s == mm/ms
    confidence: float = Field(0.1, ge=0, lt=1)  # fraction of the strongest channel response
    segment_channels: int = Field(3, ge=2)
    # line segments slower or faster than this are not propagating potentials
    velocity_range: tuple[float, float] = (2.0, 10.0)  # m/s

    @model_validator(mode="after")
    def _check_velocity_range(self):
        lo, hi = self.velocity_range
        if not 0 < lo < hi:
            raise ValueError("velocity_range must satisfy 0 < low < high")
        return self

    def ricker_scale(self, sample_rate: float) -> float:
        """Ricker scale in samples."""
        return abs(self.wavelet_width) * sample_rate / SUPPORT_IN_SCALES

    def interpretation(self) -> dict:
        return {
            "wavelet_width": f"|{self.wavelet_width}| s taken as the Mexican-hat support "
                             f"(+-{SUPPORT_IN_SCALES / 2:g} scales); sign ignored",
            "dbscan_eps": f"{self.dbscan_eps} mm in (position mm, time ms * ref_cv) space",
            "ref_cv": f"{self.ref_cv} m/s",
            "velocity_range": f"line segments outside {list(self.velocity_range)} m/s are ignored",
        }


@dataclass(frozen=True)
class Arrival:
    channel: int
    time: float  # s


@dataclass(frozen=True)
class Line:
    """Arrival time as a function of axial position: ``t = intercept + slope * z``."""

    intercept: float
    slope: float  # s/m

    @property
    def velocity(self) -> float:
        return 1.0 / abs(self.slope)

    def __call__(self, z):
        return self.intercept + self.slope * z


@dataclass
class BaselineResult:
    iz_estimate: float  # m
    n_candidates: int
    n_clustered: int
    candidates: np.ndarray = field(repr=False)  # (n, 2): position m, time s
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "iz_estimate_mm": self.iz_estimate * 1e3,
            "n_candidates": self.n_candidates,
            "n_clustered": self.n_clustered,
            "interpretation": self.metadata,
        }


def ricker(n_points: int, a: float) -> np.ndarray:
    t = np.arange(n_points) - (n_points - 1) / 2.0
    x = (t / a) ** 2
    return 2.0 / (np.sqrt(3.0 * a) * np.pi**0.25) * (1.0 - x) * np.exp(-x / 2.0)


def wavelet_response(signal: np.ndarray, scale: float) -> np.ndarray:
    """Single-scale continuous wavelet transform of each row."""
    n = int(min(10 * scale + 1, signal.shape[-1]))
    n += (n + 1) % 2  # odd length keeps the response centred
    w = ricker(n, scale)
    return np.stack([np.convolve(row, w, mode="same") for row in np.atleast_2d(signal)])


def detect_arrival_times(M: np.ndarray, sample_rate: float, cfg: BaselineConfig = BaselineConfig()) -> list[Arrival]:
    """Time of the dominant wavelet-response peak on each channel.

    Channels whose peak is below ``cfg.confidence`` times the strongest
    channel peak are left out. The peak is refined to sub-sample precision
    by a parabola through the three samples around it.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] < 3:
        raise InsufficientSignalError("need at least 3 channels")
    W = np.abs(wavelet_response(M, cfg.ricker_scale(sample_rate)))
    peaks = W.max(axis=1)
    top = peaks.max()
    if not top > 0:
        raise InsufficientSignalError("no wavelet response on any channel")
    arrivals = []
    for j, row in enumerate(W):
        if peaks[j] < cfg.confidence * top:
            continue
        i = int(row.argmax())
        offset = 0.0
        if 0 < i < len(row) - 1:
            a, b, c = row[i - 1], row[i], row[i + 1]
            denom = a - 2 * b + c
            if denom < 0:
                offset = 0.5 * (a - c) / denom
        arrivals.append(Arrival(j, (i + offset) / sample_rate))
    if len(arrivals) < 3:
        raise InsufficientSignalError(f"only {len(arrivals)} channels carry a confident arrival")
    return arrivals


def _fit_line(z: np.ndarray, t: np.ndarray) -> Line:
    slope, intercept = np.polyfit(z, t, 1)
    return Line(float(intercept), float(slope))


def _branches(arrivals: list[Arrival], positions: np.ndarray):
    apex = min(arrivals, key=lambda a: (a.time, a.channel))
    left = sorted((a for a in arrivals if a.channel < apex.channel), key=lambda a: -a.channel)
    right = sorted((a for a in arrivals if a.channel > apex.channel), key=lambda a: a.channel)
    return apex, left, right


def _check_pair(left: Line, right: Line):
    if not (left.slope < 0 < right.slope):
        raise NonPropagatingError(
            f"branch slopes {left.slope:.4g} and {right.slope:.4g} s/m do not point away from each other"
        )


def fit_propagation_lines(arrivals: list[Arrival], array: ElectrodeArray) -> tuple[Line, Line]:
    """Least-squares lines through both branches on either side of the earliest channel.

    Channel indices refer to double-difference rows, whose centre electrode
    is ``channel + 1``.
    """
    pos = _dd_positions(array)
    _, left, right = _branches(arrivals, pos)
    if len(left) < 2 or len(right) < 2:
        raise OneSidedDataError(f"{len(left)} arrivals left and {len(right)} right of the earliest channel")
    lines = tuple(
        _fit_line(pos[[a.channel for a in side]], np.array([a.time for a in side]))
        for side in (left, right)
    )
    _check_pair(*lines)
    return lines


def window_lines(arrivals: list[Arrival], array: ElectrodeArray, n_channels: int = 3) -> list[tuple[float, Line]]:
    """Lines through every run of ``n_channels`` adjacent channels, keyed by the run's mean position."""
    pos = _dd_positions(array)
    arr = sorted(arrivals, key=lambda a: a.channel)
    out = []
    for k in range(len(arr) - n_channels + 1):
        win = arr[k:k + n_channels]
        if win[-1].channel - win[0].channel != n_channels - 1:
            continue  # a channel in between was dropped
        z = pos[[a.channel for a in win]]
        out.append((float(z.mean()), _fit_line(z, np.array([a.time for a in win]))))
    return out


def segment_line_pairs(arrivals: list[Arrival], array: ElectrodeArray,
                       cfg: BaselineConfig = BaselineConfig()) -> list[tuple[Line, Line]]:
    """Pairs of short propagation lines travelling away from each other.

    Each window of ``cfg.segment_channels`` adjacent channels gives a line;
    only lines whose speed lies in ``cfg.velocity_range`` count as
    propagating. Every left-travelling line is paired with every
    right-travelling line located to its right.
    """
    lines = window_lines(arrivals, array, cfg.segment_channels)
    vmin, vmax = cfg.velocity_range
    moving = [(zc, ln) for zc, ln in lines if ln.slope != 0.0 and vmin <= ln.velocity <= vmax]
    left = [(zc, ln) for zc, ln in moving if ln.slope < 0]
    right = [(zc, ln) for zc, ln in moving if ln.slope > 0]
    if not moving:
        raise NonPropagatingError("no channel window shows a propagating potential")
    if not left or not right:
        raise OneSidedDataError(f"{len(left)} left- and {len(right)} right-travelling line segments")
    pairs = [(lft, rgt) for zl, lft in left for zr, rgt in right if zl < zr]
    if not pairs:
        raise OneSidedDataError("no left-travelling segment lies left of a right-travelling one")
    return pairs


def intersect_candidates(pairs: list[tuple[Line, Line]]) -> np.ndarray:
    """Intersection ``(z, t)`` of each line pair; parallel pairs are skipped."""
    out = []
    for left, right in pairs:
        ds = left.slope - right.slope
        if ds == 0.0:
            log.warning("skipping parallel line pair (slope %g)", left.slope)
            continue
        z = (right.intercept - left.intercept) / ds
        out.append((z, left(z)))
    return np.array(out, dtype=float).reshape(-1, 2)


def cluster_centre(candidates: np.ndarray, cfg: BaselineConfig = BaselineConfig()) -> tuple[float, int]:
    """Mean position of the largest DBSCAN cluster and its size.

    Points are sorted before clustering so the result does not depend on
    input order; equal-sized clusters resolve to the one with the leftmost
    member.
    """
    pts = np.asarray(candidates, dtype=float).reshape(-1, 2)
    if len(pts) < cfg.dbscan_min_points:
        raise NoClusterError(f"{len(pts)} candidates, need at least {cfg.dbscan_min_points}")
    scaled = np.column_stack([pts[:, 0] * 1e3, pts[:, 1] * 1e3 * cfg.ref_cv])
    order = np.lexsort((scaled[:, 1], scaled[:, 0]))
    scaled = scaled[order]
    labels = DBSCAN(eps=cfg.dbscan_eps, min_samples=cfg.dbscan_min_points).fit_predict(scaled)
    clusters = [np.flatnonzero(labels == lab) for lab in np.unique(labels) if lab >= 0]
    if not clusters:
        raise NoClusterError("every candidate is noise")
    best = min(clusters, key=lambda idx: (-len(idx), scaled[idx, 0].min()))
    return float(scaled[best, 0].mean() * 1e-3), len(best)


def _dd_positions(array: ElectrodeArray) -> np.ndarray:
    return array.axial[1:-1]


def estimate_iz_baseline(recording, cfg: BaselineConfig = BaselineConfig()) -> BaselineResult:
    """Innervation-zone centre of a raw or preprocessed recording."""
    if recording.kind == "raw":
        M = double_differences(recording.voltages)
    else:
        M = recording.voltages
    arrivals = detect_arrival_times(M, recording.grid.sample_rate, cfg)
    pairs = segment_line_pairs(arrivals, recording.array, cfg)
    cands = intersect_candidates(pairs)
    iz, n_clustered = cluster_centre(cands, cfg)
    return BaselineResult(iz, len(cands), n_clustered, cands, cfg.interpretation())
