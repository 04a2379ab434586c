"""Line-source volume-conductor model of single-fibre and motor-unit surface potentials.

Coordinates: a 3-vector is ``(axial, lateral, height)``. The fibre axis is
parallel to the axial direction, electrodes lie on the skin plane
(height 0) and a fibre at ``depth`` runs at height ``-depth``.

The intracellular action potential (IAP) is ``psi(s) = A s^3 exp(-s) - B``
for ``s >= 0`` and ``-B`` at rest, where ``s = ap_scale * distance_behind_front``.
Two waves leave the innervation point at ``t = 0`` and travel towards the
fibre ends at speed ``v``. The source density is the second spatial
derivative of the IAP; the potential is its line integral weighted by
``1 / (4 pi sigma r)``.

Integration is done in the wave coordinate ``s``: each wave only carries
current for ``0 <= s <= ap_support``, so every wave gets its own
Gauss-Legendre rule over that active window, clipped to the fibre ends and
to the innervation point. The integrand is smooth inside each window, which
is what makes the rule converge fast.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

MV_TO_V = 1e-3


class GeometryError(ValueError):
    """Electrode coincides with a source point, or fibre geometry is invalid."""


class VolumeConductorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    conductivity: float = Field(0.4, gt=0)  # S/m
    quadrature_points: int = Field(32, ge=8)  # Gauss-Legendre nodes per wave
    source_scale: float = 1e-9  # S*m, intracellular conductivity times fibre cross-section
    ap_amplitude: float = 96.0  # A, mV
    ap_resting: float = 90.0  # B, mV
    ap_scale: float = Field(500.0, gt=0)  # 1/m, s counts 2 mm steps behind the wave front
    ap_support: float = Field(30.0, gt=0)  # psi'' < 3e-9 * A beyond this s


@dataclass(frozen=True)
class FibreParams:
    iz: float
    v: float
    length: float
    depth: float
    lateral_offset: float = 0.0
    z_start: float | None = None  # defaults to a fibre centred on iz

    def __post_init__(self):
        if self.z_start is None:
            object.__setattr__(self, "z_start", self.iz - 0.5 * self.length)
        if not self.v > 0:
            raise GeometryError(f"conduction velocity must be > 0, got {self.v}")
        if not self.length > 0:
            raise GeometryError(f"fibre length must be > 0, got {self.length}")
        if not self.depth > 0:
            raise GeometryError(f"fibre depth must be > 0, got {self.depth}")
        tol = 1e-12 * max(1.0, abs(self.length))
        if not (self.z_start - tol <= self.iz <= self.z_start + self.length + tol):
            raise GeometryError("innervation point lies outside the fibre")

    @property
    def z_end(self) -> float:
        return self.z_start + self.length

    @property
    def left_length(self) -> float:
        """Distance from the innervation point to the proximal end."""
        return self.iz - self.z_start

    @property
    def right_length(self) -> float:
        return self.z_start + self.length - self.iz

    def moved(self, iz: float, v: float) -> "FibreParams":
        """Same fibre translated so its innervation point is ``iz``, with velocity ``v``."""
        shift = iz - self.iz
        return replace(self, iz=iz, v=v, z_start=self.z_start + shift)


@dataclass(frozen=True)
class MotorUnit:
    fibres: tuple[FibreParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "fibres", tuple(self.fibres))
        if len(self.fibres) < 1:
            raise ValueError("a motor unit needs at least one fibre")

    def __len__(self):
        return len(self.fibres)

    def __or__(self, other: "MotorUnit") -> "MotorUnit":
        return MotorUnit(self.fibres + other.fibres)


@dataclass(frozen=True)
class ElectrodeArray:
    positions: np.ndarray  # (n_E, 3)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1, 3)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        if len(pos) < 3:
            raise ValueError("an electrode array needs at least 3 electrodes")
        if np.any(np.diff(pos[:, 0]) <= 0):
            raise ValueError("electrode axial coordinates must be strictly increasing")

    @classmethod
    def linear(cls, n_electrodes: int, span: float) -> "ElectrodeArray":
        """Uniform array along the fibre axis centred on the origin."""
        axial = np.linspace(-span / 2, span / 2, n_electrodes)
        pos = np.zeros((n_electrodes, 3))
        pos[:, 0] = axial
        return cls(pos)

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def axial(self) -> np.ndarray:
        return self.positions[:, 0]

    def is_uniform(self, tol: float = 1e-12) -> bool:
        d = np.diff(self.axial)
        return bool(np.all(np.abs(d - d[0]) <= tol))


@dataclass(frozen=True)
class SamplingGrid:
    sample_rate: float
    n_samples: int
    times: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("a sampling grid needs at least 2 samples")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be > 0")
        t = np.arange(self.n_samples) / self.sample_rate
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True)
class EstimatedParams:
    iz_hat: float
    v_hat: float


# --- intracellular action potential and its s-derivatives -------------------

def intracellular_action_potential(s, cfg: VolumeConductorConfig = VolumeConductorConfig()):
    """IAP in mV at propagated coordinate ``s``; resting value ``-B`` for ``s <= 0``."""
    s = np.asarray(s, dtype=float)
    sp = np.maximum(s, 0.0)
    out = cfg.ap_amplitude * sp**3 * np.exp(-sp) - cfg.ap_resting
    return out if out.ndim else float(out)


def _iap_d2(s, amp):
    # d2/ds2 of A s^3 e^-s, zero for s < 0
    sp = np.maximum(s, 0.0)
    return amp * (6.0 * sp - 6.0 * sp**2 + sp**3) * np.exp(-sp)


def _iap_d3(s, amp):
    sp = np.maximum(s, 0.0)
    return amp * (6.0 - 18.0 * sp + 9.0 * sp**2 - sp**3) * np.exp(-sp)


def _prefactor(cfg: VolumeConductorConfig) -> float:
    return cfg.source_scale * MV_TO_V / (4.0 * math.pi * cfg.conductivity)


def fibre_kernel_h(x, p: FibreParams, t: float, z: float, cfg: VolumeConductorConfig = VolumeConductorConfig()) -> float:
    """Line-source integrand at fibre point ``z``: source density over ``4 pi sigma r``."""
    if not (p.z_start <= z <= p.z_end):
        raise GeometryError("source point outside the fibre")
    x = np.asarray(x, dtype=float)
    dist_from_iz = abs(z - p.iz)
    s = cfg.ap_scale * (p.v * t - dist_from_iz)
    r = math.sqrt((z - x[0]) ** 2 + (p.lateral_offset - x[1]) ** 2 + (-p.depth - x[2]) ** 2)
    if r == 0.0:
        raise GeometryError("electrode coincides with a source point")
    d2v = cfg.ap_scale**2 * float(_iap_d2(s, cfg.ap_amplitude))
    return _prefactor(cfg) * d2v / r


@lru_cache(maxsize=32)
def _gauss_legendre(n: int):
    xi, w = np.polynomial.legendre.leggauss(n)
    xi.setflags(write=False)
    w.setflags(write=False)
    return xi, w


def _wave_windows(vt, side_length, cfg):
    """Active ``s`` window of one wave, clipped to the fibre end.

    Returns ``lo, hi`` and their derivatives with respect to ``vt``.
    """
    lam = cfg.ap_scale
    front = lam * vt
    hi = np.minimum(front, cfg.ap_support)
    dhi = np.where(front < cfg.ap_support, lam, 0.0)
    past_end = lam * (vt - side_length)
    lo = np.maximum(past_end, 0.0)
    dlo = np.where(past_end > 0.0, lam, 0.0)
    # empty window (not started, or fully extinguished) -> zero-length
    empty = hi <= lo
    lo = np.where(empty, 0.0, lo)
    hi = np.where(empty, 0.0, hi)
    dlo = np.where(empty, 0.0, dlo)
    dhi = np.where(empty, 0.0, dhi)
    return lo, hi, dlo, dhi


def _fibre_matrix(positions, iz, v, left_length, right_length, lateral, depth, times, cfg, grad=False):
    """Potential of one fibre at every (electrode, time).

    The fibre ends are held at fixed distances from ``iz``, so the iz
    derivative is that of a rigid translation of the fibre.
    Returns ``(n_E, k)`` values, and when ``grad`` a ``(n_E, k, 2)`` array of
    derivatives with respect to ``(iz, v)``.
    """
    lam = cfg.ap_scale
    xi, w = _gauss_legendre(cfg.quadrature_points)
    alpha = 0.5 * (xi + 1.0)  # (Q,)
    t = np.asarray(times, dtype=float)
    vt = v * t
    ex = positions[:, 0][:, None, None]
    rho2 = (lateral - positions[:, 1]) ** 2 + (depth + positions[:, 2]) ** 2
    rho2 = rho2[:, None, None]

    value = np.zeros((len(positions), len(t)))
    d_iz = np.zeros_like(value) if grad else None
    d_v = np.zeros_like(value) if grad else None

    for sign, side_length in ((1.0, right_length), (-1.0, left_length)):
        lo, hi, dlo, dhi = _wave_windows(vt, side_length, cfg)
        width = hi - lo
        s = lo[:, None] + width[:, None] * alpha  # (k, Q)
        wq = 0.5 * width[:, None] * w  # (k, Q)
        # fibre position of node s: iz + sign*(vt - s/lam)
        z = iz + sign * (vt[:, None] - s / lam)
        dz_ax = z[None] - ex  # (n_E, k, Q)
        r2 = dz_ax**2 + rho2
        if np.any(r2 == 0.0):
            raise GeometryError("electrode coincides with a source point")
        inv_r = 1.0 / np.sqrt(r2)
        f = _iap_d2(s, cfg.ap_amplitude)  # (k, Q)
        fw = f * wq
        value += np.einsum("ekq,kq->ek", inv_r, fw)
        if grad:
            # d/dvt of node positions and weights
            ds = dlo[:, None] + (dhi - dlo)[:, None] * alpha
            dwq = 0.5 * (dhi - dlo)[:, None] * w
            dz_dvt = sign * (1.0 - ds / lam)
            f3 = _iap_d3(s, cfg.ap_amplitude)
            # d(1/r)/dz = -(z - ex)/r^3
            dinv_dz = -dz_ax * inv_r**3
            # wrt iz: nodes move rigidly, dz/diz = 1
            d_iz += np.einsum("ekq,kq->ek", dinv_dz, fw)
            # wrt vt, then chain with dvt/dv = t
            dvt = (
                np.einsum("ekq,kq->ek", inv_r, f3 * ds * wq + f * dwq)
                + np.einsum("ekq,kq->ek", dinv_dz, fw * dz_dvt)
            )
            d_v += dvt * t[None, :]

    pre = _prefactor(cfg) * lam  # ds = lam dz, integrand carries lam^2
    value *= pre
    if not grad:
        return value
    return value, np.stack([d_iz * pre, d_v * pre], axis=-1)


def _as_positions(x) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1, 3)


def fibre_potential(x, p: FibreParams, t, cfg: VolumeConductorConfig = VolumeConductorConfig()):
    """Surface potential (V) of one fibre at point(s) ``x`` and time(s) ``t``.

    Scalar ``x`` (3-vector) and scalar ``t`` give a float; otherwise an
    ``(n_points, n_times)`` array.
    """
    scalar = np.ndim(x) == 1 and np.ndim(t) == 0
    pos = _as_positions(x)
    times = np.atleast_1d(np.asarray(t, dtype=float))
    out = _fibre_matrix(pos, p.iz, p.v, p.left_length, p.right_length,
                        p.lateral_offset, p.depth, times, cfg)
    return float(out[0, 0]) if scalar else out


def fibre_matrix(array: ElectrodeArray, p: FibreParams, grid: SamplingGrid,
                 cfg: VolumeConductorConfig = VolumeConductorConfig()) -> np.ndarray:
    return fibre_potential(array.positions, p, grid.times, cfg)


class _PairwiseSum:
    """Streaming pairwise summation; partial sums merge like a binary counter."""

    def __init__(self):
        self._stack: list[tuple[int, np.ndarray]] = []

    def add(self, term: np.ndarray):
        level, acc = 0, term
        while self._stack and self._stack[-1][0] == level:
            _, prev = self._stack.pop()
            acc = prev + acc
            level += 1
        self._stack.append((level, acc))

    def result(self) -> np.ndarray:
        if not self._stack:
            raise ValueError("empty sum")
        acc = self._stack[-1][1]
        for _, part in reversed(self._stack[:-1]):
            acc = part + acc
        return acc


def motor_unit_matrix(positions, mu: MotorUnit, times,
                      cfg: VolumeConductorConfig = VolumeConductorConfig()) -> np.ndarray:
    """Superposition of all fibre potentials, ``(n_points, n_times)``."""
    pos = _as_positions(positions)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    total = _PairwiseSum()
    for p in mu.fibres:
        total.add(_fibre_matrix(pos, p.iz, p.v, p.left_length, p.right_length,
                                p.lateral_offset, p.depth, times, cfg))
    return total.result()


def motor_unit_potential(x, mu: MotorUnit, t, cfg: VolumeConductorConfig = VolumeConductorConfig()):
    scalar = np.ndim(x) == 1 and np.ndim(t) == 0
    out = motor_unit_matrix(x, mu, t, cfg)
    return float(out[0, 0]) if scalar else out


def mean_fibre_potential_with_gradient(x, p_hat: EstimatedParams, geom: FibreParams, t,
                                       cfg: VolumeConductorConfig = VolumeConductorConfig()):
    """Potential of the mean fibre and its derivative with respect to ``(iz, v)``.

    ``geom`` supplies length, depth, lateral offset and where the
    innervation point sits along the fibre; the fibre is translated so that
    its innervation point is ``p_hat.iz``.

    Returns ``(value, grad)``: a float and a length-2 array for a single
    point and time, else ``(n_points, n_times)`` and ``(n_points, n_times, 2)``.
    """
    scalar = np.ndim(x) == 1 and np.ndim(t) == 0
    pos = _as_positions(x)
    times = np.atleast_1d(np.asarray(t, dtype=float))
    if not p_hat.v_hat > 0:
        raise GeometryError("conduction velocity must be > 0")
    value, grad = _fibre_matrix(pos, p_hat.iz_hat, p_hat.v_hat, geom.left_length, geom.right_length,
                                geom.lateral_offset, geom.depth, times, cfg, grad=True)
    if scalar:
        return float(value[0, 0]), grad[0, 0].copy()
    return value, grad
