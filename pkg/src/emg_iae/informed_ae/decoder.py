"""Physical scaler and the physics decoder (mean fibre -> double differences -> min-max)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from ..forward_model import (
    ElectrodeArray,
    EstimatedParams,
    FibreParams,
    SamplingGrid,
    VolumeConductorConfig,
    mean_fibre_potential_with_gradient,
    fibre_potential,
)
from ..preprocess import EPS_SCALE, double_differences


class PhysicalScalerBounds(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    iz_bounds: tuple[float, float] = (-0.0975, 0.0975)
    v_bounds: tuple[float, float] = (3.0, 6.0)

    @model_validator(mode="after")
    def _ordered(self):
        for name in ("iz_bounds", "v_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name}: lower bound must be below upper bound")
        return self

    @classmethod
    def for_array(cls, array: ElectrodeArray, v_bounds=(3.0, 6.0)) -> "PhysicalScalerBounds":
        """iz between the first and the last electrode."""
        return cls(iz_bounds=(float(array.axial[0]), float(array.axial[-1])), v_bounds=v_bounds)

    @property
    def span(self) -> np.ndarray:
        return np.array([self.iz_bounds[1] - self.iz_bounds[0], self.v_bounds[1] - self.v_bounds[0]])


def physical_scale(u, bounds: PhysicalScalerBounds) -> EstimatedParams:
    u = np.asarray(u, dtype=float)
    iz = bounds.iz_bounds[0] + u[0] * (bounds.iz_bounds[1] - bounds.iz_bounds[0])
    v = bounds.v_bounds[0] + u[1] * (bounds.v_bounds[1] - bounds.v_bounds[0])
    return EstimatedParams(float(iz), float(v))


def inverse_physical_scale(p: EstimatedParams, bounds: PhysicalScalerBounds) -> np.ndarray:
    return np.array([
        (p.iz_hat - bounds.iz_bounds[0]) / (bounds.iz_bounds[1] - bounds.iz_bounds[0]),
        (p.v_hat - bounds.v_bounds[0]) / (bounds.v_bounds[1] - bounds.v_bounds[0]),
    ])


@dataclass(frozen=True)
class DecoderContext:
    """Everything the decoder needs besides the two estimated parameters."""

    array: ElectrodeArray
    grid: SamplingGrid
    template: FibreParams
    vc: VolumeConductorConfig = VolumeConductorConfig()


@dataclass
class Decoded:
    N: np.ndarray  # (m, k)
    dN: np.ndarray | None  # (m, k, 2) w.r.t. (iz, v)
    argmin: np.ndarray
    argmax: np.ndarray


def minmax_with_gradient(x: np.ndarray, dx: np.ndarray | None):
    """Per-row min-max scaling; the extremal indices are held fixed for the derivative."""
    rows = np.arange(x.shape[0])
    imin = x.argmin(axis=1)
    imax = x.argmax(axis=1)
    lo = x[rows, imin]
    hi = x[rows, imax]
    span = hi - lo
    ok = span >= EPS_SCALE
    safe = np.where(ok, span, 1.0)
    y = np.where(ok[:, None], (x - lo[:, None]) / safe[:, None], 0.5)
    if dx is None:
        return y, None, imin, imax
    dlo = dx[rows, imin]  # (m, P)
    dhi = dx[rows, imax]
    dy = (dx - dlo[:, None, :]) / safe[:, None, None] \
        - ((x - lo[:, None]) / safe[:, None] ** 2)[:, :, None] * (dhi - dlo)[:, None, :]
    dy = np.where(ok[:, None, None], dy, 0.0)
    return y, dy, imin, imax


def mean_fibre_sEMG(p_hat: EstimatedParams, ctx: DecoderContext, grad: bool = True):
    if grad:
        return mean_fibre_potential_with_gradient(ctx.array.positions, p_hat, ctx.template, ctx.grid.times, ctx.vc)
    fibre = ctx.template.moved(p_hat.iz_hat, p_hat.v_hat)
    return fibre_potential(ctx.array.positions, fibre, ctx.grid.times, ctx.vc), None


def decode(p_hat: EstimatedParams, ctx: DecoderContext, grad: bool = True) -> Decoded:
    """Scaled double differences of the mean fibre's sEMG and their sensitivity to ``p_hat``."""
    phi, dphi = mean_fibre_sEMG(p_hat, ctx, grad)
    dd = double_differences(phi)
    ddd = None
    if grad:
        ddd = dphi[2:] - 2.0 * dphi[1:-1] + dphi[:-2]
    N, dN, imin, imax = minmax_with_gradient(dd, ddd)
    return Decoded(N, dN, imin, imax)
