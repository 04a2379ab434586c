"""Prototype-fibre references, error metrics, result tables and loss landscapes."""
from __future__ import annotations

import math
import statistics
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .forward_model import EstimatedParams, MotorUnit
from .informed_ae.decoder import DecoderContext, decode
from .informed_ae.losses import DEFAULT_LAMBDAS, LossBreakdown, loss_combined

METHOD_CLUSTERING = "Clustering"
METHOD_IAE = "Informed AE"
METHOD_ORDER = (METHOD_CLUSTERING, METHOD_IAE)


@dataclass(frozen=True)
class PrototypeParams:
    iz_pr: float  # m
    v_pr: float  # m/s


def prototype_params(mu: MotorUnit) -> PrototypeParams:
    return PrototypeParams(
        math.fsum(f.iz for f in mu.fibres) / len(mu),
        math.fsum(f.v for f in mu.fibres) / len(mu),
    )


def absolute_errors(pr: PrototypeParams, p_hat: EstimatedParams) -> tuple[float, float]:
    return abs(pr.iz_pr - p_hat.iz_hat), abs(pr.v_pr - p_hat.v_hat)


def prototype_losses(M: np.ndarray, pr: PrototypeParams, ctx: DecoderContext,
                     lambdas: tuple[float, float] = DEFAULT_LAMBDAS) -> LossBreakdown:
    """Losses of the prototype fibre against ``M``: the floor set by the single-fibre simplification."""
    N = decode(EstimatedParams(pr.iz_pr, pr.v_pr), ctx, grad=False).N
    return loss_combined(N, M, *lambdas)


@dataclass
class EvalRow:
    """One line of the per-motor-unit table. Lengths in mm, velocities in m/s."""

    mu_id: int
    iz_pr_mm: float
    v_pr_mps: float
    method: str
    d_iz_mm: float
    d_v_mps: float | None = None
    sqrt_mse_pred: float | None = None
    cc_pred: float | None = None
    sqrt_mse_prot: float | None = None
    cc_prot: float | None = None
    muscle_id: int = 0

    def __post_init__(self):
        if self.d_iz_mm < 0 or (self.d_v_mps is not None and self.d_v_mps < 0):
            raise ValueError("absolute errors must be non-negative")


TABLE1_COLUMNS = ("mu_id", "iz_pr_mm", "v_pr_mps", "method", "d_iz_mm", "d_v_mps",
                  "sqrt_mse_pred", "cc_pred", "sqrt_mse_prot", "cc_prot")
TABLE2_COLUMNS = ("muscle_id",) + TABLE1_COLUMNS[1:]
NUMERIC_COLUMNS = TABLE1_COLUMNS[4:]


def iae_row(mu_id: int, mu: MotorUnit, p_hat: EstimatedParams, M: np.ndarray, ctx: DecoderContext,
            lambdas=DEFAULT_LAMBDAS, muscle_id: int = 0) -> EvalRow:
    pr = prototype_params(mu)
    d_iz, d_v = absolute_errors(pr, p_hat)
    pred = loss_combined(decode(p_hat, ctx, grad=False).N, M, *lambdas)
    prot = prototype_losses(M, pr, ctx, lambdas)
    return EvalRow(mu_id, pr.iz_pr * 1e3, pr.v_pr, METHOD_IAE, d_iz * 1e3, d_v,
                   math.sqrt(pred.mse), pred.cc, math.sqrt(prot.mse), prot.cc, muscle_id)


def clustering_row(mu_id: int, mu: MotorUnit, iz_estimate: float, muscle_id: int = 0) -> EvalRow:
    pr = prototype_params(mu)
    return EvalRow(mu_id, pr.iz_pr * 1e3, pr.v_pr, METHOD_CLUSTERING,
                   abs(pr.iz_pr - iz_estimate) * 1e3, muscle_id=muscle_id)


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    # exact rational mean, correctly rounded once
    return float(statistics.mean(vals))


@dataclass
class AggregateRow:
    muscle_id: int | str  # "mean" for the grand-mean row
    iz_pr_mm: float
    v_pr_mps: float
    method: str
    d_iz_mm: float
    d_v_mps: float | None
    sqrt_mse_pred: float | None
    cc_pred: float | None
    sqrt_mse_prot: float | None
    cc_prot: float | None
    n: int


def _aggregate(key, rows: Sequence) -> AggregateRow:
    cols = {c: _mean(getattr(r, c) for r in rows) for c in
            ("iz_pr_mm", "v_pr_mps", "d_iz_mm", "d_v_mps", "sqrt_mse_pred", "cc_pred", "sqrt_mse_prot", "cc_prot")}
    return AggregateRow(key, method=rows[0].method, n=len(rows), **cols)


def aggregate_results(rows: Sequence[EvalRow]) -> list[AggregateRow]:
    """Per-muscle means for each method, followed by grand-mean rows over the muscles.

    Full precision is kept; rounding happens only when rendering.
    """
    if not rows:
        raise ValueError("nothing to aggregate")
    groups: dict[tuple, list[EvalRow]] = {}
    for r in rows:
        groups.setdefault((r.muscle_id, r.method), []).append(r)
    method_rank = {m: i for i, m in enumerate(METHOD_ORDER)}
    keys = sorted(groups, key=lambda k: (k[0], method_rank.get(k[1], len(method_rank)), k[1]))
    per_muscle = [_aggregate(k[0], groups[k]) for k in keys]
    methods = sorted({r.method for r in per_muscle}, key=lambda m: (method_rank.get(m, len(method_rank)), m))
    grand = [_aggregate("mean", [r for r in per_muscle if r.method == m]) for m in methods]
    return per_muscle + grand


def format_cell(value, decimals: int = 4) -> str:
    if value is None:
        return "--"
    if isinstance(value, float):
        return f"{value:.{decimals}f}"
    return str(value)


def render_table(rows: Sequence, columns: Sequence[str], decimals: int = 4) -> str:
    """Plain-text table, numbers rounded to ``decimals`` places."""
    body = [[format_cell(getattr(r, c), decimals) for c in columns] for r in rows]
    widths = [max(len(c), *(len(line[i]) for line in body)) if body else len(c) for i, c in enumerate(columns)]
    fmt = "  ".join(f"{{:>{w}}}" for w in widths)
    out = [fmt.format(*columns), "  ".join("-" * w for w in widths)]
    out += [fmt.format(*line) for line in body]
    return "\n".join(out)


def row_dict(row) -> dict:
    return asdict(row)


def row_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]


# --- loss landscape -----------------------------------------------------------

@dataclass
class Landscape:
    iz: np.ndarray  # (n_iz,) m
    v: np.ndarray  # (n_v,) m/s
    mse: np.ndarray  # (n_iz, n_v)
    cc: np.ndarray
    combined: np.ndarray

    def argmin(self, which: str = "combined") -> tuple[float, float]:
        grid = getattr(self, which)
        i, j = np.unravel_index(np.argmin(grid), grid.shape)
        return float(self.iz[i]), float(self.v[j])

    def rows(self):
        for i, iz in enumerate(self.iz):
            for j, v in enumerate(self.v):
                yield float(iz), float(v), float(self.mse[i, j]), float(self.cc[i, j]), float(self.combined[i, j])


def grid_axis(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(round((hi - lo) / step)) + 1
    return lo + step * np.arange(n)


DEFAULT_IZ_AXIS = (-0.024, 0.024, 0.0005)
DEFAULT_V_AXIS = (3.0, 6.0, 0.1)


def loss_landscape(M: np.ndarray, ctx: DecoderContext, iz_axis=DEFAULT_IZ_AXIS, v_axis=DEFAULT_V_AXIS,
                   lambdas=DEFAULT_LAMBDAS) -> Landscape:
    """Dense evaluation of the losses over an ``(iz, v)`` grid; axes are ``(lo, hi, step)``."""
    izs = grid_axis(*iz_axis)
    vs = grid_axis(*v_axis)
    shape = (len(izs), len(vs))
    mse, cc, comb = np.empty(shape), np.empty(shape), np.empty(shape)
    for i, iz in enumerate(izs):
        for j, v in enumerate(vs):
            lb = loss_combined(decode(EstimatedParams(float(iz), float(v)), ctx, grad=False).N, M, *lambdas)
            mse[i, j], cc[i, j], comb[i, j] = lb.mse, lb.cc, lb.combined
    return Landscape(izs, vs, mse, cc, comb)
