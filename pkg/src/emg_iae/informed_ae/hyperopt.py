"""Exhaustive search over encoder depth and activation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Iterable

from .encoder import EncoderConfig

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "leaky_relu")
DEPTHS = (1, 2, 3)


class HyperoptError(RuntimeError):
    pass


@dataclass
class HyperoptResult:
    best_cfg: EncoderConfig
    best_result: object
    cells: list[dict] = field(default_factory=list)


def default_grid(seed: int = 0) -> list[EncoderConfig]:
    return [EncoderConfig(n_l=n, activation=a, seed=seed) for n, a in product(DEPTHS, ACTIVATIONS)]


def _tie_key(cfg: EncoderConfig):
    return cfg.n_l, ACTIVATIONS.index(cfg.activation)


def hyperparameter_search(run_cell: Callable[[EncoderConfig], object],
                          grid: Iterable[EncoderConfig] | None = None) -> HyperoptResult:
    """Train every cell and keep the one with the lowest best loss.

    ``run_cell(cfg)`` returns an object with a ``best_loss`` attribute.
    Ties go to the shallower network, then to ReLU. Failing cells are
    recorded and skipped.
    """
    cells = sorted(grid if grid is not None else default_grid(), key=_tie_key)
    if not cells:
        raise HyperoptError("empty hyperparameter grid")
    best_cfg, best_res = None, None
    report = []
    for cfg in cells:
        try:
            res = run_cell(cfg)
        except Exception as exc:  # a failing cell must not sink the search
            log.warning("cell n_l=%d %s failed: %s", cfg.n_l, cfg.activation, exc)
            report.append({"n_l": cfg.n_l, "activation": cfg.activation, "best_loss": None, "error": str(exc)})
            continue
        report.append({"n_l": cfg.n_l, "activation": cfg.activation, "best_loss": res.best_loss, "error": ""})
        if best_res is None or res.best_loss < best_res.best_loss:
            best_cfg, best_res = cfg, res
    if best_res is None:
        raise HyperoptError("every hyperparameter cell failed")
    return HyperoptResult(best_cfg, best_res, report)
