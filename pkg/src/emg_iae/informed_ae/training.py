"""Full-batch training of the encoder through the physics decoder."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..forward_model import EstimatedParams
from .decoder import DecoderContext, PhysicalScalerBounds, decode, physical_scale
from .encoder import EncoderConfig, encoder_backward, encoder_forward, init_encoder
from .losses import combined_grad, loss_combined

log = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(10000, ge=1)
    patience: int = Field(3000, ge=1)
    min_delta: float = Field(1e-6, ge=0)
    clipnorm: float = Field(1.0, gt=0)
    lambda1: float = Field(0.875, ge=0)
    lambda2: float = Field(0.125, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-2, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _patience_fits(self):
        if self.patience > self.epochs:
            raise ValueError("patience must not exceed epochs")
        return self


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, params, history):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch
        self.params = params
        self.history = history


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], clipnorm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm <= clipnorm or norm == 0.0:
        return grads
    scale = clipnorm / norm
    return {k: g * scale for k, g in grads.items()}


class AdamW:
    """Adam with weight decay decoupled from the gradient step."""

    def __init__(self, lr=1e-3, weight_decay=1e-2, beta1=0.9, beta2=0.999, eps=1e-7):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = params[k]
            p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class EarlyStopping:
    """Stop once ``patience`` epochs in a row failed to beat the best loss by ``min_delta``."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.wait = 0

    def update(self, loss: float) -> bool:
        if self.best - loss >= self.min_delta:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


@dataclass
class FitResult:
    best_params: dict[str, np.ndarray]
    best_loss: float
    best_epoch: int
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False


Objective = Callable[[dict], tuple[float, dict, dict]]


def fit(objective: Objective, params: dict[str, np.ndarray], cfg: TrainConfig) -> FitResult:
    """Minimise ``objective(params) -> (loss, grads, info)`` with clipped AdamW.

    ``params`` is updated in place; the returned ``best_params`` is a copy of
    the weights that produced the lowest recorded loss.
    """
    opt = AdamW(cfg.learning_rate, cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    history: list[dict] = []
    best_loss, best_epoch, best_params = math.inf, -1, None
    stopped = False
    for epoch in range(cfg.epochs):
        loss, grads, info = objective(params)
        if not math.isfinite(loss):
            raise TrainingDivergedError(epoch, {k: v.copy() for k, v in params.items()}, history)
        history.append({"epoch": epoch, "loss": loss, **info})
        if loss < best_loss:
            best_loss, best_epoch = loss, epoch
            best_params = {k: v.copy() for k, v in params.items()}
        if stopper.update(loss):
            stopped = True
            break
        opt.step(params, clip_by_global_norm(grads, cfg.clipnorm))
    return FitResult(best_params, best_loss, best_epoch, history, stopped)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    p_hat: EstimatedParams
    best_loss: float
    best_epoch: int
    history: list[dict]
    stopped_early: bool
    enc_cfg: EncoderConfig
    train_cfg: TrainConfig


def make_objective(M: np.ndarray, enc_cfg: EncoderConfig, train_cfg: TrainConfig,
                   ctx: DecoderContext, bounds: PhysicalScalerBounds) -> Objective:
    M = np.asarray(M, dtype=float)
    last = {}

    def objective(params):
        u, cache = encoder_forward(M, params, enc_cfg, return_cache=True)
        p_hat = physical_scale(u, bounds)
        dec = decode(p_hat, ctx, grad=True)
        lb = loss_combined(dec.N, M, train_cfg.lambda1, train_cfg.lambda2)
        dLdN = combined_grad(dec.N, M, train_cfg.lambda1, train_cfg.lambda2)
        dLdp = np.einsum("mk,mkp->p", dLdN, dec.dN)
        grads = encoder_backward(dLdp * bounds.span, params, enc_cfg, cache)
        switches = 0
        if last:
            switches = int(np.sum(dec.argmin != last["argmin"]) + np.sum(dec.argmax != last["argmax"]))
        last["argmin"], last["argmax"] = dec.argmin, dec.argmax
        info = {"mse": lb.mse, "cc": lb.cc, "combined": lb.combined,
                "iz_hat": p_hat.iz_hat, "v_hat": p_hat.v_hat, "switches": switches}
        return lb.combined, grads, info

    return objective


def train(M: np.ndarray, enc_cfg: EncoderConfig, train_cfg: TrainConfig, ctx: DecoderContext,
          bounds: PhysicalScalerBounds | None = None) -> TrainResult:
    """Fit the encoder to one preprocessed recording ``M`` (batch of one)."""
    bounds = bounds or PhysicalScalerBounds.for_array(ctx.array)
    M = np.asarray(M, dtype=float)
    params = init_encoder(enc_cfg, M.size, train_seed=train_cfg.seed)
    objective = make_objective(M, enc_cfg, train_cfg, ctx, bounds)
    res = fit(objective, params, train_cfg)
    u = encoder_forward(M, res.best_params, enc_cfg)
    p_hat = physical_scale(u, bounds)
    log.info("trained %s: best loss %.6g at epoch %d, iz=%.4f mm v=%.4f m/s",
             enc_cfg.activation, res.best_loss, res.best_epoch, p_hat.iz_hat * 1e3, p_hat.v_hat)
    return TrainResult(res.best_params, p_hat, res.best_loss, res.best_epoch, res.history,
                       res.stopped_early, enc_cfg, train_cfg)
