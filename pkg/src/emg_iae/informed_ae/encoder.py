"""Feed-forward encoder: AN blocks (dense, activation, layer norm) and a sigmoid head."""
from __future__ import annotations

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

LN_EPS = 1e-3


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_l: int = Field(2, ge=1, le=3)
    activation: Literal["relu", "leaky_relu"] = "relu"
    leaky_slope: float = Field(0.01, ge=0)
    n_params: int = Field(2, ge=1)
    seed: int = 0

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        first = 2 ** (self.n_l + 2)
        return tuple(first >> i for i in range(self.n_l))


class EncoderShapeError(ValueError):
    pass


def init_encoder(cfg: EncoderConfig, n_inputs: int, train_seed: int = 0) -> dict[str, np.ndarray]:
    """Hidden weights uniform in +-1/sqrt(fan_in), zero output layer, unit layer-norm gain."""
    rng = np.random.default_rng([cfg.seed, train_seed])
    params = {}
    fan_in = n_inputs
    for i, width in enumerate(cfg.hidden_widths):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"W{i}"] = rng.uniform(-bound, bound, (fan_in, width))
        params[f"b{i}"] = np.zeros(width)
        params[f"gamma{i}"] = np.ones(width)
        params[f"beta{i}"] = np.zeros(width)
        fan_in = width
    # zero head: training starts from the centre of the physical bounds
    params["W_out"] = np.zeros((fan_in, cfg.n_params))
    params["b_out"] = np.zeros(cfg.n_params)
    return params


def _act(x, cfg):
    if cfg.activation == "relu":
        return np.maximum(x, 0.0)
    return np.where(x > 0, x, cfg.leaky_slope * x)


def _act_grad(x, cfg):
    if cfg.activation == "relu":
        return (x > 0).astype(float)
    return np.where(x > 0, 1.0, cfg.leaky_slope)


_U_LO = np.finfo(float).tiny
_U_HI = np.nextafter(1.0, 0.0)


def _sigmoid(x):
    # kept strictly inside (0, 1) even when the logits saturate
    return np.clip(expit(x), _U_LO, _U_HI)


def encoder_forward(M: np.ndarray, params: dict, cfg: EncoderConfig, return_cache: bool = False):
    """Map a preprocessed matrix to ``u`` in (0, 1)^q."""
    x = np.asarray(M, dtype=float).reshape(-1)
    if x.shape[0] != params["W0"].shape[0]:
        raise EncoderShapeError(
            f"input has {x.shape[0]} values, encoder expects {params['W0'].shape[0]}"
        )
    cache = []
    h = x
    for i in range(cfg.n_l):
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        a = _act(z, cfg)
        mu = a.mean()
        var = a.var()
        inv_std = 1.0 / np.sqrt(var + LN_EPS)
        xhat = (a - mu) * inv_std
        out = params[f"gamma{i}"] * xhat + params[f"beta{i}"]
        cache.append((h, z, xhat, inv_std))
        h = out
    logits = h @ params["W_out"] + params["b_out"]
    u = _sigmoid(logits)
    if return_cache:
        return u, (cache, h, u)
    return u


def encoder_backward(du: np.ndarray, params: dict, cfg: EncoderConfig, cache) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with respect to every weight, given dL/du."""
    layers, h_last, u = cache
    grads = {}
    dlogits = du * u * (1.0 - u)
    grads["W_out"] = np.outer(h_last, dlogits)
    grads["b_out"] = dlogits
    dh = params["W_out"] @ dlogits
    for i in reversed(range(cfg.n_l)):
        h_in, z, xhat, inv_std = layers[i]
        grads[f"gamma{i}"] = dh * xhat
        grads[f"beta{i}"] = dh.copy()
        dxhat = dh * params[f"gamma{i}"]
        n = xhat.size
        da = inv_std * (dxhat - dxhat.mean() - xhat * (dxhat @ xhat) / n)
        dz = da * _act_grad(z, cfg)
        grads[f"W{i}"] = np.outer(h_in, dz)
        grads[f"b{i}"] = dz
        dh = params[f"W{i}"] @ dz
    return grads
