"""Trainable building blocks with explicit forward and backward passes.

Every ``*_fwd`` returns ``(output, cache)``; the matching ``*_bwd`` takes that
cache and the upstream gradient and returns ``(grad_input, grad_params)``
where ``grad_params`` has the same dataclass type as the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numcore import Rng, ShapeError

LN_EPS = 1e-5


@dataclass
class LinearParams:
    W: np.ndarray  # (out, in)
    b: Optional[np.ndarray] = None  # (out,)

    @property
    def in_features(self) -> int:
        return self.W.shape[1]

    @property
    def out_features(self) -> int:
        return self.W.shape[0]

    def named(self):
        yield "W", self.W
        if self.b is not None:
            yield "b", self.b

    def num_params(self) -> int:
        return self.W.size + (0 if self.b is None else self.b.size)


@dataclass
class MlpParams:
    W1: np.ndarray  # (2H, H)
    b1: np.ndarray  # (2H,)
    W2: np.ndarray  # (H, 2H)
    b2: np.ndarray  # (H,)

    def named(self):
        yield "W1", self.W1
        yield "b1", self.b1
        yield "W2", self.W2
        yield "b2", self.b2

    def num_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size


@dataclass
class NormParams:
    gain: np.ndarray  # (H,)
    shift: np.ndarray  # (H,)

    def named(self):
        yield "gain", self.gain
        yield "shift", self.shift

    def num_params(self) -> int:
        return self.gain.size + self.shift.size


def init_linear(rng: Rng, n_in: int, n_out: int, bias: bool = True, dtype=np.float32) -> LinearParams:
    bound = 1.0 / np.sqrt(n_in)
    W = rng.uniform(-bound, bound, (n_out, n_in), dtype=dtype)
    b = np.zeros(n_out, dtype=dtype) if bias else None
    return LinearParams(W, b)


def init_mlp(rng: Rng, H: int, dtype=np.float32) -> MlpParams:
    l1 = init_linear(rng.split(0), H, 2 * H, dtype=dtype)
    l2 = init_linear(rng.split(1), 2 * H, H, dtype=dtype)
    return MlpParams(l1.W, l1.b, l2.W, l2.b)


def init_norm(H: int, dtype=np.float32) -> NormParams:
    return NormParams(np.ones(H, dtype=dtype), np.zeros(H, dtype=dtype))


# -- linear ---------------------------------------------------------------------

def linear_fwd(p: LinearParams, x: np.ndarray):
    if x.shape[-1] != p.in_features:
        raise ShapeError(f"linear: input trailing dim {x.shape[-1]} != in_features {p.in_features} "
                         f"(input {x.shape}, weight {p.W.shape})")
    y = x @ p.W.T
    if p.b is not None:
        y = y + p.b
    return y, x


def linear_bwd(p: LinearParams, cache, gy: np.ndarray):
    x = cache
    x2 = x.reshape(-1, x.shape[-1])
    g2 = gy.reshape(-1, gy.shape[-1])
    dW = g2.T @ x2
    db = g2.sum(axis=0) if p.b is not None else None
    dx = gy @ p.W
    return dx, LinearParams(dW, db)


# -- 2-layer MLP ------------------------------------------------------------------

def mlp_fwd(p: MlpParams, x: np.ndarray):
    H = p.W2.shape[0]
    if x.shape[-1] != H:
        raise ShapeError(f"mlp: input trailing dim {x.shape[-1]} != H={H}")
    pre = x @ p.W1.T + p.b1
    act = np.maximum(pre, 0)
    y = act @ p.W2.T + p.b2
    return y, (x, pre, act)


def mlp_bwd(p: MlpParams, cache, gy: np.ndarray):
    x, pre, act = cache
    g2 = gy.reshape(-1, gy.shape[-1])
    dW2 = g2.T @ act.reshape(-1, act.shape[-1])
    db2 = g2.sum(axis=0)
    dact = gy @ p.W2
    dpre = dact * (pre > 0)
    dpre2 = dpre.reshape(-1, dpre.shape[-1])
    dW1 = dpre2.T @ x.reshape(-1, x.shape[-1])
    db1 = dpre2.sum(axis=0)
    dx = dpre @ p.W1
    return dx, MlpParams(dW1, db1, dW2, db2)


# -- layer normalization ----------------------------------------------------------

def layernorm_fwd(p: NormParams, x: np.ndarray, eps: float = LN_EPS):
    H = x.shape[-1]
    if H == 0:
        raise ShapeError("layernorm over an empty channel dimension")
    if p.gain.shape != (H,):
        raise ShapeError(f"layernorm: params for H={p.gain.shape[0]} applied to input {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * p.gain + p.shift, (xhat, inv)


def layernorm_bwd(p: NormParams, cache, gy: np.ndarray):
    xhat, inv = cache
    H = xhat.shape[-1]
    g2 = gy.reshape(-1, H)
    dgain = (g2 * xhat.reshape(-1, H)).sum(axis=0)
    dshift = g2.sum(axis=0)
    dxhat = gy * p.gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, NormParams(dgain, dshift)
