"""Minimal gated recurrent unit.

    z_t  = sigmoid(W_z x_t + b_z)
    h~_t = W_h x_t + b_h
    h_t  = (1 - z_t) * h_{t-1} + z_t * h~_t

Gates depend on the input only, so the recurrence is a first-order linear
scan ``h_t = a_t * h_{t-1} + b_t`` and can be evaluated with a parallel
prefix scan as well as step by step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numcore import Rng, ShapeError, sigmoid


@dataclass
class GruParams:
    Wz: np.ndarray  # (H, H)
    bz: np.ndarray  # (H,)
    Wh: np.ndarray  # (H, H)
    bh: np.ndarray  # (H,)

    @property
    def H(self) -> int:
        return self.Wz.shape[0]

    def named(self):
        yield "Wz", self.Wz
        yield "bz", self.bz
        yield "Wh", self.Wh
        yield "bh", self.bh

    def num_params(self) -> int:
        return self.Wz.size + self.bz.size + self.Wh.size + self.bh.size


def init_gru(rng: Rng, H: int, dtype=np.float32) -> GruParams:
    bound = 1.0 / np.sqrt(H)
    return GruParams(
        Wz=rng.split(0).uniform(-bound, bound, (H, H), dtype=dtype),
        bz=np.zeros(H, dtype=dtype),
        Wh=rng.split(1).uniform(-bound, bound, (H, H), dtype=dtype),
        bh=np.zeros(H, dtype=dtype),
    )


def gru_gates(p: GruParams, x: np.ndarray):
    if x.shape[-1] != p.H:
        raise ShapeError(f"minGRU: input trailing dim {x.shape[-1]} != H={p.H}")
    z = sigmoid(x @ p.Wz.T + p.bz)
    htilde = x @ p.Wh.T + p.bh
    return z, htilde


def _h0(h0: Optional[np.ndarray], x: np.ndarray) -> np.ndarray:
    B, _, H = x.shape
    if h0 is None:
        return np.zeros((B, H), dtype=x.dtype)
    if h0.shape != (B, H):
        raise ShapeError(f"h0 must have shape {(B, H)}, got {h0.shape}")
    return h0


def gru_sequential(p: GruParams, x: np.ndarray, h0: Optional[np.ndarray] = None) -> np.ndarray:
    """Step-by-step recurrence over (B, T, H) inputs."""
    z, ht = gru_gates(p, x)
    h = _h0(h0, x)
    out = np.empty_like(z)
    for t in range(x.shape[1]):
        h = (1 - z[:, t]) * h + z[:, t] * ht[:, t]
        out[:, t] = h
    return out


def gru_step(p: GruParams, x_t: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    """Single streaming step; the only state is ``h_prev`` (H floats per stream)."""
    z = sigmoid(x_t @ p.Wz.T + p.bz)
    ht = x_t @ p.Wh.T + p.bh
    return (1 - z) * h_prev + z * ht


def combine(e1, e2):
    """Compose two affine maps h -> a*h + b, applying ``e1`` first."""
    a1, b1 = e1
    a2, b2 = e2
    return a2 * a1, a2 * b1 + b2


def linear_scan(a: np.ndarray, b: np.ndarray, axis: int = 1) -> np.ndarray:
    """Inclusive scan of ``h_t = a_t * h_{t-1} + b_t`` with ``h_{-1} = 0``.

    Blelloch up-sweep/down-sweep over a power-of-two padded time axis;
    each tree level is one vectorized numpy operation.
    """
    a = np.moveaxis(a, axis, 0)
    b = np.moveaxis(b, axis, 0)
    T = a.shape[0]
    if T == 0:
        return np.moveaxis(b.copy(), 0, axis)
    n = 1 << (T - 1).bit_length()
    A = np.ones((n,) + a.shape[1:], dtype=a.dtype)
    Bv = np.zeros((n,) + b.shape[1:], dtype=b.dtype)
    A[:T] = a
    Bv[:T] = b

    # up-sweep: node r accumulates the composition of its block
    stride = 2
    while stride <= n:
        left = slice(stride // 2 - 1, n, stride)
        right = slice(stride - 1, n, stride)
        Bv[right] = A[right] * Bv[left] + Bv[right]
        A[right] = A[right] * A[left]
        stride *= 2

    # down-sweep: turn block totals into exclusive prefixes
    A[n - 1] = 1
    Bv[n - 1] = 0
    stride = n
    while stride >= 2:
        left = slice(stride // 2 - 1, n, stride)
        right = slice(stride - 1, n, stride)
        la, lb = A[left].copy(), Bv[left].copy()
        A[left], Bv[left] = A[right], Bv[right]
        # prefix before the block, then the left half
        A[right], Bv[right] = combine((A[right], Bv[right]), (la, lb))
        stride //= 2

    # exclusive prefix applied to zero is its offset; append own element
    h = a * Bv[:T] + b
    return np.moveaxis(h, 0, axis)


def gru_scan(p: GruParams, x: np.ndarray, h0: Optional[np.ndarray] = None) -> np.ndarray:
    z, ht = gru_gates(p, x)
    return _scan_from_gates(z, ht, _h0(h0, x))


def _scan_from_gates(z, ht, h0):
    a = 1 - z
    b = z * ht
    b = b.copy()
    b[:, 0] += a[:, 0] * h0
    return linear_scan(a, b, axis=1)


def gru_fwd(p: GruParams, x: np.ndarray, h0: Optional[np.ndarray] = None, mode: str = "scan"):
    """Forward pass with cache for :func:`gru_bwd`."""
    z, ht = gru_gates(p, x)
    h0 = _h0(h0, x)
    if mode == "scan":
        h = _scan_from_gates(z, ht, h0)
    elif mode == "sequential":
        h = gru_sequential(p, x, h0)
    else:
        raise ValueError(f"unknown minGRU mode {mode!r}")
    return h, (x, z, ht, h, h0)


def gru_bwd(p: GruParams, cache, gh: np.ndarray):
    """Reverse-mode through the recurrence.

    The adjoint obeys lam_t = gh_t + (1 - z_{t+1}) * lam_{t+1}, itself a
    linear scan run backwards in time.
    Returns ``(grad_x, grad_params, grad_h0)``.
    """
    x, z, ht, h, h0 = cache
    a = 1 - z
    a_next = np.zeros_like(a)
    a_next[:, :-1] = a[:, 1:]
    lam = linear_scan(a_next[:, ::-1], gh[:, ::-1], axis=1)[:, ::-1]
    h_prev = np.concatenate([h0[:, None], h[:, :-1]], axis=1)
    dz = lam * (ht - h_prev)
    dht = lam * z
    dpre = dz * z * (1 - z)
    H = p.H
    x2 = x.reshape(-1, H)
    dpre2 = dpre.reshape(-1, H)
    dht2 = dht.reshape(-1, H)
    grads = GruParams(
        Wz=dpre2.T @ x2,
        bz=dpre2.sum(axis=0),
        Wh=dht2.T @ x2,
        bh=dht2.sum(axis=0),
    )
    dx = dpre @ p.Wz + dht @ p.Wh
    dh0 = lam[:, 0] * a[:, 0]
    return dx, grads, dh0
