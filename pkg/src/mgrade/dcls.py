"""Depthwise causal temporal convolution with sparse taps.

Three kernel families share one code path:

* ``CD``  - constant dilation, taps at ``d * i``
* ``EID`` - exponentially increasing dilation, taps at ``d_b * 2**l * i``
* ``L``   - learnable real-valued tap positions spread onto the integer grid
            with a Gaussian of width ``sigma``

A kernel always spans delays ``0..gamma``; ``gamma`` is its largest delay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .numcore import Rng, ShapeError

VARIANTS = ("CD", "EID", "L")
DEFAULT_SIGMA = 0.5
TRUNC_SIGMAS = 3.0


@dataclass
class KernelSpec:
    variant: str
    weights: np.ndarray  # (H, K)
    positions: np.ndarray  # (H, K), integer valued for CD/EID
    gamma: int
    sigma: float = DEFAULT_SIGMA
    dilation: Optional[int] = None  # d for CD, d_b for EID
    layer_index: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown conv variant {self.variant!r}, expected one of {VARIANTS}")
        if self.weights.ndim != 2 or self.weights.shape != self.positions.shape:
            raise ShapeError(f"weights {self.weights.shape} and positions {self.positions.shape} "
                             "must both be (H, K)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.variant == "L" and self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def H(self) -> int:
        return self.weights.shape[0]

    @property
    def K(self) -> int:
        return self.weights.shape[1]

    @property
    def learnable_positions(self) -> bool:
        return self.variant == "L"

    def named(self):
        yield "weights", self.weights
        if self.variant == "L":
            yield "positions", self.positions

    def num_params(self) -> int:
        return self.weights.size * (2 if self.variant == "L" else 1)


def eid_dilation(d_b: int, layer_index: int) -> int:
    return d_b * 2 ** layer_index


def make_cd(weights: np.ndarray, d: int) -> KernelSpec:
    H, K = weights.shape
    pos = np.tile(d * np.arange(K, dtype=weights.dtype), (H, 1))
    return KernelSpec("CD", weights, pos, gamma=d * (K - 1), dilation=d)


def make_eid(weights: np.ndarray, d_b: int, layer_index: int) -> KernelSpec:
    H, K = weights.shape
    d = eid_dilation(d_b, layer_index)
    pos = np.tile(d * np.arange(K, dtype=weights.dtype), (H, 1))
    return KernelSpec("EID", weights, pos, gamma=d * (K - 1), dilation=d_b, layer_index=layer_index)


def make_l(weights: np.ndarray, positions: np.ndarray, gamma: int, sigma: float = DEFAULT_SIGMA) -> KernelSpec:
    return KernelSpec("L", weights, positions, gamma=gamma, sigma=sigma)


def init_positions(rng: Rng, H: int, K: int, gamma: int, mode: str, dtype=np.float32) -> np.ndarray:
    """Initial tap positions for the learnable variant.

    ``dilated`` spreads the K taps evenly over ``[0, gamma]``; ``uniform``
    draws each position independently from U[0, gamma).
    """
    if mode == "dilated":
        step = gamma / (K - 1) if K > 1 else 0.0
        return np.tile(step * np.arange(K), (H, 1)).astype(dtype)
    if mode == "uniform":
        if gamma == 0:
            return np.zeros((H, K), dtype=dtype)
        return rng.uniform(0.0, float(gamma), (H, K), dtype=dtype)
    raise ValueError(f"unknown position init {mode!r}")


def validate(spec: KernelSpec) -> None:
    p = spec.positions
    if np.any(p < 0) or np.any(p > spec.gamma):
        raise ValueError(f"tap position outside [0, {spec.gamma}]: "
                         f"min={float(p.min()):.4g}, max={float(p.max()):.4g}")
    if spec.variant in ("CD", "EID"):
        d = spec.dilation if spec.variant == "CD" else eid_dilation(spec.dilation, spec.layer_index)
        expect = d * np.arange(spec.K)
        if not np.array_equal(p, np.broadcast_to(expect, p.shape)):
            raise ValueError(f"{spec.variant} positions must equal {d}*i")
        if spec.gamma != d * (spec.K - 1):
            raise ValueError(f"{spec.variant} gamma must equal {d}*(K-1)={d * (spec.K - 1)}")


def gaussian_taps(spec: KernelSpec) -> np.ndarray:
    """Interpolation weights c[h, i, n] for the learnable variant."""
    n = np.arange(spec.gamma + 1, dtype=spec.positions.dtype)
    z = (n[None, None, :] - spec.positions[:, :, None]) / spec.sigma
    return np.exp(-0.5 * z * z)


def materialize_kernel(spec: KernelSpec) -> np.ndarray:
    """Dense kernel of shape (H, gamma + 1); column n multiplies the input delayed by n."""
    validate(spec)
    H, K = spec.weights.shape
    if spec.variant == "L":
        c = gaussian_taps(spec)
        return np.einsum("hk,hkn->hn", spec.weights, c)
    k = np.zeros((H, spec.gamma + 1), dtype=spec.weights.dtype)
    idx = spec.positions.astype(np.int64)
    np.add.at(k, (np.repeat(np.arange(H), K), idx.reshape(-1)), spec.weights.reshape(-1))
    return k


def _active_delays(spec: KernelSpec, kernel: np.ndarray) -> np.ndarray:
    if spec.variant == "L":
        return np.arange(spec.gamma + 1)
    return np.unique(spec.positions.astype(np.int64))


def causal_conv_fwd(spec: KernelSpec, u: np.ndarray):
    """Depthwise causal convolution of ``u`` (B, T, H) with zero left-padding."""
    if u.ndim != 3 or u.shape[-1] != spec.H:
        raise ShapeError(f"conv expects (B, T, {spec.H}) input, got {u.shape}")
    kernel = materialize_kernel(spec).astype(u.dtype, copy=False)
    B, T, H = u.shape
    G = spec.gamma
    up = np.concatenate([np.zeros((B, G, H), dtype=u.dtype), u], axis=1) if G else u
    delays = _active_delays(spec, kernel)
    y = np.zeros_like(u)
    for n in delays:
        y += kernel[:, n] * up[:, G - n:G - n + T]
    return y, (up, kernel, delays)


def causal_conv_bwd(spec: KernelSpec, cache, gy: np.ndarray, want_positions: Optional[bool] = None):
    """Returns ``(grad_u, grad_weights, grad_positions)``.

    ``grad_positions`` is ``None`` for CD/EID kernels; asking for it
    explicitly on those variants is an error.
    """
    if want_positions and spec.variant != "L":
        raise ValueError(f"{spec.variant} kernels have fixed positions; no position gradient exists")
    up, kernel, delays = cache
    B, T, H = gy.shape
    G = spec.gamma
    gup = np.zeros_like(up)
    gk = np.zeros((H, G + 1), dtype=np.float64)
    for n in delays:
        window = up[:, G - n:G - n + T]
        gk[:, n] = np.einsum("bth,bth->h", gy, window)
        gup[:, G - n:G - n + T] += kernel[:, n] * gy
    gu = gup[:, G:] if G else gup

    if spec.variant == "L":
        c = gaussian_taps(spec).astype(np.float64)
        n = np.arange(G + 1, dtype=np.float64)
        gw = np.einsum("hn,hkn->hk", gk, c)
        dc = c * (n[None, None, :] - spec.positions[:, :, None].astype(np.float64)) / spec.sigma ** 2
        gp = spec.weights.astype(np.float64) * np.einsum("hn,hkn->hk", gk, dc)
        return gu, gw.astype(spec.weights.dtype), gp.astype(spec.positions.dtype)
    idx = spec.positions.astype(np.int64)
    gw = np.take_along_axis(gk, idx, axis=1)
    return gu, gw.astype(spec.weights.dtype), None


def clamp_positions(spec: KernelSpec) -> KernelSpec:
    if spec.variant != "L":
        raise ValueError("only learnable (L) kernels have positions to clamp")
    return replace(spec, positions=np.clip(spec.positions, 0, spec.gamma))


def receptive_field(specs: Sequence[KernelSpec]) -> int:
    """Global receptive field of stacked causal kernels.

    Each layer with largest delay ``gamma`` spans ``gamma + 1`` timesteps,
    so R = 1 + sum(span - 1) = 1 + sum(gamma).
    """
    if len(specs) == 0:
        raise ValueError("receptive field needs at least one layer")
    return 1 + sum(int(s.gamma) for s in specs)


def receptive_field_from_spans(spans: Sequence[int]) -> int:
    if len(spans) == 0:
        raise ValueError("receptive field needs at least one layer")
    return 1 + sum(int(s) - 1 for s in spans)


def effective_gamma(spec: KernelSpec) -> int:
    """Buffer depth actually needed at inference.

    For L kernels the Gaussian is cut at 3 sigma past the furthest tap;
    the dense kernel never reaches beyond ``gamma`` anyway.
    """
    if spec.variant != "L":
        return int(spec.gamma)
    reach = math.ceil(float(np.max(spec.positions)) + TRUNC_SIGMAS * spec.sigma)
    return int(min(spec.gamma, max(reach, 0)))


# -- streaming inference -------------------------------------------------------------

class ConvRingBuffer:
    """Circular store of the last ``capacity`` input vectors of one conv layer."""

    def __init__(self, capacity: int, H: int, dtype=np.float64, batch: Optional[int] = None):
        self.capacity = int(capacity)
        self.H = H
        lead = () if batch is None else (batch,)
        self.data = np.zeros((self.capacity,) + lead + (H,), dtype=dtype)
        self.cursor = 0  # next slot to write

    def past(self, n: int) -> np.ndarray:
        """Input from ``n`` steps ago (1 <= n <= capacity)."""
        return self.data[(self.cursor - n) % self.capacity]

    def push(self, u_t: np.ndarray) -> None:
        if self.capacity == 0:
            return
        self.data[self.cursor] = u_t
        self.cursor = (self.cursor + 1) % self.capacity

    def reset(self) -> None:
        self.data[:] = 0
        self.cursor = 0


def streaming_kernel(spec: KernelSpec, truncate: bool = False) -> np.ndarray:
    k = materialize_kernel(spec)
    if truncate and spec.variant == "L":
        k = k[:, :effective_gamma(spec) + 1]
    return k


def stream_step(buf: ConvRingBuffer, spec: KernelSpec, u_t: np.ndarray,
                kernel: Optional[np.ndarray] = None) -> np.ndarray:
    """Consume one input vector and emit the matching convolution output.

    ``kernel`` may be precomputed with :func:`streaming_kernel`; its width
    must be ``buf.capacity + 1``.
    """
    if kernel is None:
        kernel = streaming_kernel(spec)
    if kernel.shape[1] != buf.capacity + 1:
        raise ValueError(f"ring buffer capacity {buf.capacity} does not match kernel span "
                         f"{kernel.shape[1] - 1}")
    if u_t.shape[-1] != spec.H:
        raise ShapeError(f"stream input has {u_t.shape[-1]} channels, kernel has {spec.H}")
    y = kernel[:, 0] * u_t
    for n in range(1, buf.capacity + 1):
        if np.any(kernel[:, n]):
            y = y + kernel[:, n] * buf.past(n)
    buf.push(u_t)
    return y


def stream_sequence(spec: KernelSpec, u: np.ndarray, truncate: bool = False) -> np.ndarray:
    """Run a (T, H) sequence through a fresh ring buffer one step at a time."""
    kernel = streaming_kernel(spec, truncate)
    buf = ConvRingBuffer(kernel.shape[1] - 1, spec.H, dtype=u.dtype)
    return np.stack([stream_step(buf, spec, u_t, kernel) for u_t in u])
