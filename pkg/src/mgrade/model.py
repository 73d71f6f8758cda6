"""Full network: encoder -> N x (conv -> minGRU + skip -> MLP + skip -> norm) -> decoder."""

from __future__ import annotations

import difflib
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Optional

import numpy as np

from . import dcls
from .dcls import KernelSpec
from .layers import (LinearParams, MlpParams, NormParams, init_linear, init_mlp, init_norm,
                     layernorm_bwd, layernorm_fwd, linear_bwd, linear_fwd, mlp_bwd, mlp_fwd)
from .mingru import GruParams, gru_bwd, gru_fwd, gru_step, init_gru
from .numcore import PRECISIONS, Rng, ShapeError

CONV_KINDS = ("CD", "EID", "L", "none")
MIXERS = ("mingru", "relu")
HEADS = ("classify-last", "classify-mean", "classify-per-step", "regress-per-step")
LOSSES = ("ce", "mse", "mase")


class ConfigError(ValueError):
    pass


def _suggest(key: str, valid) -> str:
    close = difflib.get_close_matches(key, list(valid), n=1)
    return f"; did you mean {close[0]!r}?" if close else ""


@dataclass
class NetworkConfig:
    L: int = 1
    H: int = 16
    H_in: int = 1
    H_out: int = 1
    conv: str = "L"
    K: int = 2
    d: int = 1
    d_b: int = 1
    gamma: int = 2
    sigma: float = dcls.DEFAULT_SIGMA
    position_init: str = "dilated"
    mixer: str = "mingru"
    use_mlp: bool = True
    use_norm: bool = True
    encoder_bias: bool = True
    head: str = "regress-per-step"
    loss: str = "mse"
    precision: str = "f32"
    scan_mode: str = "scan"

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if self.H < 1 or self.H_in < 1 or self.H_out < 1:
            raise ConfigError("H, H_in and H_out must be >= 1")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        for name, value, allowed in (("conv", self.conv, CONV_KINDS), ("mixer", self.mixer, MIXERS),
                                     ("head", self.head, HEADS), ("loss", self.loss, LOSSES),
                                     ("precision", self.precision, tuple(PRECISIONS)),
                                     ("position_init", self.position_init, ("dilated", "uniform")),
                                     ("scan_mode", self.scan_mode, ("scan", "sequential"))):
            if value not in allowed:
                raise ConfigError(f"{name}={value!r} not in {allowed}{_suggest(str(value), allowed)}")
        if self.head.startswith("classify") and self.loss != "ce":
            raise ConfigError(f"head {self.head} needs loss 'ce', got {self.loss!r}")
        if self.head == "regress-per-step" and self.loss == "ce":
            raise ConfigError("regression head cannot use cross-entropy")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def layer_gamma(self, layer: int) -> int:
        if self.conv == "CD":
            return self.d * (self.K - 1)
        if self.conv == "EID":
            return dcls.eid_dilation(self.d_b, layer) * (self.K - 1)
        if self.conv == "L":
            return self.gamma
        return 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in fields(cls)}
        for key in d:
            if key not in names:
                raise ConfigError(f"unknown network config key {key!r}{_suggest(key, names)}")
        return cls(**d)


@dataclass
class LayerParams:
    conv: Optional[KernelSpec] = None
    gru: Optional[GruParams] = None
    mlp: Optional[MlpParams] = None
    norm: Optional[NormParams] = None

    def named(self):
        for part in ("conv", "gru", "mlp", "norm"):
            sub = getattr(self, part)
            if sub is not None:
                for name, arr in sub.named():
                    yield f"{part}.{name}", arr


@dataclass
class NetworkParams:
    config: NetworkConfig
    encoder: LinearParams
    layers: list = field(default_factory=list)
    decoder: LinearParams = None

    def named(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self.encoder.named():
            yield f"encoder.{name}", arr
        for i, lp in enumerate(self.layers):
            for name, arr in lp.named():
                yield f"layers.{i}.{name}", arr
        for name, arr in self.decoder.named():
            yield f"decoder.{name}", arr

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named())

    def num_stored(self) -> int:
        return sum(a.size for _, a in self.named())

    def copy(self) -> "NetworkParams":
        return params_from_arrays(self.config, {k: v.copy() for k, v in self.named()})


# -- construction -------------------------------------------------------------

def init_network(config: NetworkConfig, seed: int = 0) -> NetworkParams:
    """Fan-in uniform initialisation, fully determined by ``seed``."""
    rng = Rng(seed)
    dt = config.dtype
    H = config.H
    encoder = init_linear(rng.split(0), config.H_in, H, bias=config.encoder_bias, dtype=dt)
    layers = []
    for l in range(config.L):
        lr = rng.split(100 + l)
        conv = None
        if config.conv != "none":
            K = config.K
            w = lr.split(0).uniform(-1 / np.sqrt(K), 1 / np.sqrt(K), (H, K), dtype=dt)
            if config.conv == "CD":
                conv = dcls.make_cd(w, config.d)
            elif config.conv == "EID":
                conv = dcls.make_eid(w, config.d_b, l)
            else:
                pos = dcls.init_positions(lr.split(1), H, K, config.gamma, config.position_init, dt)
                conv = dcls.make_l(w, pos, config.gamma, config.sigma)
        gru = init_gru(lr.split(2), H, dt) if config.mixer == "mingru" else None
        mlp = init_mlp(lr.split(3), H, dt) if config.use_mlp else None
        norm = init_norm(H, dt) if config.use_norm else None
        layers.append(LayerParams(conv, gru, mlp, norm))
    decoder = init_linear(rng.split(1), H, config.H_out, bias=False, dtype=dt)
    return NetworkParams(config, encoder, layers, decoder)


def params_from_arrays(config: NetworkConfig, arrays: dict[str, np.ndarray]) -> NetworkParams:
    """Rebuild a parameter tree from its flat ``named()`` mapping."""
    template = init_network(config, seed=0)
    missing = set(dict(template.named())) - set(arrays)
    extra = set(arrays) - set(dict(template.named()))
    if missing or extra:
        raise ShapeError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    out = _map_tree(template, lambda name, arr: np.array(arrays[name], dtype=arr.dtype).reshape(arr.shape))
    return out


def _map_tree(params: NetworkParams, fn) -> NetworkParams:
    """Apply ``fn(name, array)`` to every stored array, returning a new tree."""
    def lin(prefix, p):
        return LinearParams(fn(f"{prefix}.W", p.W), None if p.b is None else fn(f"{prefix}.b", p.b))

    layers = []
    for i, lp in enumerate(params.layers):
        pre = f"layers.{i}"
        conv = None
        if lp.conv is not None:
            c = lp.conv
            w = fn(f"{pre}.conv.weights", c.weights)
            pos = fn(f"{pre}.conv.positions", c.positions) if c.variant == "L" else c.positions.copy()
            conv = KernelSpec(c.variant, w, pos, c.gamma, c.sigma, c.dilation, c.layer_index)
        gru = None if lp.gru is None else GruParams(*(fn(f"{pre}.gru.{n}", a) for n, a in lp.gru.named()))
        mlp = None if lp.mlp is None else MlpParams(*(fn(f"{pre}.mlp.{n}", a) for n, a in lp.mlp.named()))
        norm = None if lp.norm is None else NormParams(*(fn(f"{pre}.norm.{n}", a) for n, a in lp.norm.named()))
        layers.append(LayerParams(conv, gru, mlp, norm))
    return NetworkParams(params.config, lin("encoder", params.encoder), layers, lin("decoder", params.decoder))


def zeros_like(params: NetworkParams) -> NetworkParams:
    return _map_tree(params, lambda name, a: np.zeros_like(a))


# -- forward / backward -----------------------------------------------------------

def layer_fwd(lp: LayerParams, x: np.ndarray, config: NetworkConfig):
    """One mGRADE layer. Returns ``(y, hidden, cache)``; ``hidden`` is the
    recurrent output before the skip connection."""
    if x.ndim != 3 or x.shape[-1] != config.H:
        raise ShapeError(f"layer expects (B, T, {config.H}) input, got {x.shape}")
    cache = {}
    if lp.conv is not None:
        c, cache["conv"] = dcls.causal_conv_fwd(lp.conv, x)
    else:
        c = x
    if lp.gru is not None:
        r, cache["gru"] = gru_fwd(lp.gru, c, mode=config.scan_mode)
    else:
        r = np.maximum(c, 0)
        cache["relu"] = c > 0
    g = c + r
    if lp.mlp is not None:
        mo, cache["mlp"] = mlp_fwd(lp.mlp, g)
        m = g + mo
    else:
        m = g
    if lp.norm is not None:
        y, cache["norm"] = layernorm_fwd(lp.norm, m)
    else:
        y = m
    return y, r, cache


def layer_bwd(lp: LayerParams, cache, gy: np.ndarray, g_hidden: Optional[np.ndarray] = None):
    grads = LayerParams()
    if lp.norm is not None:
        gm, grads.norm = layernorm_bwd(lp.norm, cache["norm"], gy)
    else:
        gm = gy
    gg = gm
    if lp.mlp is not None:
        gmlp, grads.mlp = mlp_bwd(lp.mlp, cache["mlp"], gm)
        gg = gm + gmlp
    gr = gg if g_hidden is None else gg + g_hidden
    if lp.gru is not None:
        gc_r, grads.gru, _ = gru_bwd(lp.gru, cache["gru"], gr)
    else:
        gc_r = gr * cache["relu"]
    gc = gg + gc_r
    if lp.conv is not None:
        gx, gw, gp = dcls.causal_conv_bwd(lp.conv, cache["conv"], gc)
        c = lp.conv
        grads.conv = KernelSpec(c.variant, gw, gp if gp is not None else np.zeros_like(c.positions),
                                c.gamma, c.sigma, c.dilation, c.layer_index)
    else:
        gx = gc
    return gx, grads


def network_fwd(params: NetworkParams, u: np.ndarray, keep_cache: bool = True):
    """Returns ``(outputs, aux)``; ``aux`` holds hidden states and the backward cache.

    Output shape is (B, H_out) for ``classify-last``/``classify-mean`` heads
    and (B, T, H_out) otherwise.
    """
    cfg = params.config
    if u.ndim != 3 or u.shape[-1] != cfg.H_in:
        raise ShapeError(f"network expects (B, T, {cfg.H_in}) input, got {u.shape}")
    u = u.astype(cfg.dtype, copy=False)
    x, enc_cache = linear_fwd(params.encoder, u)
    caches, hiddens, outs = [], [], []
    for lp in params.layers:
        x, hidden, cache = layer_fwd(lp, x, cfg)
        caches.append(cache)
        hiddens.append(hidden)
        outs.append(x)
    T = x.shape[1]
    if cfg.head == "classify-last":
        feat = x[:, -1]
    elif cfg.head == "classify-mean":
        feat = x.mean(axis=1)
    else:
        feat = x
    out, dec_cache = linear_fwd(params.decoder, feat)
    aux = {"hiddens": hiddens, "layer_outputs": outs, "T": T}
    if keep_cache:
        aux["cache"] = (enc_cache, caches, dec_cache)
    return out, aux


def network_bwd(params: NetworkParams, aux, gout: np.ndarray) -> NetworkParams:
    cfg = params.config
    enc_cache, caches, dec_cache = aux["cache"]
    gfeat, g_dec = linear_bwd(params.decoder, dec_cache, gout)
    last = aux["layer_outputs"][-1]
    if cfg.head == "classify-last":
        gx = np.zeros_like(last)
        gx[:, -1] = gfeat
    elif cfg.head == "classify-mean":
        gx = np.broadcast_to(gfeat[:, None, :] / aux["T"], last.shape).copy()
    else:
        gx = gfeat
    layer_grads = [None] * len(params.layers)
    for i in reversed(range(len(params.layers))):
        gx, layer_grads[i] = layer_bwd(params.layers[i], caches[i], gx)
    _, g_enc = linear_bwd(params.encoder, enc_cache, gx)
    return NetworkParams(cfg, g_enc, layer_grads, g_dec)


# -- parameter accounting ------------------------------------------------------------

@dataclass
class ParamBreakdown:
    enc: int
    enc_bias: int
    conv: int
    rec: int
    mlp: int
    norm: int
    dec: int
    L: int

    @property
    def per_layer(self) -> int:
        return self.conv + self.rec + self.mlp + self.norm

    @property
    def total(self) -> int:
        """Network parameter memory as composed component by component
        (encoder counted as H_in x H)."""
        return self.enc + self.dec + self.L * self.per_layer

    @property
    def stored(self) -> int:
        """Every float held at runtime, including the encoder bias."""
        return self.total + self.enc_bias

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(per_layer=self.per_layer, total=self.total, stored=self.stored)
        return d


def count_params(config: NetworkConfig) -> ParamBreakdown:
    H, K = config.H, config.K
    conv = 0
    if config.conv in ("CD", "EID"):
        conv = K * H
    elif config.conv == "L":
        conv = 2 * K * H
    return ParamBreakdown(
        enc=config.H_in * H,
        enc_bias=H if config.encoder_bias else 0,
        conv=conv,
        rec=2 * H * H + 2 * H if config.mixer == "mingru" else 0,
        mlp=4 * H * H + 3 * H if config.use_mlp else 0,
        norm=2 * H if config.use_norm else 0,
        dec=H * config.H_out,
        L=config.L,
    )


# -- streaming inference --------------------------------------------------------------

class StreamingNetwork:
    """Step-by-step inference with constant memory: one ring buffer and one
    recurrent vector per layer."""

    def __init__(self, params: NetworkParams, batch: int = 1, truncate: bool = False):
        self.params = params
        cfg = params.config
        self.batch = batch
        dt = cfg.dtype
        self.kernels = []
        self.buffers = []
        for lp in params.layers:
            if lp.conv is not None:
                k = dcls.streaming_kernel(lp.conv, truncate).astype(dt)
                self.kernels.append(k)
                self.buffers.append(dcls.ConvRingBuffer(k.shape[1] - 1, cfg.H, dt, batch=batch))
            else:
                self.kernels.append(None)
                self.buffers.append(None)
        self.h = [np.zeros((batch, cfg.H), dtype=dt) if lp.gru is not None else None
                  for lp in params.layers]

    def state_floats(self) -> dict:
        rec = sum(h.size for h in self.h if h is not None)
        buf = sum(b.data.size for b in self.buffers if b is not None)
        return {"recurrent": rec, "buffer": buf}

    def step(self, u_t: np.ndarray):
        """Consume one (B, H_in) input; returns (features, hiddens) for this step."""
        cfg = self.params.config
        x, _ = linear_fwd(self.params.encoder, u_t.astype(cfg.dtype, copy=False))
        hiddens = []
        for i, lp in enumerate(self.params.layers):
            if lp.conv is not None:
                c = dcls.stream_step(self.buffers[i], lp.conv, x, self.kernels[i])
            else:
                c = x
            if lp.gru is not None:
                self.h[i] = gru_step(lp.gru, c, self.h[i])
                r = self.h[i]
            else:
                r = np.maximum(c, 0)
            hiddens.append(r)
            g = c + r
            m = g + mlp_fwd(lp.mlp, g)[0] if lp.mlp is not None else g
            x = layernorm_fwd(lp.norm, m)[0] if lp.norm is not None else m
        return x, hiddens

    def run(self, u: np.ndarray) -> np.ndarray:
        """Feed a whole (B, T, H_in) sequence; returns per-step decoder outputs."""
        outs = []
        for t in range(u.shape[1]):
            feat, _ = self.step(u[:, t])
            outs.append(linear_fwd(self.params.decoder, feat)[0])
        return np.stack(outs, axis=1)
