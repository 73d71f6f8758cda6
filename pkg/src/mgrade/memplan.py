"""Inference memory footprint: parameter floats plus convolution buffer floats.

A causal kernel whose largest delay is Gamma needs the last Gamma inputs of
each of its H channels, so a network stores ``H * sum_l Gamma_l`` buffered
activations. For learnable-position kernels Gamma_l is the effective reach
of the trained taps (furthest position plus three Gaussian widths, capped at
the configured maximum).

Sweep CSV header: ``variant,L,H,K,d,d_b,gamma,params,buffer,total,reference_params,reference_total,flag``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from . import dcls
from .model import NetworkConfig, NetworkParams, count_params

SWEEP_HEADER = ("variant", "L", "H", "K", "d", "d_b", "gamma", "params", "buffer", "total",
                "reference_params", "reference_total", "flag")
FLOAT_BYTES = {"f32": 4, "f64": 8}
DISCREPANCY = 0.05


@dataclass
class MemoryReport:
    variant: str
    components: dict
    layer_gammas: list
    H: int
    param_mem: int
    buffer_mem: int
    optimizer_mem: int = 0
    notes: list = field(default_factory=list)

    @property
    def total_mem(self) -> int:
        return self.param_mem + self.buffer_mem

    def to_bytes(self, precision: str = "f32") -> dict:
        b = FLOAT_BYTES[precision]
        return {"param_bytes": self.param_mem * b, "buffer_bytes": self.buffer_mem * b,
                "total_bytes": self.total_mem * b}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_mem"] = self.total_mem
        return d


def variant_name(config: NetworkConfig) -> str:
    if config.conv == "none":
        return "minGRU" if config.mixer == "mingru" else "MLP"
    prefix = "mGRADE" if config.mixer == "mingru" else "TCN"
    return f"{prefix}-{config.conv}"


def layer_gammas(config: NetworkConfig, params: Optional[NetworkParams] = None,
                 gamma_bound: Optional[int] = None) -> list[int]:
    if config.conv == "none":
        return [0] * config.L
    if config.conv != "L":
        return [config.layer_gamma(l) for l in range(config.L)]
    if params is not None:
        out = [dcls.effective_gamma(dcls.clamp_positions(lp.conv)) for lp in params.layers]
        return out if gamma_bound is None else [min(g, gamma_bound) for g in out]
    if gamma_bound is None:
        raise ValueError("learnable-position kernels need trained positions or an explicit gamma bound")
    return [min(int(gamma_bound), config.gamma)] * config.L


def footprint(config: NetworkConfig, params: Optional[NetworkParams] = None,
              gamma_bound: Optional[int] = None, optimizer_state: bool = False) -> MemoryReport:
    """Parameter and buffer memory in float elements.

    ``params`` supplies trained positions for learnable kernels;
    ``gamma_bound`` caps every layer's reach instead. ``optimizer_state``
    adds the two Adam moment tensors (training-time only).
    """
    if params is not None and params.config.to_dict() != config.to_dict():
        raise ValueError("parameters were built for a different network config")
    counts = count_params(config)
    gammas = layer_gammas(config, params, gamma_bound)
    notes = []
    if config.encoder_bias:
        notes.append(f"encoder bias ({counts.enc_bias} floats) stored at runtime but not counted")
    return MemoryReport(
        variant=variant_name(config),
        components=counts.to_dict(),
        layer_gammas=gammas,
        H=config.H,
        param_mem=counts.total,
        buffer_mem=config.H * sum(gammas),
        optimizer_mem=2 * counts.stored if optimizer_state else 0,
        notes=notes,
    )


# -- reference points ----------------------------------------------------------------

def _scifar(**kw) -> NetworkConfig:
    base = dict(L=6, H=32, H_in=1, H_out=10, head="classify-last", loss="ce", use_mlp=True, use_norm=True)
    base.update(kw)
    return NetworkConfig(**base)


def reference_points() -> list[tuple[str, NetworkConfig, dict, float, float]]:
    """(label, config, footprint kwargs, expected params, expected total) for the
    grayscale sCIFAR iso-parameter models and the position-training ablation."""
    return [
        ("minGRU", _scifar(conv="none"), {}, 39e3, 39e3),
        ("TCN-CD", _scifar(conv="CD", mixer="relu", K=64, d=1), {}, 39e3, 51e3),
        ("mGRADE-CD", _scifar(conv="CD", K=8, d=32), {}, 41e3, 84e3),
        ("TCN-EID", _scifar(conv="EID", mixer="relu", K=64, d_b=1), {}, 39e3, 101e3),
        ("mGRADE-EID", _scifar(conv="EID", K=16, d_b=2), {}, 42e3, 87e3),
        ("mGRADE-L dilated", _scifar(conv="L", K=8, gamma=256), {"gamma_bound": 256}, 44e3, 86e3),
        ("mGRADE-L uniform", _scifar(conv="L", K=16, gamma=128, position_init="uniform"),
         {"gamma_bound": 128}, 48e3, 71e3),
    ]


def _flag(report: MemoryReport, ref_params, ref_total) -> str:
    if ref_params is None:
        return ""
    bad = []
    if abs(report.param_mem / ref_params - 1) > DISCREPANCY:
        bad.append("params")
    if abs(report.total_mem / ref_total - 1) > DISCREPANCY:
        bad.append("total")
    return "" if not bad else "not reproduced: " + "+".join(bad)


def sweep_rows(configs, footprint_kwargs=None, references=None) -> list[dict]:
    configs = list(configs)
    if not configs:
        raise ValueError("empty config grid")
    footprint_kwargs = footprint_kwargs or [{}] * len(configs)
    references = references or [(None, None)] * len(configs)
    rows = []
    for cfg, kw, (rp, rt) in zip(configs, footprint_kwargs, references):
        if cfg.conv == "L" and not kw:
            kw = {"gamma_bound": cfg.gamma}
        rep = footprint(cfg, **kw)
        rows.append({
            "variant": rep.variant, "L": cfg.L, "H": cfg.H, "K": cfg.K,
            "d": cfg.d if cfg.conv == "CD" else "", "d_b": cfg.d_b if cfg.conv == "EID" else "",
            "gamma": max(rep.layer_gammas) if rep.layer_gammas else 0,
            "params": rep.param_mem, "buffer": rep.buffer_mem, "total": rep.total_mem,
            "reference_params": "" if rp is None else int(rp),
            "reference_total": "" if rt is None else int(rt),
            "flag": _flag(rep, rp, rt),
        })
    return rows


def sweep_report(configs, footprint_kwargs=None, references=None) -> str:
    """CSV table with one row per config."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_HEADER, lineterminator="\n")
    w.writeheader()
    for row in sweep_rows(configs, footprint_kwargs, references):
        w.writerow(row)
    return buf.getvalue()


def reference_report() -> str:
    pts = reference_points()
    return sweep_report([p[1] for p in pts], [p[2] for p in pts], [(p[3], p[4]) for p in pts])


def grid(base: NetworkConfig, **axes) -> list[NetworkConfig]:
    """Cartesian product of config overrides, e.g. ``grid(cfg, K=[8, 64], d=[1, 32])``."""
    configs = [base]
    for key, values in axes.items():
        configs = [replace(c, **{key: v}) for c in configs for v in values]
    return configs


def report_json(report: MemoryReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
