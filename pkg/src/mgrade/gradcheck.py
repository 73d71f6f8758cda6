"""Finite-difference audit of every hand-written backward pass.

Each check perturbs one tensor element at a time in float64 and compares the
central difference of ``sum(forward(.) * upstream)`` with the analytic
gradient. The end-to-end check does the same for a full loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dcls
from .layers import (init_linear, init_mlp, layernorm_bwd, layernorm_fwd, linear_bwd, linear_fwd,
                     mlp_bwd, mlp_fwd, NormParams)
from .mingru import gru_bwd, gru_fwd, init_gru
from .model import NetworkConfig, init_network, network_bwd, network_fwd
from .numcore import Rng, finite_diff_grad, grad_rel_error
from .training import compute_loss

TOLERANCE = 1e-4


@dataclass
class GradReport:
    entries: list = field(default_factory=list)  # (name, rel_error)
    tolerance: float = TOLERANCE

    def add(self, name: str, err: float) -> None:
        self.entries.append((name, float(err)))

    @property
    def max_error(self) -> float:
        return max((e for _, e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for _, e in self.entries)

    def failures(self):
        return [(n, e) for n, e in self.entries if not e < self.tolerance]

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "max_rel_error": self.max_error, "passed": self.passed,
                "checks": [{"name": n, "rel_error": e} for n, e in self.entries]}


def _audit(report: GradReport, name: str, target: np.ndarray, loss_fn, analytic: np.ndarray) -> None:
    """Numerically differentiate ``loss_fn()`` with respect to ``target``, in place."""
    saved = target.copy()

    def f(x):
        target[...] = x
        return loss_fn()

    numeric = finite_diff_grad(f, saved)
    target[...] = saved
    report.add(name, grad_rel_error(analytic, numeric))


def check_layers(seed: int = 0, B: int = 2, T: int = 8, H: int = 4) -> GradReport:
    """Audit linear, MLP, layer norm, minGRU and the three conv variants in isolation."""
    rng = Rng(seed)
    report = GradReport()
    f64 = np.float64
    x = rng.split(0).normal((B, T, H), dtype=f64)
    gy = rng.split(1).normal((B, T, H), dtype=f64)

    def run(prefix, fwd, bwd, params_named, grads_named):
        def loss():
            return float(np.sum(fwd()[0] * gy))
        y, cache = fwd()
        gx, grads = bwd(cache)
        _audit(report, f"{prefix}.input", x, loss, gx)
        g = dict(grads_named(grads))
        for name, arr in params_named():
            _audit(report, f"{prefix}.{name}", arr, loss, g[name])

    lin = init_linear(rng.split(2), H, H, bias=True, dtype=f64)
    run("linear", lambda: linear_fwd(lin, x), lambda c: linear_bwd(lin, c, gy), lin.named, lambda g: g.named())

    mlp = init_mlp(rng.split(3), H, dtype=f64)
    run("mlp", lambda: mlp_fwd(mlp, x), lambda c: mlp_bwd(mlp, c, gy), mlp.named, lambda g: g.named())

    norm = NormParams(1 + 0.3 * rng.split(4).normal(H, dtype=f64), 0.3 * rng.split(5).normal(H, dtype=f64))
    run("norm", lambda: layernorm_fwd(norm, x), lambda c: layernorm_bwd(norm, c, gy), norm.named,
        lambda g: g.named())

    gru = init_gru(rng.split(6), H, dtype=f64)
    for mode in ("scan", "sequential"):
        run(f"gru[{mode}]", lambda: gru_fwd(gru, x, mode=mode), lambda c: gru_bwd(gru, c, gy)[:2],
            gru.named, lambda g: g.named())

    K = 3
    w = rng.split(7).normal((H, K), dtype=f64)
    specs = {
        "CD": dcls.make_cd(w.copy(), 2),
        "EID": dcls.make_eid(w.copy(), 1, 1),
        "L": dcls.make_l(w.copy(), rng.split(8).uniform(0.2, 3.8, (H, K), dtype=f64), gamma=4, sigma=0.7),
    }
    for variant, spec in specs.items():
        def grads_named(g, spec=spec):
            gw, gp = g
            yield "weights", gw
            if gp is not None:
                yield "positions", gp
        run(f"conv[{variant}]", lambda spec=spec: dcls.causal_conv_fwd(spec, x),
            lambda c, spec=spec: (lambda r: (r[0], (r[1], r[2])))(dcls.causal_conv_bwd(spec, c, gy)),
            spec.named, grads_named)
    return report


def reference_config(**overrides) -> NetworkConfig:
    """The small model used by the end-to-end audit: 2 layers, H=4, L-conv, MLP and norm."""
    base = dict(L=2, H=4, H_in=3, H_out=2, conv="L", K=3, gamma=4, sigma=0.7, position_init="uniform",
                mixer="mingru", use_mlp=True, use_norm=True, encoder_bias=True,
                head="regress-per-step", loss="mse", precision="f64")
    base.update(overrides)
    return NetworkConfig(**base)


def check_network(config: NetworkConfig | None = None, seed: int = 0, B: int = 2, T: int = 8) -> GradReport:
    """Audit the gradient of the full loss with respect to every stored tensor."""
    cfg = config or reference_config()
    if cfg.precision != "f64":
        raise ValueError("finite-difference audit needs precision f64")
    params = init_network(cfg, seed)
    rng = Rng(seed).split(50)
    # move learnable positions off the grid so no tap sits at a clamp boundary
    for i, lp in enumerate(params.layers):
        if lp.conv is not None and lp.conv.variant == "L":
            lp.conv.positions[...] = rng.split(i).uniform(0.2, cfg.gamma - 0.2, lp.conv.positions.shape)
    u = rng.split(10).normal((B, T, cfg.H_in))
    if cfg.loss == "ce":
        shape = (B, T) if cfg.head == "classify-per-step" else (B,)
        targets = rng.split(11).integers(0, cfg.H_out, shape)
    else:
        targets = rng.split(11).normal((B, T, cfg.H_out))
        if cfg.loss == "mase":
            targets = np.cumsum(targets, axis=1)

    def loss():
        out, _ = network_fwd(params, u, keep_cache=False)
        return compute_loss(cfg, out, targets)[0]

    out, aux = network_fwd(params, u)
    _, gout = compute_loss(cfg, out, targets)
    grads = dict(network_bwd(params, aux, gout).named())
    report = GradReport()
    for name, arr in params.named():
        _audit(report, f"network.{name}", arr, loss, grads[name])
    return report


def full_audit(seed: int = 0) -> GradReport:
    report = check_layers(seed)
    for cfg in (reference_config(), reference_config(mixer="relu", conv="CD", d=2),
                reference_config(head="classify-mean", loss="ce"),
                reference_config(head="regress-per-step", loss="mase", scan_mode="sequential")):
        tag = f"{cfg.conv}/{cfg.mixer}/{cfg.head}/{cfg.loss}"
        for name, err in check_network(cfg, seed).entries:
            report.add(f"{tag}:{name}", err)
    return report
