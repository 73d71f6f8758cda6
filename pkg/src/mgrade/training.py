"""Losses, Adam with parameter groups, the warmup-cosine schedule and the
training loop.

Metrics CSV header: ``epoch,train_loss,val_loss,val_metric,lr``. Rows hold
only values that are a pure function of (config, data, seed), so reruns are
byte-identical; wall-clock timings go to ``timings.json`` instead.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SequenceBatch
from .model import NetworkConfig, NetworkParams, init_network, network_bwd, network_fwd
from .numcore import NumericalError, Rng, ShapeError
from .tasks.flipflop import classify_sets

CSV_HEADER = ("epoch", "train_loss", "val_loss", "val_metric", "lr")
BIAS_NAMES = {"b", "bz", "bh", "b1", "b2", "shift", "gain"}


# -- losses ----------------------------------------------------------------------

def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over every leading position; returns (loss, dlogits)."""
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"logits {logits.shape} do not match labels {labels.shape}")
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    lab = labels.astype(np.int64)
    if lab.size and (lab.min() < 0 or lab.max() >= logits.shape[-1]):
        raise ValueError(f"labels outside [0, {logits.shape[-1]})")
    picked = np.take_along_axis(logp, lab[..., None], axis=-1)[..., 0]
    n = lab.size
    loss = -float(picked.sum()) / n
    grad = np.exp(logp)
    np.put_along_axis(grad, lab[..., None], np.take_along_axis(grad, lab[..., None], axis=-1) - 1, axis=-1)
    return loss, (grad / n).astype(logits.dtype)


def mse(pred: np.ndarray, target: np.ndarray):
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} does not match target {target.shape}")
    diff = pred - target.astype(pred.dtype)
    return float(np.mean(diff * diff)), (2.0 * diff / diff.size).astype(pred.dtype)


def mase_scale(y: np.ndarray, axis: int = 1) -> float:
    """Mean absolute one-step change of a target series (the persistence MAE)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[axis] < 2:
        raise ValueError("persistence scale needs at least two timesteps")
    scale = float(np.mean(np.abs(np.diff(y, axis=axis))))
    if not scale > 0:
        raise NumericalError("persistence forecast has zero error (constant series); MASE is undefined")
    return scale


def mase(pred: np.ndarray, target: np.ndarray, scale: Optional[float] = None):
    """Mean absolute error divided by the persistence MAE of ``target``."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} does not match target {target.shape}")
    if scale is None:
        scale = mase_scale(target)
    elif not scale > 0:
        raise NumericalError("MASE scale must be positive")
    diff = pred - target.astype(pred.dtype)
    return float(np.mean(np.abs(diff))) / scale, (np.sign(diff) / (diff.size * scale)).astype(pred.dtype)


def batch_labels(config: NetworkConfig, batch: SequenceBatch) -> np.ndarray:
    """Targets in the form the configured loss expects."""
    if config.head == "classify-per-step" and batch.task == "flipflop":
        return batch.extras["set_ids"]
    return batch.targets


def compute_loss(config: NetworkConfig, out: np.ndarray, targets: np.ndarray, scale: Optional[float] = None):
    if config.loss == "ce":
        return cross_entropy(out, targets)
    if config.loss == "mse":
        return mse(out, targets)
    return mase(out, targets, scale)


# -- optimizer -------------------------------------------------------------------

def param_group(path: str) -> str:
    leaf = path.rsplit(".", 1)[-1]
    if leaf == "positions":
        return "positions"
    if leaf in BIAS_NAMES:
        return "bias"
    return "weights"


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


class Adam:
    """Adam on every group; decoupled weight decay on the ``weights`` group only.

    Updates parameters in place and clamps learnable positions to [0, gamma].
    """

    def __init__(self, params: NetworkParams, cfg: AdamConfig | None = None):
        self.cfg = cfg or AdamConfig()
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.named()}
        self.v = {k: np.zeros_like(v) for k, v in params.named()}
        self.groups = {k: param_group(k) for k in self.m}

    def step(self, params: NetworkParams, grads: NetworkParams, lr: float) -> None:
        g = dict(grads.named())
        for path, arr in g.items():
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite gradient in {path}")
        c = self.cfg
        self.step_count += 1
        bc1 = 1 - c.beta1 ** self.step_count
        bc2 = 1 - c.beta2 ** self.step_count
        for path, p in params.named():
            gp = g[path]
            m, v = self.m[path], self.v[path]
            m *= c.beta1
            m += (1 - c.beta1) * gp
            v *= c.beta2
            v += (1 - c.beta2) * gp * gp
            if self.groups[path] == "weights" and c.weight_decay:
                p *= 1 - lr * c.weight_decay
            p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)).astype(p.dtype)
        for lp in params.layers:
            if lp.conv is not None and lp.conv.variant == "L":
                np.clip(lp.conv.positions, 0, lp.conv.gamma, out=lp.conv.positions)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.m:
            self.m[k] = tensors[f"m.{k}"].astype(self.m[k].dtype)
            self.v[k] = tensors[f"v.{k}"].astype(self.v[k].dtype)
        self.step_count = step_count


def clip_global_norm(grads: NetworkParams, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(a.astype(np.float64) ** 2)) for _, a in grads.named()))
    if total > max_norm:
        for _, a in grads.named():
            a *= max_norm / total
    return total


# -- schedule ------------------------------------------------------------------------

def lr_at(epoch: float, base_lr: float, total_epochs: float, warmup: float = 0.5) -> float:
    """Linear warmup from 0 over the first ``warmup`` fraction, cosine to 0 after."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= warmup < 1:
        raise ValueError("warmup fraction must be in [0, 1)")
    e = min(max(epoch, 0.0), total_epochs)
    w = warmup * total_epochs
    if e < w:
        return base_lr * e / w
    return base_lr * 0.5 * (1 + math.cos(math.pi * (e - w) / (total_epochs - w)))


# -- evaluation ------------------------------------------------------------------------

def predict(params: NetworkParams, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = [network_fwd(params, inputs[i:i + batch_size], keep_cache=False)[0]
            for i in range(0, len(inputs), batch_size)]
    return np.concatenate(outs, axis=0)


def task_metric(config: NetworkConfig, batch: SequenceBatch, out: np.ndarray, scale=None) -> float:
    """Headline metric: set accuracy (flip-flop), MASE (Lorenz), accuracy (images)."""
    if batch.task == "flipflop":
        return float(np.mean(classify_sets(out) == batch.extras["set_ids"]))
    if batch.task == "lorenz":
        return mase(out, batch.targets.astype(out.dtype), scale)[0]
    return float(np.mean(np.argmax(out, axis=-1) == batch.targets))


def higher_is_better(task: str) -> bool:
    return task != "lorenz"


def evaluate(params: NetworkParams, batch: SequenceBatch, batch_size: int = 256) -> dict:
    cfg = params.config
    check_compatible(cfg, batch)
    out = predict(params, batch.inputs, batch_size)
    scale = mase_scale(batch.targets) if cfg.loss == "mase" or batch.task == "lorenz" else None
    loss, _ = compute_loss(cfg, out, batch_labels(cfg, batch), scale)
    return {"loss": loss, "metric": task_metric(cfg, batch, out, scale)}


def check_compatible(config: NetworkConfig, batch: SequenceBatch) -> None:
    """Raise if the network head cannot be trained or evaluated on ``batch``."""
    C = batch.inputs.shape[-1]
    if C != config.H_in:
        raise ShapeError(f"data has {C} input channels, network expects H_in={config.H_in}")
    task = batch.task
    if task in ("smnist", "scifar"):
        ok = config.head in ("classify-last", "classify-mean")
    elif task == "lorenz":
        ok = config.head == "regress-per-step" and batch.targets.shape[-1] == config.H_out
    else:
        ok = (config.head == "regress-per-step" and config.H_out == batch.targets.shape[-1]) or \
             (config.head == "classify-per-step" and config.H_out == 4)
    if not ok:
        raise ValueError(f"head {config.head!r} with H_out={config.H_out} does not fit {task} data")


# -- training loop -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    base_lr: float = 0.004
    warmup: float = 0.5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: Optional[float] = None
    seed: int = 0
    limit: Optional[int] = None
    target_metric: Optional[float] = None  # stop once the val metric reaches this
    eval_batch_size: int = 256

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        from .model import ConfigError, _suggest
        names = set(cls.__dataclass_fields__)
        for key in d:
            if key not in names:
                raise ConfigError(f"unknown training config key {key!r}{_suggest(key, names)}")
        return cls(**d)


@dataclass
class TrainResult:
    params: NetworkParams
    best_params: NetworkParams
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("nan")
    stopped_early: bool = False


def format_rows(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r["epoch"]] + [repr(float(r[k])) for k in CSV_HEADER[1:]])
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in CSV_HEADER[1:]}} for r in rows]


def train(config: NetworkConfig, splits: dict[str, SequenceBatch], tcfg: TrainConfig | None = None,
          out_dir=None, resume: bool = False, init_params: NetworkParams | None = None,
          log=None) -> TrainResult:
    """Mini-batch training with per-epoch validation.

    ``splits`` needs ``train`` and ``val``. With ``out_dir`` the run writes
    ``metrics.csv``, ``last.ckpt`` (with optimizer state), ``best.ckpt`` and
    ``timings.json``; ``resume`` picks up from ``last.ckpt`` and continues
    the epoch numbering.
    """
    tcfg = tcfg or TrainConfig()
    train_b, val_b = splits["train"], splits["val"]
    check_compatible(config, train_b)
    check_compatible(config, val_b)
    if tcfg.limit is not None:
        train_b = train_b.subset(slice(0, tcfg.limit))
    if len(train_b) == 0:
        raise ValueError("empty training split")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    params = init_params.copy() if init_params is not None else init_network(config, tcfg.seed)
    opt = Adam(params, AdamConfig(tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.weight_decay))
    better = (lambda a, b: a > b) if higher_is_better(train_b.task) else (lambda a, b: a < b)
    history, start, best_metric, best_epoch = [], 0, None, -1
    best_params = params.copy()
    if resume:
        if out is None or not (out / "last.ckpt").exists():
            raise FileNotFoundError("resume requested but no last.ckpt in the output directory")
        params, meta, extra = load_checkpoint(out / "last.ckpt")
        opt = Adam(params, opt.cfg)
        opt.load_state(extra, meta["step"])
        start = meta["epoch"] + 1
        history = read_metrics(out / "metrics.csv")[:start]
        best_metric, best_epoch = meta.get("best_metric"), meta.get("best_epoch", -1)
        best_params = load_checkpoint(out / "best.ckpt")[0] if (out / "best.ckpt").exists() else params.copy()

    train_labels = batch_labels(config, train_b)
    train_scale = mase_scale(train_b.targets) if config.loss == "mase" else None
    N = len(train_b)
    nb = math.ceil(N / tcfg.batch_size)
    root = Rng(tcfg.seed).split(7)
    timings = []
    stopped = False
    for epoch in range(start, tcfg.epochs):
        t0 = time.perf_counter()
        perm = root.split(epoch).permutation(N)
        total = 0.0
        lr = lr_at(epoch, tcfg.base_lr, tcfg.epochs, tcfg.warmup)
        for b in range(nb):
            idx = np.sort(perm[b * tcfg.batch_size:(b + 1) * tcfg.batch_size])
            outb, aux = network_fwd(params, train_b.inputs[idx])
            loss, gout = compute_loss(config, outb, train_labels[idx], train_scale)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = network_bwd(params, aux, gout)
            if tcfg.clip is not None:
                clip_global_norm(grads, tcfg.clip)
            step_lr = lr_at(epoch + b / nb, tcfg.base_lr, tcfg.epochs, tcfg.warmup)
            try:
                opt.step(params, grads, step_lr)
            except NumericalError as exc:
                raise NumericalError(f"{exc} at epoch {epoch}, batch {b}") from exc
            total += loss * len(idx)
        ev = evaluate(params, val_b, tcfg.eval_batch_size)
        row = {"epoch": epoch, "train_loss": total / N, "val_loss": ev["loss"],
               "val_metric": ev["metric"], "lr": lr}
        history.append(row)
        if best_metric is None or better(ev["metric"], best_metric):
            best_metric, best_epoch = ev["metric"], epoch
            best_params = params.copy()
            if out is not None:
                save_checkpoint(out / "best.ckpt", best_params, {"epoch": epoch, "val_metric": ev["metric"]})
        timings.append({"epoch": epoch, "seconds": time.perf_counter() - t0})
        if out is not None:
            (out / "metrics.csv").write_text(format_rows(history))
            meta = {"epoch": epoch, "step": opt.step_count, "best_metric": best_metric,
                    "best_epoch": best_epoch, "train": tcfg.to_dict()}
            save_checkpoint(out / "last.ckpt", params, meta, opt.state_tensors())
        if log is not None:
            log(f"epoch {epoch}: train {row['train_loss']:.5f} val {row['val_loss']:.5f} "
                f"metric {row['val_metric']:.5f} lr {lr:.5f}")
        if tcfg.target_metric is not None and not better(tcfg.target_metric, ev["metric"]):
            stopped = True
            break
    if out is not None:
        (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    return TrainResult(params, best_params, history, best_epoch,
                       float("nan") if best_metric is None else best_metric, stopped)
