"""Post-hoc diagnostics: nearest-neighbour overlap, PCA, probes of
unobserved Lorenz coordinates and the per-task evaluation suite.

Metrics JSON keys: ``val_MASE_obs``, ``OOD_MASE_unobs``, ``nn_overlap``,
``accuracy``, ``set_accuracy`` (only those that apply to the task).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .data import SequenceBatch
from .model import NetworkParams, network_fwd
from .training import check_compatible, mase, mase_scale, predict, task_metric


def knn_indices(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest other points (Euclidean), ties to the lower index."""
    x = np.asarray(x, dtype=np.float64)
    d = cdist(x, x, "sqeuclidean")
    np.fill_diagonal(d, np.inf)
    # stable sort keeps equal distances in index order
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def nn_overlap(original: np.ndarray, hidden: np.ndarray, k: int = 20) -> float:
    """Mean share (in percent) of each point's k nearest neighbours common to both embeddings."""
    original = np.asarray(original)
    hidden = np.asarray(hidden)
    if original.ndim != 2 or hidden.ndim != 2 or len(original) != len(hidden):
        raise ValueError(f"embeddings must be row-aligned matrices, got {original.shape} and {hidden.shape}")
    N = len(original)
    if N <= k:
        raise ValueError(f"need more than k={k} points, got {N}")
    a = knn_indices(original, k)
    b = knn_indices(hidden, k)
    hits = 0
    for i in range(N):
        hits += np.intersect1d(a[i], b[i], assume_unique=True).size
    return 100.0 * hits / (N * k)


def pca(x: np.ndarray, n_components: int):
    """Returns (projections (N, n), explained-variance ratios (n,), components (n, H))."""
    x = np.asarray(x, dtype=np.float64)
    N, H = x.shape
    if N < 2:
        raise ValueError("PCA needs at least two samples")
    if not 1 <= n_components <= H:
        raise ValueError(f"n_components must be in [1, {H}], got {n_components}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (N - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    ratios = evals / total if total > 0 else np.zeros_like(evals)
    comps = evecs[:, :n_components].T
    return xc @ comps.T, ratios[:n_components], comps


def write_pca_csv(path, projections: np.ndarray, ratios: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"pc{i + 1}" for i in range(projections.shape[1])])
        w.writerow([repr(float(r)) for r in ratios])
        for row in projections:
            w.writerow([repr(float(v)) for v in row])


def hidden_states(params: NetworkParams, inputs: np.ndarray, layer: int = -1, batch_size: int = 256) -> np.ndarray:
    """Recurrent state (the mixer output before the skip) of one layer, (N, T, H)."""
    parts = []
    for i in range(0, len(inputs), batch_size):
        _, aux = network_fwd(params, inputs[i:i + batch_size], keep_cache=False)
        parts.append(aux["hiddens"][layer])
    return np.concatenate(parts, axis=0)


def layer_features(params: NetworkParams, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Output of the last layer (the decoder's input), (N, T, H)."""
    parts = []
    for i in range(0, len(inputs), batch_size):
        _, aux = network_fwd(params, inputs[i:i + batch_size], keep_cache=False)
        parts.append(aux["layer_outputs"][-1])
    return np.concatenate(parts, axis=0)


def fit_linear_probe(features: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Least-squares map with intercept; returns (F + 1, D) coefficients."""
    X = np.concatenate([features, np.ones((len(features), 1))], axis=1)
    coef, *_ = np.linalg.lstsq(X, targets, rcond=None)
    return coef


def apply_probe(coef: np.ndarray, features: np.ndarray) -> np.ndarray:
    return features @ coef[:-1] + coef[-1]


def ood_mase(params: NetworkParams, batch: SequenceBatch) -> float:
    """MASE on the never-trained Lorenz coordinates.

    A linear read-out from the last layer's features is fitted on the first
    half of the validation trajectories and scored on the second half, so
    the number measures how much of the unobserved state the features carry.
    """
    if "ood_targets" not in batch.extras:
        raise ValueError("batch has no unobserved-coordinate targets")
    feats = layer_features(params, batch.inputs).astype(np.float64)
    y = batch.extras["ood_targets"].astype(np.float64)
    n = len(batch)
    if n < 2:
        raise ValueError("need at least two trajectories to fit and score the probe")
    cut = n // 2
    coef = fit_linear_probe(feats[:cut].reshape(-1, feats.shape[-1]), y[:cut].reshape(-1, y.shape[-1]))
    pred = apply_probe(coef, feats[cut:].reshape(-1, feats.shape[-1])).reshape(y[cut:].shape)
    return mase(pred, y[cut:])[0]


def lorenz_overlap(params: NetworkParams, batch: SequenceBatch, k: int = 20, max_points: int = 2000,
                   layer: int = -1) -> float:
    """Neighbour overlap between clean Lorenz states and hidden states.

    Points from every trajectory are pooled; an evenly strided subset of at
    most ``max_points`` keeps the O(N^2) distance matrix small.
    """
    h = hidden_states(params, batch.inputs, layer)
    s = batch.extras["states"]
    h = h.reshape(-1, h.shape[-1])
    s = s.reshape(-1, s.shape[-1])
    stride = max(1, int(np.ceil(len(s) / max_points)))
    return nn_overlap(s[::stride], h[::stride], k)


def eval_suite(params: NetworkParams, splits: dict[str, SequenceBatch], k: int = 20) -> dict:
    """Task-appropriate metrics on the evaluation split (``test`` if present, else ``val``)."""
    batch = splits.get("test", splits.get("val"))
    if batch is None:
        raise ValueError("no test or val split to evaluate")
    cfg = params.config
    check_compatible(cfg, batch)
    out = predict(params, batch.inputs)
    metrics = {}
    if batch.task == "lorenz":
        metrics["val_MASE_obs"] = mase(out, batch.targets.astype(out.dtype), mase_scale(batch.targets))[0]
        if "ood_targets" in batch.extras:
            metrics["OOD_MASE_unobs"] = ood_mase(params, batch)
        if "states" in batch.extras:
            metrics["nn_overlap"] = lorenz_overlap(params, batch, k)
    elif batch.task == "flipflop":
        metrics["set_accuracy"] = task_metric(cfg, batch, out)
    else:
        metrics["accuracy"] = task_metric(cfg, batch, out)
    return metrics


def write_metrics(path, metrics: dict) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
