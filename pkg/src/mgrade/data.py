"""Sequence batches and their on-disk cache (MGT1 tensors + JSON sidecar)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import load_tensors, save_tensors

TASKS = ("flipflop", "lorenz", "smnist", "scifar")


@dataclass
class SequenceBatch:
    inputs: np.ndarray  # (N, T, C)
    targets: np.ndarray  # (N,) labels, (N, T) labels or (N, T, D) values
    task: str
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task tag {self.task!r}")
        if self.inputs.ndim != 3:
            raise ValueError(f"inputs must be (N, T, C), got {self.inputs.shape}")
        if len(self.targets) != len(self.inputs):
            raise ValueError("inputs and targets disagree on N")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "SequenceBatch":
        return SequenceBatch(self.inputs[idx], self.targets[idx], self.task,
                             {k: v[idx] for k, v in self.extras.items()})


def _fields(batch: SequenceBatch):
    yield "inputs", batch.inputs
    yield "targets", batch.targets
    for k in sorted(batch.extras):
        yield f"extras.{k}", batch.extras[k]


def save_dataset(out_dir, splits: dict[str, SequenceBatch], provenance: dict) -> Path:
    """Write one tensor file per split plus ``dataset.json`` describing them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sidecar = {"provenance": provenance, "splits": {}}
    for name, batch in splits.items():
        entries, tensors = [], []
        for fname, arr in _fields(batch):
            arr = np.asarray(arr)
            entries.append({"name": fname, "dtype": arr.dtype.str})
            store = arr if arr.dtype in (np.float32, np.float64) else arr.astype(np.float64)
            tensors.append(store)
        save_tensors(out / f"{name}.mgt", tensors)
        sidecar["splits"][name] = {"task": batch.task, "fields": entries, "n": len(batch)}
    (out / "dataset.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path) -> tuple[dict[str, SequenceBatch], dict]:
    root = Path(path)
    side_path = root / "dataset.json"
    if not side_path.exists():
        raise FileNotFoundError(f"no dataset.json under {root}")
    sidecar = json.loads(side_path.read_text())
    splits = {}
    for name, info in sidecar["splits"].items():
        tensors = load_tensors(root / f"{name}.mgt")
        if len(tensors) != len(info["fields"]):
            raise ValueError(f"split {name}: expected {len(info['fields'])} tensors, found {len(tensors)}")
        vals = {}
        for entry, arr in zip(info["fields"], tensors):
            vals[entry["name"]] = arr.astype(np.dtype(entry["dtype"]))
        extras = {k[len("extras."):]: v for k, v in vals.items() if k.startswith("extras.")}
        splits[name] = SequenceBatch(vals["inputs"], vals["targets"], info["task"], extras)
    return splits, sidecar["provenance"]
