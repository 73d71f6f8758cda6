"""Single-file checkpoint container.

Layout::

    b"MGCK1\\n" | u64 LE length of TOC | TOC (canonical JSON) | tensor blobs

The TOC carries the network config, free-form metadata and, for every
tensor, its name, offset into the blob section, length and SHA-256 digest.
Each blob is an MGT1-encoded tensor.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import NetworkConfig, NetworkParams, params_from_arrays
from .numcore import tensor_from_bytes, tensor_to_bytes

MAGIC = b"MGCK1\n"


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, params: NetworkParams, meta: dict | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    tensors = {f"param.{k}": v for k, v in params.named()}
    for k, v in (extra_tensors or {}).items():
        tensors[f"extra.{k}"] = v
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        blob = tensor_to_bytes(np.asarray(arr))
        entries.append({"name": name, "offset": offset, "nbytes": len(blob),
                        "sha256": hashlib.sha256(blob).hexdigest()})
        blobs.append(blob)
        offset += len(blob)
    toc = canonical_json({"config": params.config.to_dict(), "meta": meta or {}, "entries": entries})
    toc_bytes = toc.encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(toc_bytes)))
        fh.write(toc_bytes)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(params, meta, extra_tensors)``; raises on any digest mismatch."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (toc_len,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        toc = json.loads(data[pos:pos + toc_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt table of contents") from exc
    base = pos + toc_len
    arrays, extra = {}, {}
    for e in toc["entries"]:
        start = base + e["offset"]
        blob = data[start:start + e["nbytes"]]
        if len(blob) != e["nbytes"] or hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise CheckpointError(f"{path}: digest mismatch for tensor {e['name']!r}")
        arr, _ = tensor_from_bytes(blob)
        if e["name"].startswith("param."):
            arrays[e["name"][len("param."):]] = arr
        else:
            extra[e["name"][len("extra."):]] = arr
    config = NetworkConfig.from_dict(toc["config"])
    return params_from_arrays(config, arrays), toc["meta"], extra
