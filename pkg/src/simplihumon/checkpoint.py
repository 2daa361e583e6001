"""Checkpoints: a JSON manifest next to one little-endian raw blob.

The manifest lists every parameter array's name, shape, dtype, byte offset and
byte length, along with the model config and any caller metadata. Output is
byte-identical for identical parameters.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, param_shapes

FORMAT_VERSION = "simplihumon-ckpt-v1"


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix == ".json":
        return path, path.with_suffix(".bin")
    return path.with_suffix(".json"), path.with_suffix(".bin")


def save_checkpoint(path, params: dict[str, Tensor], config: ModelConfig, metadata: dict | None = None, dtype="<f8") -> Path:
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    dt = np.dtype(dtype).newbyteorder("<")
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, t in params.items():
            raw = np.ascontiguousarray(t.data, dtype=dt).tobytes()
            entries.append({"name": name, "shape": list(t.data.shape), "dtype": dt.str, "offset": offset, "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    manifest = {
        "version": FORMAT_VERSION,
        "config": config.to_dict(),
        "blob": blob_path.name,
        "params": entries,
        "metadata": metadata or {},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def load_checkpoint(path, requires_grad: bool = False):
    """Returns ``(params, config, metadata)``."""
    manifest_path, _ = _paths(path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    config = ModelConfig.from_dict(manifest["config"])
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    expected = param_shapes(config)
    params = {}
    for e in manifest["params"]:
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=int)), offset=e["offset"])
        params[e["name"]] = Tensor(arr.reshape(e["shape"]).astype(np.float64), requires_grad=requires_grad)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise ValueError("checkpoint parameters do not match its model config")
    return params, config, manifest.get("metadata", {})
