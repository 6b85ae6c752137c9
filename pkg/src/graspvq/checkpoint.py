"""Checkpoints: a JSON manifest plus one little-endian float32 blob.

Layout of a checkpoint directory::

    manifest.json   version, kind, config + fingerprint, parameter table, metadata
    params.bin      parameters concatenated in manifest order
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .networks import NetworkConfig

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(RuntimeError):
    pass


def _named_tensors(groups: dict[str, nn.Module]):
    for group, module in groups.items():
        for name, t in module.state_dict().items():
            yield f"{group}.{name}", group, t


def save_checkpoint(path, groups: dict[str, nn.Module], config: NetworkConfig,
                    kind: str, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table, chunks, offset = [], [], 0
    for name, group, t in _named_tensors(groups):
        arr = t.detach().cpu().numpy().astype("<f4").ravel()
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr)
        offset += arr.size
    trainable = {g: any(p.requires_grad for p in m.parameters()) for g, m in groups.items()}
    manifest = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": config.to_dict(),
        "fingerprint": config.fingerprint(),
        "parameter_count": int(offset),
        "parameters": table,
        "trainable": trainable,
        "metadata": metadata or {},
    }
    blob = np.concatenate(chunks) if chunks else np.zeros(0, "<f4")
    (path / BLOB).write_bytes(blob.tobytes())
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no {MANIFEST} in {path}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    return manifest


def load_checkpoint(path, groups: dict[str, nn.Module], config: NetworkConfig,
                    kind: str | None = None) -> dict:
    """Fill ``groups`` in place from a checkpoint and return its manifest."""
    path = Path(path)
    manifest = read_manifest(path)
    if manifest["fingerprint"] != config.fingerprint():
        raise CheckpointError(
            f"architecture fingerprint mismatch: checkpoint {manifest['fingerprint']}, "
            f"config {config.fingerprint()}")
    if kind is not None and manifest["kind"] != kind:
        raise CheckpointError(f"expected a {kind!r} checkpoint, found {manifest['kind']!r}")
    blob = np.frombuffer((path / BLOB).read_bytes(), dtype="<f4")
    if blob.size != manifest["parameter_count"]:
        raise CheckpointError(f"blob holds {blob.size} values, manifest declares "
                              f"{manifest['parameter_count']}")
    entries = {e["name"]: e for e in manifest["parameters"]}
    expected = {name for name, _, _ in _named_tensors(groups)}
    if missing := expected - set(entries):
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for group, module in groups.items():
        state = {}
        for name, t in module.state_dict().items():
            e = entries[f"{group}.{name}"]
            if list(t.shape) != e["shape"]:
                raise CheckpointError(f"{group}.{name}: shape {e['shape']} != {list(t.shape)}")
            vals = blob[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"])
            state[name] = torch.from_numpy(vals.copy()).to(t.dtype)
        module.load_state_dict(state)
    return manifest


def config_from_checkpoint(path) -> NetworkConfig:
    return NetworkConfig.from_dict(read_manifest(path)["config"])
