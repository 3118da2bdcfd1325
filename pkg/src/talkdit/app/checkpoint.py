"""Checkpoints as a JSON manifest plus one raw little-endian float64 blob."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "talkdit-checkpoint/1"


class CheckpointError(ValueError):
    pass


class HashMismatch(CheckpointError):
    pass


def checkpoint_paths(directory, name: str) -> tuple[Path, Path]:
    d = Path(directory)
    return d / f"{name}.json", d / f"{name}.bin"


def save_checkpoint(directory, name: str, params: Mapping[str, np.ndarray], meta: dict) -> tuple[Path, Path]:
    """Write ``<name>.json`` and ``<name>.bin``; tensors are laid out in sorted name order."""
    for key in ("stage", "step", "config_hash"):
        if key not in meta:
            raise CheckpointError(f"checkpoint meta is missing {key!r}")
    manifest_path, blob_path = checkpoint_paths(directory, name)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for tname in sorted(params):
        arr = np.asarray(params[tname], dtype="<f8", order="C")
        raw = arr.tobytes()
        tensors.append({"name": tname, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format": FORMAT, **meta}
    manifest = {"header": header, "tensors": tensors, "total_bytes": offset}
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path, blob_path


def read_manifest(directory, name: str) -> dict:
    manifest_path, _ = checkpoint_paths(directory, name)
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest {manifest_path} not found")
    return json.loads(manifest_path.read_text())


def load_checkpoint(directory, name: str, expected_hash: str | None = None,
                    override: bool = False) -> tuple[dict[str, np.ndarray], dict, list[str]]:
    """Returns ``(params, header, warnings)``.

    A config-hash mismatch raises unless ``override`` is set, in which case
    it is reported in ``warnings``.
    """
    manifest = read_manifest(directory, name)
    _, blob_path = checkpoint_paths(directory, name)
    if not blob_path.exists():
        raise FileNotFoundError(f"checkpoint blob {blob_path} not found")
    blob = blob_path.read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(f"blob length {len(blob)} != manifest total {manifest['total_bytes']}")
    header = manifest["header"]
    warnings = []
    if expected_hash is not None and header.get("config_hash") != expected_hash:
        msg = f"config hash mismatch for checkpoint {name!r}"
        if not override:
            raise HashMismatch(msg + " (pass --override-hash to load anyway)")
        warnings.append(msg)
    params = {}
    expect = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if entry["offset"] != expect or entry["nbytes"] != n:
            raise CheckpointError(f"manifest entry {entry['name']!r} is not contiguous")
        arr = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(shape).astype(np.float64)
        expect += n
    if expect != len(blob):
        raise CheckpointError("manifest does not cover the whole blob")
    return params, header, warnings
