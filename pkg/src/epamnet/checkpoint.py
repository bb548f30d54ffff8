"""Weights checkpoints: a JSON manifest plus one .btf blob per tensor.

The manifest records every parameter and batchnorm buffer in module order and a
64-bit FNV-1a checksum over the concatenated blobs (same order), so two runs can
be compared by checksum alone.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import btf
from .errors import ContractError, ParseError
from .nn import Module

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1
MANIFEST = "manifest.json"


def fnv1a64(data: bytes, state: int = FNV_OFFSET) -> int:
    """64-bit FNV-1a; pass the previous result as ``state`` to hash a stream in pieces."""
    h = state
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


def _entries(module: Module) -> list[tuple[str, str, np.ndarray]]:
    out = [(name, "param", p.data) for name, p in module.named_parameters()]
    out += [(name, "buffer", b) for name, b in module.named_buffers()]
    return out


def save_checkpoint(module: Module, directory) -> str:
    """Write all tensors of ``module`` below ``directory``; returns the checksum as 16 hex digits."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h = FNV_OFFSET
    tensors = []
    for i, (name, kind, arr) in enumerate(_entries(module)):
        blob = btf.encode(arr)
        fname = f"{i:04d}.btf"
        (directory / fname).write_bytes(blob)
        h = fnv1a64(blob, h)
        tensors.append({"name": name, "kind": kind, "file": fname, "shape": list(arr.shape)})
    checksum = f"{h:016x}"
    manifest = {"format": "epamnet-checkpoint/1", "checksum_fnv1a64": checksum, "tensors": tensors}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return checksum


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise ParseError(f"no checkpoint manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if not isinstance(manifest, dict) or "tensors" not in manifest or "checksum_fnv1a64" not in manifest:
        raise ParseError(f"{path}: missing 'tensors' or 'checksum_fnv1a64'")
    return manifest


def load_checkpoint(module: Module, directory) -> str:
    """Load tensors into ``module`` in place after verifying names, shapes and the checksum."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    targets = {name: (kind, arr) for name, kind, arr in _entries(module)}
    listed = [t["name"] for t in manifest["tensors"]]
    if set(listed) != set(targets):
        missing = sorted(set(targets) - set(listed))
        extra = sorted(set(listed) - set(targets))
        raise ContractError(f"checkpoint does not match model: missing {missing[:3]}, unexpected {extra[:3]}")
    h = FNV_OFFSET
    loaded = []
    for entry in manifest["tensors"]:
        blob = (directory / entry["file"]).read_bytes()
        h = fnv1a64(blob, h)
        arr = btf.decode(blob)
        dest = targets[entry["name"]][1]
        if arr.shape != dest.shape:
            raise ContractError(f"{entry['name']}: checkpoint shape {arr.shape}, model expects {dest.shape}")
        loaded.append((dest, arr))
    if f"{h:016x}" != manifest["checksum_fnv1a64"]:
        raise ParseError(f"checkpoint checksum mismatch: manifest {manifest['checksum_fnv1a64']}, "
                         f"blobs hash to {h:016x}")
    for dest, arr in loaded:
        dest[...] = arr
    return manifest["checksum_fnv1a64"]
