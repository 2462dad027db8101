"""Checkpoint files: a JSON manifest next to a raw little-endian float32 blob.

Layout of ``<dir>/params.bin``: 4 magic bytes ``CDPK``, a little-endian
uint32 format version, then every tensor back to back. Manifest offsets are
byte offsets from the start of the file, so the blob can be mapped directly.
Buffers (batch-norm running statistics) are stored like parameters with
``kind = "buffer"``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .dda import SubnetConfig
from .errors import FormatError
from .model import BackboneConfig, param_report

MAGIC = b"CDPK"
VERSION = 1
HEADER = struct.Struct("<4sI")
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"
_DTYPE = np.dtype("<f4")


def _entries(state):
    ps = state.params
    for name, p in ps.params.items():
        yield name, "param", p.value
    for name, b in ps.buffers.items():
        yield name, "buffer", b


def save_checkpoint(state, directory: str | Path, extra: dict | None = None) -> dict:
    """Write manifest + blob for ``state`` and return the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    chunks, entries = [], []
    offset = HEADER.size
    for name, kind, value in _entries(state):
        data = np.ascontiguousarray(value, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(value.shape), "offset": offset,
                        "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    blob = HEADER.pack(MAGIC, VERSION) + b"".join(chunks)
    manifest = {
        "format": "cdpad-checkpoint",
        "version": VERSION,
        "dtype": "float32-le",
        "blob": BLOB_NAME,
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "parameter_count": int(state.params.count()),
        "backbone_parameter_count": int(sum(r.count for r in param_report(state.backbone))),
        "entries": entries,
        "config": {"backbone": asdict(state.backbone_config), "subnet": asdict(state.subnet_config)},
        "seed": state.seed,
        "stages": list(state.stages),
        "extra": extra or {},
    }
    (directory / BLOB_NAME).write_bytes(blob)
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise FormatError(f"no checkpoint manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON") from exc
    if manifest.get("format") != "cdpad-checkpoint":
        raise FormatError(f"{path}: not a checkpoint manifest")
    if manifest.get("version") != VERSION:
        raise FormatError(f"{path}: checkpoint version {manifest.get('version')} != supported {VERSION}")
    return manifest


def load_checkpoint(directory: str | Path):
    """Rebuild a TrainState from a checkpoint directory."""
    from .trainer import build_state

    directory = Path(directory)
    manifest = read_manifest(directory)
    cfg = manifest["config"]
    state = build_state(BackboneConfig(**cfg["backbone"]), SubnetConfig(**cfg["subnet"]), seed=manifest["seed"])
    read_params_into(state, directory, manifest)
    state.stages = list(manifest["stages"])
    return state


def read_params_into(state, directory: str | Path, manifest: dict | None = None) -> None:
    """Overwrite ``state`` parameters and buffers from a checkpoint blob."""
    directory = Path(directory)
    manifest = manifest or read_manifest(directory)
    path = directory / manifest["blob"]
    if not path.is_file():
        raise FormatError(f"checkpoint blob {path} is missing")
    blob = path.read_bytes()
    if len(blob) < HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: blob version {version} != supported {VERSION}")
    if len(blob) != manifest["blob_bytes"]:
        raise FormatError(f"{path}: expected {manifest['blob_bytes']} bytes, found {len(blob)} (truncated?)")
    ps = state.params
    seen = set()
    for e in manifest["entries"]:
        name, kind, shape = e["name"], e["kind"], tuple(e["shape"])
        table = ps.params if kind == "param" else ps.buffers
        if name not in table:
            raise FormatError(f"checkpoint holds unknown {kind} {name!r}")
        if e["offset"] + e["nbytes"] > len(blob):
            raise FormatError(f"{path}: entry {name!r} runs past the end of the blob")
        value = np.frombuffer(blob, dtype=_DTYPE, count=e["nbytes"] // 4, offset=e["offset"]).reshape(shape)
        target = table[name].value if kind == "param" else table[name]
        if target.shape != shape:
            raise FormatError(f"shape mismatch for {name!r}: checkpoint {shape}, model {target.shape}")
        target[...] = value
        seen.add((kind, name))
    missing = [n for n in ps.params if ("param", n) not in seen]
    if missing:
        raise FormatError(f"checkpoint lacks parameters {missing[:5]}")
