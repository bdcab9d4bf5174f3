"""``TGZR1`` checkpoint files.

Layout::

    b"TGZR1"                 5-byte magic
    uint32 little-endian     header length in bytes
    header                   UTF-8 JSON: config, tensor manifest, metadata
    payload                  little-endian float32 tensors, back to back

Manifest entries carry ``name``, ``shape`` and ``offset`` (bytes from the
start of the payload).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .core import GazeError
from .model import GazeForecaster, ModelConfig

MAGIC = b"TGZR1"


class CheckpointError(GazeError):
    pass


def to_bytes(model: GazeForecaster, meta: dict[str, Any] | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes(order="C")
        chunks.append(raw)
        offset += len(raw)
    header = {"format": "TGZR1", "version": 1, "config": model.cfg.to_dict(),
              "tensors": manifest, "meta": meta or {}}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)


def from_bytes(data: bytes) -> tuple[GazeForecaster, dict[str, Any]]:
    if data[:5] != MAGIC:
        raise CheckpointError("not a TGZR1 checkpoint")
    (hlen,) = struct.unpack("<I", data[5:9])
    try:
        header = json.loads(data[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    payload = memoryview(data)[9 + hlen:]
    model = GazeForecaster(ModelConfig(**header["config"]))
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointError(f"tensor {entry['name']!r} runs past end of file")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    return model, header.get("meta", {})


def save(path: str | Path, model: GazeForecaster, meta: dict[str, Any] | None = None) -> None:
    Path(path).write_bytes(to_bytes(model, meta))


def load(path: str | Path) -> tuple[GazeForecaster, dict[str, Any]]:
    return from_bytes(Path(path).read_bytes())
