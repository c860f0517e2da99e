"""Checkpoint files.

Layout: one line of UTF-8 JSON (the header) terminated by ``\\n``, followed by
the raw little-endian float64 buffers of every parameter in manifest order.
Manifest offsets are relative to the first byte after the header line.

Header keys: ``schema_version``, ``config`` (a ModelConfig), ``manifest``
(list of ``{name, shape, offset, nbytes}``), and optionally ``vocab`` (token
list) and ``boundary_types``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import DualStreamModel, ModelConfig, ModelParams, parameter_shapes
from .tensor import Tensor

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: DualStreamModel, vocab: list[str] | None = None,
                    boundary_types: list[str] | None = None) -> Path:
    manifest, buffers, offset = [], [], 0
    for name, t in model.params.items():
        buf = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
        buffers.append(buf)
        offset += len(buf)
    header = {"schema_version": CHECKPOINT_VERSION, "config": model.config.to_json(),
              "manifest": manifest}
    if vocab is not None:
        header["vocab"] = list(vocab)
    if boundary_types is not None:
        header["boundary_types"] = list(boundary_types)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for buf in buffers:
            fh.write(buf)
    return path


def load_checkpoint(path: str | Path) -> tuple[DualStreamModel, dict]:
    """Returns the model and the decoded header."""
    with open(path, "rb") as fh:
        raw_header = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(raw_header)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc.msg})") from None
    if header.get("schema_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported schema_version {header.get('schema_version')}")
    config = ModelConfig.from_json(header["config"])
    expected = parameter_shapes(config)
    tensors = {}
    for entry in header["manifest"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {shape}, "
                                  f"config implies {expected.get(name)}")
        start, end = entry["offset"], entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated buffer for {name!r}")
        arr = np.frombuffer(payload[start:end], dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    ordered = {name: tensors[name] for name in expected}
    return DualStreamModel(config, ModelParams(ordered)), header
