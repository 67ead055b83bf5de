"""Versioned checkpoint container for a ParameterSet.

Layout: one JSON header line (format version, architecture, training step,
init seed, tensor index) followed by the raw tensor payload, every tensor
stored as little-endian float64 in index order. Loading restores the
original in-memory dtype bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .models import ArchSpec, ParameterSet

__all__ = ["save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]

FORMAT_VERSION = 1
_MAGIC = "vidpriv-checkpoint"


def save_checkpoint(path, params: ParameterSet, step: int = 0) -> None:
    path = Path(path)
    tensors = []
    payload = bytearray()
    for name, arr in params.weights.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += raw
    header = {
        "format": _MAGIC,
        "format_version": FORMAT_VERSION,
        "arch": asdict(params.arch),
        "step": int(step),
        "seed": int(params.seed),
        "dtype": str(np.dtype(params.weights[tensors[0]["name"]].dtype)) if tensors else "float32",
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        fh.write(bytes(payload))


def load_checkpoint(path) -> tuple[ParameterSet, int]:
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line)
    if header.get("format") != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    arch = ArchSpec(**header["arch"])
    dtype = np.dtype(header["dtype"])
    weights = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=start).reshape(shape)
        weights[entry["name"]] = arr.astype(dtype)
    params = ParameterSet(arch=arch, weights=weights, seed=header["seed"])
    return params, int(header["step"])
