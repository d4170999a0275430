"""Bit-stable checkpoint container.

Layout (all offsets in bytes from the start of the file)::

    line 1   b"MOOSE-CKPT 1\\n"
    line 2   one JSON object, keys sorted, no whitespace, terminated by b"\\n":
               {"arrays": [{"count": n, "name": str, "offset": k, "shape": [...]}, ...],
                "format": "moose-ckpt", "kind": str, "meta": {...}, "version": 1}
             "offset" counts float64 elements from the start of the payload.
    payload  every array as little-endian IEEE-754 float64, C order, in the
             order listed, with no padding.

Python floats in ``meta`` are written with ``repr`` precision, so they
round-trip exactly. Nothing in the file depends on time, host or platform.
"""
from __future__ import annotations

import json

import numpy as np

from ..errors import FormatError
from .nn import Layer, Mlp
from .tensor import Tensor

MAGIC = b"MOOSE-CKPT 1\n"
FORMAT = "moose-ckpt"
VERSION = 1


def write_container(path, kind, meta, arrays):
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
        blobs.append(arr.tobytes())
    header = {"format": FORMAT, "version": VERSION, "kind": kind, "meta": meta, "arrays": entries}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def read_container(path, kind=None):
    """Return ``(kind, meta, arrays)``; refuse foreign files and other versions."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC[:11]):
        raise FormatError(f"{path}: not a checkpoint container")
    if not raw.startswith(MAGIC):
        first = raw.split(b"\n", 1)[0]
        raise FormatError(f"{path}: unsupported container version {first!r}")
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC):end])
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise FormatError(f"{path}: format tag {header.get('format')}/{header.get('version')} not supported")
    if kind is not None and header["kind"] != kind:
        raise FormatError(f"{path}: holds a {header['kind']!r} checkpoint, expected {kind!r}")
    payload = np.frombuffer(raw, dtype="<f8", offset=end + 1)
    arrays = {}
    for e in header["arrays"]:
        chunk = payload[e["offset"]:e["offset"] + e["count"]]
        arrays[e["name"]] = chunk.astype(np.float64).reshape(e["shape"])
    return header["kind"], header["meta"], arrays


def mlp_to_arrays(mlp, prefix=""):
    meta = {"sizes": mlp.sizes, "activations": mlp.activations,
            "weight_norm": mlp.weight_norm, "members": mlp.members}
    arrays = {}
    for i, layer in enumerate(mlp.layers):
        arrays[f"{prefix}layer{i}.v"] = layer.v.data
        if layer.g is not None:
            arrays[f"{prefix}layer{i}.g"] = layer.g.data
        arrays[f"{prefix}layer{i}.b"] = layer.b.data
    return meta, arrays


def mlp_from_arrays(meta, arrays, prefix=""):
    layers = []
    for i, act in enumerate(meta["activations"]):
        g = arrays.get(f"{prefix}layer{i}.g")
        layers.append(Layer(
            Tensor(arrays[f"{prefix}layer{i}.v"], requires_grad=True),
            None if g is None else Tensor(g, requires_grad=True),
            Tensor(arrays[f"{prefix}layer{i}.b"], requires_grad=True),
            act,
        ))
    return Mlp(layers, meta["weight_norm"], meta["members"])


def save_mlp(path, mlp, kind="mlp", extra=None):
    meta, arrays = mlp_to_arrays(mlp)
    if extra:
        meta = {**meta, **extra}
    write_container(path, kind, meta, arrays)


def load_mlp(path, kind="mlp"):
    _, meta, arrays = read_container(path, kind)
    return mlp_from_arrays(meta, arrays), meta
