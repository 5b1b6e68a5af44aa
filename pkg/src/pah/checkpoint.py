"""Versioned binary checkpoints holding only backbone, hypernetwork and prototypes.

Layout (little-endian)::

    magic    8 bytes  b"PAHCKPT\\0"
    version  uint32
    dims     11 x uint32: channels height width num_classes hidden feature_dim
                          hyper_hidden proto_h proto_w num_tasks dtype_code
    backbone float64[]  W1 b1 W2 b2, row-major
    hypernet float64[]  V1 c1 V2
    protos   float64[]  task 1..T, class 0..C-1, each ch*h*w

Block sizes follow from the header, and prototype task/class ids follow from
their position, so each added task grows the file by exactly
``C * ch * h * w * 8`` bytes. There is no head block.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelDims, PahModel

MAGIC = b"PAHCKPT\x00"
VERSION = 1
_HEADER = struct.Struct("<8sI11I")
_DTYPES = {0: np.float64, 1: np.float32}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _block_shapes(dims: ModelDims, num_tasks: int) -> dict[str, list[tuple[int, ...]]]:
    d = dims
    return {
        "backbone": [(d.input_dim, d.hidden), (d.hidden,), (d.hidden, d.feature_dim), (d.feature_dim,)],
        "hypernet": [(d.embedding_dim, d.hyper_hidden), (d.hyper_hidden,), (d.hyper_hidden, d.head_dim)],
        "prototypes": [(d.channels, d.proto_h, d.proto_w)] * (num_tasks * d.num_classes),
    }


def layout(dims: ModelDims, num_tasks: int) -> dict[str, int]:
    """Parameter count of each block."""
    return {k: int(sum(np.prod(s) for s in shapes)) for k, shapes in _block_shapes(dims, num_tasks).items()}


def save_checkpoint(model: PahModel, path: str | Path) -> None:
    d = model.dims
    code = 1 if model.dtype == np.float32 else 0
    header = _HEADER.pack(MAGIC, VERSION, d.channels, d.height, d.width, d.num_classes, d.hidden,
                          d.feature_dim, d.hyper_hidden, d.proto_h, d.proto_w, len(model.prototypes), code)
    body = np.concatenate([p.data.astype(np.float64).ravel() for p in model.parameters()]) \
        if model.parameters() else np.zeros(0)
    Path(path).write_bytes(header + body.astype("<f8").tobytes())


def read_header(raw: bytes) -> tuple[ModelDims, int, np.dtype]:
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"truncated header: {len(raw)} of {_HEADER.size} bytes")
    magic, version, *vals = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version} needs migration to version {VERSION}")
    ch, H, W, C, hidden, fd, hh, ph, pw, num_tasks, code = vals
    if code not in _DTYPES:
        raise CheckpointError(f"unknown dtype code {code}")
    dims = ModelDims(channels=ch, height=H, width=W, num_classes=C, hidden=hidden, feature_dim=fd,
                     hyper_hidden=hh, proto_h=ph, proto_w=pw)
    return dims, num_tasks, np.dtype(_DTYPES[code])


def load_checkpoint(path: str | Path) -> PahModel:
    """Rebuild a model; raises before constructing anything if the file is malformed."""
    raw = Path(path).read_bytes()
    dims, num_tasks, dtype = read_header(raw)
    shapes = _block_shapes(dims, num_tasks)
    total = sum(layout(dims, num_tasks).values())
    expected = _HEADER.size + 8 * total
    if len(raw) != expected:
        raise CheckpointError(f"checkpoint is {len(raw)} bytes, expected {expected} "
                              f"(data ends at byte offset {len(raw)})")
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    arrays, pos = [], 0
    for block in ("backbone", "hypernet", "prototypes"):
        for shape in shapes[block]:
            n = int(np.prod(shape))
            arrays.append(flat[pos:pos + n].reshape(shape).astype(dtype))
            pos += n

    model = PahModel.create(dims, np.random.default_rng(0), dtype)
    net = model.network_parameters()
    for p, arr in zip(net, arrays):
        p.data = arr.copy()
    protos = arrays[len(net):]
    C = dims.num_classes
    for k in range(1, num_tasks + 1):
        model.register_task(k, protos[(k - 1) * C:k * C])
    return model
