"""Bit-exact binary checkpoints.

Layout: magic ``SNET``, u32 version (1), u32 tensor count, then per tensor a
u32 name length, the UTF-8 name, u8 rank, u32 dims, and the payload as
little-endian 32-bit floats. Everything multi-byte is little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SNET"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt or unsupported checkpoint file."""


def save(path, tensors):
    """Write named float arrays; values are stored as float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))


def load(path):
    """Read a checkpoint back into a name -> float32 array dict."""
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = view[off:off + n]
        off += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic bytes, not a checkpoint file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * n, f"tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if off != len(view):
        raise CheckpointError(f"{len(view) - off} trailing bytes after last tensor")
    return tensors


# ---------------------------------------------------------------------------
# model state <-> checkpoint

_SHIFT_MODE_CODE = {"nearest": 0, "random": 1, "off": 2}
_SLICE_ZERO_CODE = {"none": 0, "decoder": 1, "encoder": 2, "shift": 3}
_META_NAME = "meta.generator"


def _encode_meta(cfg):
    return np.array([
        cfg.input_size, cfg.depth, cfg.base_channels, cfg.shift_layer,
        _SHIFT_MODE_CODE[cfg.shift_mode], _SLICE_ZERO_CODE[cfg.slice_zero],
        cfg.threshold,
    ], dtype=np.float32)


def decode_meta(meta):
    from .networks import GeneratorConfig

    mode = {v: k for k, v in _SHIFT_MODE_CODE.items()}[int(meta[4])]
    zero = {v: k for k, v in _SLICE_ZERO_CODE.items()}[int(meta[5])]
    return GeneratorConfig(input_size=int(meta[0]), depth=int(meta[1]),
                           base_channels=int(meta[2]), shift_layer=int(meta[3]),
                           shift_mode=mode, slice_zero=zero, threshold=float(meta[6]))


def save_models(path, generator, discriminator=None):
    """Checkpoint both nets plus enough metadata to rebuild the generator."""
    tensors = {_META_NAME: _encode_meta(generator.cfg)}
    for name, p in generator.named_parameters():
        tensors[f"G.{name}"] = p.data
    if discriminator is not None:
        for name, p in discriminator.named_parameters():
            tensors[f"D.{name}"] = p.data
    save(path, tensors)


def load_into(model, tensors, prefix):
    """Copy checkpointed arrays into a model's parameters by name."""
    for name, p in model.named_parameters():
        key = f"{prefix}.{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        arr = tensors[key]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"{key!r}: checkpoint shape {arr.shape} != model shape {p.data.shape}"
            )
        p.data = arr.astype(p.data.dtype)


def load_generator(path, dtype="float32"):
    """Rebuild a generator (weights and config) from a checkpoint."""
    from .networks import build_generator

    tensors = load(path)
    if _META_NAME not in tensors:
        raise CheckpointError("checkpoint has no generator metadata")
    cfg = decode_meta(tensors[_META_NAME])
    cfg.dtype = dtype
    gen = build_generator(cfg)
    load_into(gen, tensors, "G")
    return gen
