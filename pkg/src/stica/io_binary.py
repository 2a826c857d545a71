"""Flat binary container for named tensors, checkpoints and exports.

Layout (all little-endian):

    magic "STCA" | version u16 | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | extents u32 each
                | raw float32 values
    (checkpoints continue:) step u64 | epoch u64 | rng blob length u32
                | rng blob | config digest (32 bytes)

Values are stored at 32-bit precision; saving a checkpoint rounds the
live 64-bit state down to float32-representable values in place, so a
resumed run and the uninterrupted run see bit-identical parameters from
the save point onward.
"""

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"STCA"
VERSION = 1
DIGEST_BYTES = 32

__all__ = [
    "CheckpointError",
    "MAGIC",
    "VERSION",
    "write_tensor_table",
    "read_tensor_table",
    "save_checkpoint",
    "load_checkpoint",
    "export_instances",
    "read_export",
    "pack_rng_state",
    "unpack_rng_state",
]


class CheckpointError(Exception):
    """Malformed or truncated checkpoint/export file."""


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated file while reading {what}")
    return buf


def write_tensor_table(f, arrays):
    f.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(arr)
        f.write(struct.pack("<H", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            f.write(struct.pack("<I", extent))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor_table(f):
    (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
    out = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
        name = _read_exact(f, name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
        shape = tuple(
            struct.unpack("<I", _read_exact(f, 4, "extent"))[0] for _ in range(rank)
        )
        n = int(np.prod(shape)) if shape else 1
        raw = _read_exact(f, 4 * n, f"values of {name}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return out


def _write_header(f):
    f.write(MAGIC)
    f.write(struct.pack("<H", VERSION))


def _check_header(f):
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}, expected {VERSION}")


def pack_rng_state(rng):
    """Serialize a numpy Generator backed by PCG64."""
    state = rng.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise CheckpointError(f"unsupported bit generator {state['bit_generator']}")
    return (
        int(state["state"]["state"]).to_bytes(16, "little")
        + int(state["state"]["inc"]).to_bytes(16, "little")
        + struct.pack("<BI", int(state["has_uint32"]), int(state["uinteger"]))
    )


def unpack_rng_state(blob, rng):
    if len(blob) != 37:
        raise CheckpointError(f"rng state blob has {len(blob)} bytes, expected 37")
    has_uint32, uinteger = struct.unpack("<BI", blob[32:])
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {
            "state": int.from_bytes(blob[:16], "little"),
            "inc": int.from_bytes(blob[16:32], "little"),
        },
        "has_uint32": has_uint32,
        "uinteger": uinteger,
    }


def _truncate_inplace(arr):
    arr[...] = arr.astype(np.float32).astype(np.float64)


def save_checkpoint(path, arrays, step, epoch, rng, digest, truncate_live=True):
    """Write a checkpoint; rounds the live arrays to float32 precision so
    resuming reproduces the continued run bit-exactly."""
    if len(digest) != DIGEST_BYTES:
        raise ValueError(f"config digest must be {DIGEST_BYTES} bytes")
    if truncate_live:
        for arr in arrays.values():
            _truncate_inplace(arr)
    with open(path, "wb") as f:
        _write_header(f)
        write_tensor_table(f, arrays)
        f.write(struct.pack("<QQ", step, epoch))
        blob = pack_rng_state(rng)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(digest)


def load_checkpoint(path):
    """Read a checkpoint -> (arrays, step, epoch, rng_blob, digest)."""
    with open(path, "rb") as f:
        _check_header(f)
        arrays = read_tensor_table(f)
        step, epoch = struct.unpack("<QQ", _read_exact(f, 16, "counters"))
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4, "rng blob length"))
        blob = _read_exact(f, blob_len, "rng state")
        digest = _read_exact(f, DIGEST_BYTES, "config digest")
    return arrays, step, epoch, blob, digest


def export_instances(path, instances):
    """Dump synthetic instances into the same tensor container for inspection."""
    arrays = OrderedDict()
    for inst in instances:
        key = f"{inst.instance_id:06d}"
        arrays[f"video/{key}"] = inst.video
        arrays[f"audio/{key}"] = inst.audio
        arrays[f"label/{key}"] = np.array([float(inst.class_id)])
    with open(path, "wb") as f:
        _write_header(f)
        write_tensor_table(f, arrays)


def read_export(path):
    with open(path, "rb") as f:
        _check_header(f)
        return read_tensor_table(f)
