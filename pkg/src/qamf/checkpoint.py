"""Versioned binary checkpoint files with a CRC32 trailer.

Layout: magic "QFCK", version u32, a length-prefixed UTF-8 hyper-shape
block (YAML text describing the run), then named float64 tensors as
(name length u16, name, rank u8, dims u32[], little-endian payload), and a
trailing CRC32 over everything before it. Writes are canonical, so
identical state produces identical bytes.
"""

import struct
import zlib

import numpy as np

QFCK_MAGIC = b"QFCK"
QFCK_VERSION = 1


class CheckpointError(Exception):
    pass


def write_checkpoint_bytes(meta_text, tensors):
    """Serialize a {name: array} map plus a metadata text block."""
    out = bytearray()
    out += QFCK_MAGIC
    out += struct.pack("<I", QFCK_VERSION)
    meta = meta_text.encode("utf-8")
    out += struct.pack("<I", len(meta))
    out += meta
    for name in tensors:
        arr = np.asarray(tensors[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name!r}")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<I", d)
        out += arr.astype("<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def write_checkpoint(path, meta_text, tensors):
    with open(path, "wb") as f:
        f.write(write_checkpoint_bytes(meta_text, tensors))


def read_checkpoint_bytes(data):
    if len(data) < 12:
        raise CheckpointError("checkpoint truncated")
    if data[:4] != QFCK_MAGIC:
        raise CheckpointError("not a QFCK checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != QFCK_VERSION:
        raise CheckpointError(f"unsupported QFCK version {version}")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt")

    pos = 8
    (meta_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta_text = data[pos:pos + meta_len].decode("utf-8")
    pos += meta_len
    tensors = {}
    end = len(data) - 4
    while pos < end:
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data[pos:pos + 8 * count], dtype="<f8")
        if arr.size != count:
            raise CheckpointError("checkpoint truncated inside a tensor")
        pos += 8 * count
        tensors[name] = arr.reshape(dims).copy()
    if pos != end:
        raise CheckpointError("trailing bytes before the CRC")
    return meta_text, tensors


def read_checkpoint(path):
    with open(path, "rb") as f:
        return read_checkpoint_bytes(f.read())


# --- model/optimizer state packing ---------------------------------------------

def pack_state(model, opt_state):
    """Flatten model parameters and optimizer velocities into one map."""
    tensors = {}
    for name, p in model.parameters().items():
        tensors[f"param/{name}"] = p.value
    for name, v in opt_state.velocities.items():
        tensors[f"vel/{name}"] = v
    tensors["opt/step"] = np.array(float(opt_state.step))
    return tensors


def unpack_state(model, opt_state, tensors):
    """Restore parameters and velocities in place; returns the step."""
    params = model.parameters()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing {key}")
        if tensors[key].shape != p.value.shape:
            raise CheckpointError(
                f"{key}: shape {tensors[key].shape} != {p.value.shape}")
        p.value[...] = tensors[key]
    opt_state.velocities = {}
    for key, arr in tensors.items():
        if key.startswith("vel/"):
            opt_state.velocities[key[4:]] = arr.copy()
    opt_state.step = int(tensors["opt/step"])
    return opt_state.step
