"""Weight checkpoint file.

Layout (little-endian)::

    b"OTCK" | u32 version | 32-byte config digest | u32 n_params
    n_params x ( u16 name_len | name utf-8 | u8 ndim | u32 dims[ndim] | f32 data )
"""
import hashlib
import json
import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"OTCK"
VERSION = 1


class CheckpointError(IOError):
    pass


def config_digest(config_dict):
    """sha256 hex digest of a JSON-serialisable config (canonical key order)."""
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, params, digest):
    chunks = [MAGIC, struct.pack("<I", VERSION), bytes.fromhex(digest),
              struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Return ``(params, digest)``; parameters come back as 64-bit tensors."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
        digest = buf[8:40].hex()
        (count,) = struct.unpack_from("<I", buf, 40)
        off = 44
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode()
            off += n
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 4 * size > len(buf):
                raise CheckpointError(f"{path}: truncated at parameter {name!r}")
            data = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            params[name] = Tensor(data.astype(np.float64), name=name)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    return params, digest
