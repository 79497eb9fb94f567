"""Binary checkpoint format for named float64 arrays.

Layout: magic ``MGUN``, u32 format version, u32 record count, then per
record: u32 name length, UTF-8 name bytes, u32 rank, u32 extents, and the
little-endian float64 payload in C order.  Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError

__all__ = ["save_arrays", "load_arrays", "save_model", "load_model"]

MAGIC = b"MGUN"
VERSION = 1


def save_arrays(path, arrays: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<I", ext))
            f.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def load_arrays(path) -> dict:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    arrays: dict = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n_items, offset=off).reshape(shape)
        off += 8 * n_items
        if name in arrays:
            raise DataError(f"{path}: duplicate record name {name!r}")
        arrays[name] = arr.astype(np.float64)
    return arrays


def save_model(path, model, extra: dict | None = None):
    """Write all named parameters (plus optional extra records) of a model."""
    arrays = {}
    for name, p in model.named_parameters():
        if name in arrays:
            raise ContractError(f"duplicate parameter name {name!r}")
        arrays[name] = p.data
    for key, val in (extra or {}).items():
        if key in arrays:
            raise ContractError(f"extra record {key!r} collides with a parameter")
        arrays[key] = val
    save_arrays(path, arrays)


def load_model(path, model, prefix: str = "") -> dict:
    """Load parameters into an existing model; returns the non-parameter records.

    Every model parameter must be present with a matching shape; unknown
    records are returned to the caller (optimizer state and the like).
    """
    arrays = load_arrays(path)
    used = set()
    for name, p in model.named_parameters():
        key = prefix + name
        if key not in arrays:
            raise DataError(f"{path}: missing parameter record {key!r}")
        arr = arrays[key]
        if arr.shape != p.data.shape:
            raise DataError(f"{path}: shape mismatch for {key!r}: "
                            f"checkpoint {arr.shape} vs model {p.data.shape}")
        p.data = arr.copy()
        used.add(key)
    return {k: v for k, v in arrays.items() if k not in used}
