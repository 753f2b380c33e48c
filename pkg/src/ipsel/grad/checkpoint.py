"""Binary checkpoint files.

Layout (all integers little-endian):

    magic   4 bytes  b"IPSE"
    version u32      currently 1
    count   u32      number of tensors
    then per tensor:
      name_len u32, name UTF-8 bytes
      rank     u32, extents u64 * rank
      dtype    u8   (0 = f32, 1 = f64)
      data     raw little-endian values, row-major

Round-trips are bit-exact; loading into a model checks names and shapes
and raises ContractError on any mismatch.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError

MAGIC = b"IPSE"
VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path, named_tensors) -> None:
    """Write (name, Tensor-or-array) pairs in a stable given order."""
    path = Path(path)
    with open(path, "wb") as fh:
        items = list(named_tensors)
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name, tensor in items:
            arr = np.asarray(getattr(tensor, "data", tensor))
            if arr.dtype not in _DTYPE_CODES:
                raise ContractError(f"checkpoint: unsupported dtype {arr.dtype} for {name}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            fh.write(np.ascontiguousarray(le).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
        offset += 8 * rank
        (code,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        if code not in _CODE_DTYPES:
            raise ContractError(f"{path}: unknown dtype code {code} for {name}")
        dtype = _CODE_DTYPES[code]
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=offset).reshape(shape)
        offset += n * dtype.itemsize
        out[name] = arr.astype(dtype.newbyteorder("="))
    return out


def load_into(named_params, path) -> None:
    """Copy checkpoint values into existing tensors, strictly by name."""
    values = load_checkpoint(path)
    params = dict(named_params)
    missing = sorted(set(params) - set(values))
    extra = sorted(set(values) - set(params))
    if missing or extra:
        raise ContractError(
            f"checkpoint/architecture mismatch: missing={missing[:5]} extra={extra[:5]}")
    for name, tensor in params.items():
        arr = values[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise ContractError(
                f"checkpoint/architecture mismatch for {name}: "
                f"file {arr.shape} vs model {tensor.shape}")
        tensor.data[...] = arr.astype(tensor.dtype)
