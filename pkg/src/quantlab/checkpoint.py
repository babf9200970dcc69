"""Binary model persistence.

Layout: magic "QLAB", u32 format version, u32-length JSON header (model
config, precision tag, dtype), u32 tensor count, then tensor records (raw
little-endian arrays or packed quantized blocks in the wire format), and a
trailing CRC32 over everything before it.  Loading reproduces forward
outputs bit for bit.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelHandle
from .quant import QuantizedLinear, pack_quantized, unpack_quantized

MAGIC = b"QLAB"
VERSION = 1

_RAW, _PACKED = 0, 2
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def save_model(path, model: ModelHandle, packed: dict[str, QuantizedLinear] | None = None) -> None:
    """Write a model checkpoint; tensors named in ``packed`` are stored in
    the packed quantized block format instead of raw floats."""
    packed = packed or {}
    dtype = str(model.params["embedding"].dtype)
    header = {
        "config": asdict(model.config),
        "precision_tag": model.precision_tag,
        "quant_mode": model.quant_mode,
        "dtype": dtype,
    }
    head_b = json.dumps(header, sort_keys=True).encode("utf-8")

    body = [MAGIC, VERSION.to_bytes(4, "little"), len(head_b).to_bytes(4, "little"), head_b]
    names = [n for n in model.params if n not in packed]
    body.append((len(names) + len(packed)).to_bytes(4, "little"))
    for name in names:
        arr = model.params[name]
        name_b = name.encode("utf-8")
        body += [
            _RAW.to_bytes(1, "little"),
            len(name_b).to_bytes(2, "little"),
            name_b,
            arr.ndim.to_bytes(1, "little"),
        ]
        body += [int(d).to_bytes(4, "little") for d in arr.shape]
        body.append(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    for name, ql in packed.items():
        body += [_PACKED.to_bytes(1, "little"), pack_quantized(name, ql)]

    blob = b"".join(body)
    checksum = zlib.crc32(blob) & 0xFFFFFFFF
    Path(path).write_bytes(blob + checksum.to_bytes(4, "little"))


def load_model(path):
    """Read a checkpoint; returns (ModelHandle, packed block dict)."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a QLAB checkpoint")
    stored_crc = int.from_bytes(blob[-4:], "little")
    payload = blob[:-4]
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch")

    offset = 4
    version = int.from_bytes(payload[offset : offset + 4], "little")
    offset += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    head_len = int.from_bytes(payload[offset : offset + 4], "little")
    offset += 4
    header = json.loads(payload[offset : offset + head_len].decode("utf-8"))
    offset += head_len
    dtype = header["dtype"]
    np_dtype = _DTYPES[dtype]

    count = int.from_bytes(payload[offset : offset + 4], "little")
    offset += 4
    params: dict[str, np.ndarray] = {}
    packed: dict[str, QuantizedLinear] = {}
    for _ in range(count):
        kind = payload[offset]
        offset += 1
        if kind == _RAW:
            name_len = int.from_bytes(payload[offset : offset + 2], "little")
            offset += 2
            name = payload[offset : offset + name_len].decode("utf-8")
            offset += name_len
            ndim = payload[offset]
            offset += 1
            shape = tuple(
                int.from_bytes(payload[offset + 4 * i : offset + 4 * i + 4], "little")
                for i in range(ndim)
            )
            offset += 4 * ndim
            n_bytes = int(np.prod(shape)) * np.dtype(np_dtype).itemsize
            arr = np.frombuffer(payload[offset : offset + n_bytes], dtype=np_dtype)
            offset += n_bytes
            params[name] = arr.reshape(shape).astype(dtype)
        elif kind == _PACKED:
            name, ql, offset = unpack_quantized(payload, offset)
            packed[name] = ql
            params[name] = ql.dequantize().astype(dtype)
        else:
            raise CheckpointError(f"{path}: unknown tensor kind {kind}")

    config = ModelConfig(**header["config"])
    model = ModelHandle(
        config=config,
        params=params,
        precision_tag=header["precision_tag"],
        quant_mode=header["quant_mode"],
    )
    return model, packed
