"""Uniform fixed-point quantization: group-wise scales and zero-points,
learnable clipping, ternary codes, and the packed storage format.

Conventions:

- rounding is ties-to-even throughout (``np.rint``);
- weights quantize in groups along the input dimension, ragged last group
  allowed;
- scales are stored as float32 and zero-points as int16, matching the wire
  format exactly so packing round-trips bit-for-bit;
- zero-points follow the asymmetric rule ``z = -round(beta*min/h)`` and are
  NOT clamped to the code range: clamping z re-centers the grid away from
  off-center groups and breaks the |dequant - w| <= h guarantee;
- a constant group is represented exactly by anchoring the range at zero
  (h = |c| / (2^N - 1)); an all-zero group falls back to h = 1e-8.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_SCALE = 1e-8


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    group_size: int = 64
    symmetric: bool = False  # asymmetric by default
    rounding: str = "ties-to-even"

    def __post_init__(self):
        if not 1 <= self.bits <= 8:
            raise ValueError(f"bits must be in [1, 8], got {self.bits}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.rounding != "ties-to-even":
            raise ValueError("only ties-to-even rounding is supported")

    @property
    def n_levels(self) -> int:
        return (1 << self.bits) - 1


@dataclass
class QuantParams:
    """Per-group scale h (float32) and integer zero-point z.

    Zero-points are int32 in memory (off-center groups can push z beyond the
    wire range); the packed format stores int16 and rejects tensors outside
    it, which model weight groups never are.
    """

    h: np.ndarray
    z: np.ndarray


@dataclass
class ClipParams:
    """Learnable clipping factors, one (gamma, beta) pair per group."""

    gamma: np.ndarray
    beta: np.ndarray

    CLIP_LO = 1e-3
    CLIP_HI = 1.2

    def clamped(self) -> "ClipParams":
        return ClipParams(
            np.clip(self.gamma, self.CLIP_LO, self.CLIP_HI),
            np.clip(self.beta, self.CLIP_LO, self.CLIP_HI),
        )


@dataclass
class QuantizedLinear:
    """Simulated-quantization storage for one weight matrix.

    ``codes`` are kept unpacked (uint8) for computation; ``pack``/``unpack``
    produce the persisted byte layout.  ``group_axis`` is "input" for forward
    solvers and "output" for the transposed (gradient-preserving) solver, in
    which case codes are stored in the transposed orientation.
    """

    codes: np.ndarray
    params: QuantParams
    shape: tuple
    spec: QuantSpec
    group_axis: str = "input"

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def _group_bounds(n: int, group_size: int):
    edges = list(range(0, n, group_size)) + [n]
    return list(zip(edges[:-1], edges[1:]))


def _params_for_group(group: np.ndarray, bits: int, gamma: float, beta: float):
    """Scale and zero-point for one group, per the clipped asymmetric rule."""
    levels = (1 << bits) - 1
    wmax = float(np.max(group))
    wmin = float(np.min(group))
    if wmax == wmin:
        c = wmax
        if c == 0.0:
            return EPS_SCALE, 0
        h = abs(c) / levels  # zero-anchored: represents the constant exactly
        z = 0 if c > 0 else levels
        return h, z
    h = (gamma * wmax - beta * wmin) / levels
    if h <= 0.0:  # clip factors can collapse an all-positive/negative range
        h = EPS_SCALE
    z = int(np.rint(-(beta * wmin) / h))
    return h, z


def quant_params(group: np.ndarray, bits: int, clip: tuple | None = None) -> QuantParams:
    """Quantization parameters for a single 1-D group."""
    group = np.asarray(group, dtype=np.float64)
    if group.size == 0:
        raise ValueError("group must be non-empty")
    gamma, beta = (1.0, 1.0) if clip is None else (float(clip[0]), float(clip[1]))
    h, z = _params_for_group(group, bits, gamma, beta)
    return QuantParams(h=np.float32(h).reshape(1), z=np.int32(z).reshape(1))


def quantize(w: np.ndarray, spec: QuantSpec, clip: ClipParams | None = None) -> QuantizedLinear:
    """Round-to-nearest quantization, grouped along the input dimension."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("quantize: weights contain NaN or Inf")
    squeeze = w.ndim == 1
    if squeeze:
        w = w.reshape(1, -1)
    if w.ndim != 2:
        raise ValueError(f"quantize expects a 1-D or 2-D tensor, got shape {w.shape}")

    d_out, d_in = w.shape
    bounds = _group_bounds(d_in, spec.group_size)
    n_groups = len(bounds)
    if clip is not None:
        clip = clip.clamped()
        if clip.gamma.shape != (d_out, n_groups):
            raise ValueError(
                f"clip params shape {clip.gamma.shape} != (d_out, n_groups) = {(d_out, n_groups)}"
            )

    h = np.empty((d_out, n_groups), dtype=np.float32)
    z = np.empty((d_out, n_groups), dtype=np.int32)
    codes = np.empty((d_out, d_in), dtype=np.uint8)
    levels = spec.n_levels
    for r in range(d_out):
        for gi, (lo, hi) in enumerate(bounds):
            grp = w[r, lo:hi]
            if clip is None:
                hg, zg = _params_for_group(grp, spec.bits, 1.0, 1.0)
            else:
                hg, zg = _params_for_group(
                    grp, spec.bits, float(clip.gamma[r, gi]), float(clip.beta[r, gi])
                )
            hg32 = np.float32(hg)
            h[r, gi] = hg32
            z[r, gi] = zg
            codes[r, lo:hi] = np.clip(np.rint(grp / float(hg32)) + zg, 0, levels).astype(np.uint8)

    shape = (d_in,) if squeeze else (d_out, d_in)
    return QuantizedLinear(codes=codes, params=QuantParams(h, z), shape=shape, spec=spec)


def dequantize(q: QuantizedLinear) -> np.ndarray:
    """Map codes back to the floating grid: w_hat = h * (code - z)."""
    codes = q.codes
    d_out, d_in = codes.shape
    out = np.empty((d_out, d_in), dtype=np.float64)
    for gi, (lo, hi) in enumerate(_group_bounds(d_in, q.spec.group_size)):
        h = q.params.h[:, gi].astype(np.float64)[:, None]
        z = q.params.z[:, gi].astype(np.float64)[:, None]
        out[:, lo:hi] = h * (codes[:, lo:hi].astype(np.float64) - z)
    if q.group_axis == "output":
        out = out.T
    return out.reshape(q.shape)


def ternarize(w: np.ndarray):
    """Ternary codes in {-1, 0, +1} with an absolute-mean scale."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("ternarize: weights contain NaN or Inf")
    scale = float(np.mean(np.abs(w)))
    if scale == 0.0:
        scale = EPS_SCALE
    codes = np.clip(np.rint(w / scale), -1, 1).astype(np.int8)
    return codes, scale


def ternary_dequantize(codes: np.ndarray, scale: float) -> np.ndarray:
    return scale * codes.astype(np.float64)


# --- packed wire format -------------------------------------------------------
#
# per-tensor block: u16 name length, name bytes, u8 ndim, u32 dims, u8 N,
# u32 group_size, u32 group count, then little-endian float32 scales,
# int16 zero-points, and codes packed LSB-first.


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    flat = codes.reshape(-1).astype(np.uint8)
    bits_lsb = ((flat[:, None] >> np.arange(bits, dtype=np.uint8)) & 1).astype(np.uint8)
    return np.packbits(bits_lsb.reshape(-1), bitorder="little").tobytes()


def unpack_codes(blob: bytes, bits: int, count: int) -> np.ndarray:
    raw = np.frombuffer(blob, dtype=np.uint8)
    stream = np.unpackbits(raw, bitorder="little", count=count * bits)
    per_code = stream.reshape(count, bits)
    return (per_code << np.arange(bits, dtype=np.uint8)).sum(axis=1).astype(np.uint8)


def pack_quantized(name: str, q: QuantizedLinear) -> bytes:
    if q.group_axis != "input":
        raise ValueError("only input-grouped tensors are persisted")
    if np.any(np.abs(q.params.z.astype(np.int64)) > 32767):
        raise ValueError("zero-point exceeds the int16 wire range")
    name_b = name.encode("utf-8")
    dims = q.shape
    parts = [
        len(name_b).to_bytes(2, "little"),
        name_b,
        len(dims).to_bytes(1, "little"),
    ]
    parts += [int(d).to_bytes(4, "little") for d in dims]
    parts += [
        int(q.spec.bits).to_bytes(1, "little"),
        int(q.spec.group_size).to_bytes(4, "little"),
        int(q.params.h.size).to_bytes(4, "little"),
        np.ascontiguousarray(q.params.h, dtype="<f4").tobytes(),
        np.ascontiguousarray(q.params.z, dtype="<i2").tobytes(),
        pack_codes(q.codes, q.spec.bits),
    ]
    return b"".join(parts)


def unpack_quantized(blob: bytes, offset: int = 0):
    """Read one packed tensor block; returns (name, QuantizedLinear, next_offset)."""

    def take(n):
        nonlocal offset
        chunk = blob[offset : offset + n]
        if len(chunk) != n:
            raise ValueError("corrupted pack header: truncated block")
        offset += n
        return chunk

    name_len = int.from_bytes(take(2), "little")
    name = take(name_len).decode("utf-8")
    ndim = int.from_bytes(take(1), "little")
    dims = tuple(int.from_bytes(take(4), "little") for _ in range(ndim))
    bits = int.from_bytes(take(1), "little")
    group_size = int.from_bytes(take(4), "little")
    n_groups = int.from_bytes(take(4), "little")
    h = np.frombuffer(take(4 * n_groups), dtype="<f4")
    z = np.frombuffer(take(2 * n_groups), dtype="<i2").astype(np.int32)

    d_in = dims[-1]
    d_out = 1 if ndim == 1 else int(np.prod(dims[:-1]))
    groups_per_row = len(_group_bounds(d_in, group_size))
    if d_out * groups_per_row != n_groups:
        raise ValueError("corrupted pack header: group count mismatch")
    count = d_out * d_in
    code_bytes = (count * bits + 7) // 8
    codes = unpack_codes(take(code_bytes), bits, count).reshape(d_out, d_in)

    spec = QuantSpec(bits=bits, group_size=group_size)
    params = QuantParams(h.reshape(d_out, groups_per_row).copy(), z.reshape(d_out, groups_per_row).copy())
    return name, QuantizedLinear(codes=codes, params=params, shape=dims, spec=spec), offset


def quantize_model_rtn(model, spec: QuantSpec | None):
    """Round-to-nearest model quantization (simulated).

    Attention/MLP projections are replaced by their dequantized values;
    embeddings, unembedding and norm gains stay full precision.  ``spec=None``
    is a passthrough returning a bit-identical copy.
    """
    from .model import PROJECTION_NAMES, ModelHandle

    params = {k: v.copy() for k, v in model.params.items()}
    if spec is None:
        return ModelHandle(config=model.config, params=params, precision_tag=model.precision_tag)
    for name in list(params):
        if name.split(".")[-1] in PROJECTION_NAMES:
            w = params[name]
            params[name] = dequantize(quantize(w, spec)).astype(w.dtype)
    return ModelHandle(config=model.config, params=params, precision_tag=f"quantized-{spec.bits}-bit")
