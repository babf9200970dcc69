"""Fixed-point quantization mechanics: scales, zero-points, clipping,
ternary codes, and the packed wire format."""

import numpy as np

from quantlab import quant as Q

w = np.array([-1.5, 0.5])
spec = Q.QuantSpec(bits=2, group_size=2)
ql = Q.quantize(w, spec)
print("w        :", w)
print("h, z     :", float(ql.params.h[0, 0]), int(ql.params.z[0, 0]))
print("codes    :", ql.codes.reshape(-1))
print("dequant  :", ql.dequantize())
print("error    :", np.abs(ql.dequantize() - w), "(bounded by h)")

# round-trip error shrinks with bit width
rng = np.random.default_rng(0)
group = rng.uniform(-1, 1, size=64)
print("\nmax round-trip error by bit width (one 64-weight group):")
for bits in (2, 3, 4, 8):
    q = Q.quantize(group, Q.QuantSpec(bits=bits, group_size=64))
    print(f"  {bits} bits: {np.max(np.abs(q.dequantize() - group)):.5f}")

# clipping shrinks the grid step at the cost of saturating the range ends
clip = Q.ClipParams(gamma=np.full((1, 1), 0.8), beta=np.full((1, 1), 0.8))
plain = Q.quantize(group, Q.QuantSpec(bits=3, group_size=64))
clipped = Q.quantize(group, Q.QuantSpec(bits=3, group_size=64), clip=clip)
print("\n3-bit scale h: plain", float(plain.params.h[0, 0]), "clipped", float(clipped.params.h[0, 0]))

# ternary weights: {-1, 0, +1} times the absolute-mean scale
codes, scale = Q.ternarize(rng.normal(size=(4, 6)))
print("\nternary scale:", scale)
print(codes)

# the wire format round-trips bit for bit
blob = Q.pack_quantized("demo.w", plain)
name, restored, _ = Q.unpack_quantized(blob)
print("\npacked bytes:", len(blob), "| codes identical:", np.array_equal(restored.codes, plain.codes))
