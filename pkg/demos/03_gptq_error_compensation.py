"""GPTQ against plain rounding, and the forward/backward asymmetry.

Column-by-column error compensation uses calibration second moments; the
transposed solver optimizes gradient preservation instead, and the two
disagree more as the bit width drops.
"""

import numpy as np

from quantlab import gptq as GQ
from quantlab import quant as Q

rng = np.random.default_rng(0)
d_in, d_out, n = 16, 8, 128
W = rng.normal(size=(d_out, d_in))
basis, _ = np.linalg.qr(rng.normal(size=(d_in, d_in)))
X = (basis * np.sqrt(0.85 ** np.arange(d_in))) @ rng.normal(size=(d_in, n))
G = rng.normal(size=(d_out, n))

print("forward reconstruction error ||(W - What) X||_F:")
for bits in (4, 3, 2):
    spec = Q.QuantSpec(bits=bits, group_size=d_in)
    rtn = Q.quantize(W, spec).dequantize()
    gptq = GQ.gptq_quantize(W, GQ.build_hessian(X), spec).dequantize()
    e_rtn = np.linalg.norm((W - rtn) @ X)
    e_gptq = np.linalg.norm((W - gptq) @ X)
    print(f"  {bits} bits: rtn={e_rtn:8.3f}  gptq={e_gptq:8.3f}  ratio={e_gptq/e_rtn:.3f}")

print("\nforward-fit vs gradient-preserving solutions at 2 bits:")
spec = Q.QuantSpec(bits=2, group_size=d_in)
wa = GQ.gptq_quantize(W, GQ.build_hessian(X), spec).dequantize()
ws = GQ.gptq_backward(W, G, spec).dequantize()
for tag, what in (("What_a (forward fit)", wa), ("What_s (grad preserve)", ws)):
    fwd = np.linalg.norm((W - what) @ X)
    bwd = np.linalg.norm((W - what).T @ G)
    print(f"  {tag}: forward residual {fwd:7.3f} | backward residual {bwd:7.3f}")

print("\nmixed precision: restoring the most gradient-important columns")
what = wa
for budget in (0.0, 0.1, 0.25, 0.5):
    if budget == 0.0:
        resid = np.linalg.norm((W - what).T @ G)
    else:
        mixed = GQ.select_important_columns(W, what, X, G, budget, "grad_magnitude")
        resid = np.linalg.norm((W - mixed.weight).T @ G)
    print(f"  budget {budget:4.2f}: backward residual {resid:.3f}")
