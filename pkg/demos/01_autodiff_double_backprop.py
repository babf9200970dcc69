"""Tour of the autodiff engine: gradients are graphs, so you can take
gradients of gradient norms.

The closure property (every derivative rule emits registered primitives) is
what lets the gradient-preservation and gradient-regularization objectives
differentiate through a backward pass.
"""

import numpy as np

from quantlab import engine as E

# ordinary reverse-mode gradient
x = E.leaf(np.array([1.0, 2.0, -0.5]))
f = E.frobenius_norm_sq(E.silu(x))
g = E.backward(f, [x])[x]
print("f = ||silu(x)||^2")
print("grad:", g.data)

# the gradient is itself a graph value; differentiate its norm
norm_sq = E.frobenius_norm_sq(g)
gg = E.backward(norm_sq, [x])[x]
print("d||grad||^2/dx:", gg.data)

# cross-check with central finite differences
def norm_of_grad(arr):
    xi = E.leaf(arr.copy())
    fi = E.frobenius_norm_sq(E.silu(xi))
    gi = E.backward(fi, [xi])[xi]
    return float(np.sum(gi.data**2))

fd = E.finite_diff(norm_of_grad, x.data.astype(float))
print("finite differences:", fd)
print("max abs deviation:", np.max(np.abs(gg.data - fd)))

# straight-through quantization: forward quantizes, backward is identity
w = E.leaf(np.array([0.4, -1.3, 0.9]))
q = E.ste_quantize(w, mode="ternary")
loss = E.reduce_sum(E.mul(q, E.constant([1.0, 2.0, 3.0])))
print("\nternary forward:", q.data)
print("STE gradient (passes through):", E.backward(loss, [w])[w].data)
