"""Learnable-clipping distillation with and without the gradient-preservation
term: same fitting budget, lower gradient residual."""

import numpy as np

from quantlab import lgp as L
from quantlab import model as M
from quantlab import quant as Q

from _common import demo_corpus, demo_model

corpus = demo_corpus()
model = demo_model(corpus)
rng = np.random.default_rng(2)
calib = [M.sample_batch(corpus.train, rng, 8, 48)]
spec = Q.QuantSpec(bits=2, group_size=32)

targets = L.capture_block_targets(model, calib, 0)
base = L.lgp_distill_block(
    model.copy(), calib, 0, spec, L.LgpConfig(alpha1=0.0, epochs=12), targets=targets
)
fit0, grad0 = base.trace[0][1], base.trace[0][2]
alpha1, _ = L.select_alpha1_magnitude(fit0, grad0, [10.0**k for k in range(-2, 7)])
print(f"initial fitting term {fit0:.4f}, gradient term {grad0:.6f}")
print(f"comparable-scale alpha1: {alpha1:g}")

lgp = L.lgp_distill_block(
    model.copy(), calib, 0, spec, L.LgpConfig(alpha1=alpha1, epochs=12), targets=targets
)

print(f"\n{'epoch':>5} | {'fit (a1=0)':>12} {'grad (a1=0)':>12} | {'fit (LGP)':>12} {'grad (LGP)':>12}")
for (e, f0, g0, _), (_, f1, g1, _) in zip(base.trace, lgp.trace):
    if e % 3 == 0 or e == len(base.trace) - 1:
        print(f"{e:>5} | {f0:12.4f} {g0:12.6f} | {f1:12.4f} {g1:12.6f}")

print("\ngradient residual at matched epochs:",
      f"{base.trace[-1][2]:.6f} (clipping only) vs {lgp.trace[-1][2]:.6f} (with LGP)")
