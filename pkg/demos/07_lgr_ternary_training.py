"""Ternary quantization-aware training with gradient regularization.

Three runs from one init: plain ternary, moderate regularization, and the
over-smoothing regime.  The regularizer activates halfway through training.
"""

import numpy as np

from quantlab import lgr as R
from quantlab import model as M
from quantlab import smoothness as S

from _common import DEMO_CONFIG, demo_corpus

corpus = demo_corpus()
init = M.build_model(DEMO_CONFIG, seed=0)
sched = M.TrainSchedule(steps=240, batch_size=8, seq_len=64, lr=2e-3, warmup_steps=20, seed=0)
probe = M.sample_batch(corpus.heldout, np.random.default_rng(9), 16, 64)

fp, fp_trace = M.train_baseline(init, corpus.train, sched)
print(f"fp baseline: final loss {fp_trace[-1]:.3f}, layer-1 C_avg {S.compute_c_avg(fp, probe, 1):.3f}")

for tag, alpha2 in (("ternary", 0.0), ("ternary+LGR", 0.01), ("over-smoothed", 100.0)):
    handle, breakdown, cavg = R.qat_train(
        init, corpus.train, R.LgrConfig(schedule=sched, alpha2=alpha2)
    )
    final_lm = float(np.mean([b.l_lm for b in breakdown[-15:]]))
    c1 = S.compute_c_avg(handle, probe, layer_index=1)
    print(
        f"{tag:>14}: alpha2={alpha2:<6g} final l_lm {final_lm:.3f}"
        f" | layer-1 C_avg {c1:.3f} | C_avg trace {cavg[0][1]:.2f} -> {cavg[-1][1]:.2f}"
    )
    active = [b for b in breakdown if b.l_smooth > 0]
    if active:
        print(f"{'':>14}  smoothness term active from step {active[0].step}"
              f" (l_smooth {active[0].l_smooth:.2f} -> {active[-1].l_smooth:.2f})")
