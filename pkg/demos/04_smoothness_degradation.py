"""Smoothness proxies under quantization: expected input-gradient norms rise
as the bit width drops, even when the loss barely moves."""

import numpy as np

from quantlab import model as M
from quantlab import quant as Q
from quantlab import smoothness as S

from _common import OUT, demo_corpus, demo_model

corpus = demo_corpus()
model = demo_model(corpus)
rng = np.random.default_rng(1)
sample = M.sample_batch(corpus.heldout, rng, 32, 48)
held = M.sample_batch(corpus.heldout, rng, 8, 48)

rows = []
print(f"{'model':>6} | {'heldout loss':>12} | {'C_avg':>8} | {'C_lower':>8}")
for tag, m in [("fp", model)] + [
    (f"{b}-bit", Q.quantize_model_rtn(model, Q.QuantSpec(bits=b, group_size=32)))
    for b in (8, 4, 3, 2)
]:
    rep = S.smoothness_report(m, sample)
    loss = float(M.lm_loss(m, held).data)
    print(f"{tag:>6} | {loss:12.4f} | {rep.c_avg:8.4f} | {rep.c_lower:8.4f}")
    rows += [(tag, i, s) for i, s in enumerate(rep.per_sequence_scores)]

out = OUT / "smoothness_scores.csv"
out.write_text("model,sequence,score\n" + "\n".join(f"{t},{i},{s!r}" for t, i, s in rows) + "\n")
print(f"\nper-sequence scores written to {out}")

print("\nlayer-wise gradient profile (note the layer-0 spike):")
prof = S.layer_gradient_profile(model, held)
for (layer, site), v in sorted(prof.norms.items()):
    if site in ("embedding_out", "input_layernorm_in"):
        print(f"  layer {layer} {site:28s} {v:.5f}")
