"""Quantization-aware training of ternary models with gradient-norm
regularization.

Latent weights stay full precision; the forward pass ternarizes every
projection through the straight-through quantizer.  After the activation
step, the objective gains the smoothness term

    L = L_lm + alpha2 * L_smooth,
    L_smooth = mean over token positions of ||d L_lm / d x^(reg_layer)||^2,

whose parameter gradient requires differentiating through a backward pass.
Before the activation step the update path is identical to plain training,
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .model import (
    AdamW,
    ModelHandle,
    TrainSchedule,
    TrainingDiverged,
    build_forward,
    lr_at,
    sample_batch,
    toggle_rmsnorm_variant,  # noqa: F401  (re-exported: the QAT variant toggle)
)
from .smoothness import compute_c_avg


@dataclass
class LgrConfig:
    schedule: TrainSchedule
    alpha2: float = 0.01
    reg_layer: int = 1
    activation_fraction: float = 0.5
    freeze_embedding: bool = False
    cavg_every: int = 50
    cavg_probe_sequences: int = 8

    def __post_init__(self):
        if self.alpha2 < 0:
            raise ValueError("alpha2 must be >= 0")
        if self.reg_layer not in (0, 1):
            raise ValueError("reg_layer must be 0 or 1")


@dataclass
class LossBreakdown:
    step: int
    l_lm: float
    l_smooth: float
    total: float
    lr: float


def smooth_loss(model: ModelHandle, batch, reg_layer: int = 1):
    """Differentiable mean squared gradient norm at the chosen stream point.

    Returns (l_smooth node, forward graph).  The score being differentiated
    is the sequence-level total NLL (so one hyperparameter setting carries
    across sequence lengths and model scales); the per-position mean counts
    predicted positions, and the batch averaging inside the LM loss is
    undone.  For a single-prediction sequence this reduces to the squared
    norm of that position's gradient.
    """
    fg = build_forward(model, batch)
    batch = np.asarray(batch)
    bsz, t = (1, batch.shape[0]) if batch.ndim == 1 else batch.shape
    target = fg.token_embedding if reg_layer == 0 else fg.stream[reg_layer]
    g = E.backward(fg.loss, [target])[target]
    l_smooth = E.scale(E.frobenius_norm_sq(g), bsz * (t - 1))
    return l_smooth, fg


def qat_train(fp_init: ModelHandle, corpus: np.ndarray, cfg: LgrConfig):
    """Ternary QAT with optional gradient regularization.

    Returns (ternary handle, LossBreakdown trace, C_avg trace).  The LGR term
    activates at activation_fraction of the schedule; C_avg is sampled on a
    fixed probe set every cavg_every steps.
    """
    sched = cfg.schedule
    handle = fp_init.copy()
    handle.quant_mode = "ternary"
    handle.precision_tag = "ternary"

    opt = AdamW(sched)
    rng = np.random.default_rng(sched.seed)
    probe_rng = np.random.default_rng(sched.seed + 7919)
    probe = sample_batch(corpus, probe_rng, cfg.cavg_probe_sequences, sched.seq_len)

    activation_step = int(cfg.activation_fraction * sched.steps)
    breakdown: list[LossBreakdown] = []
    cavg_trace: list[tuple[int, float]] = []

    for step in range(sched.steps):
        if step % cfg.cavg_every == 0:
            cavg_trace.append((step, compute_c_avg(handle, probe, layer_index=0)))

        batch = sample_batch(corpus, rng, sched.batch_size, sched.seq_len)
        lgr_active = cfg.alpha2 > 0 and step >= activation_step
        if lgr_active:
            l_smooth_node, fg = smooth_loss(handle, batch, cfg.reg_layer)
            objective = E.add(fg.loss, E.scale(l_smooth_node, cfg.alpha2))
            l_smooth = float(l_smooth_node.data)
        else:
            fg = build_forward(handle, batch)
            objective = fg.loss
            l_smooth = 0.0

        l_lm = float(fg.loss.data)
        if not np.isfinite(l_lm) or not np.isfinite(l_smooth):
            raise TrainingDiverged(f"loss diverged at step {step}", breakdown)
        lr = lr_at(sched, step)
        breakdown.append(
            LossBreakdown(
                step=step,
                l_lm=l_lm,
                l_smooth=l_smooth,
                total=l_lm + cfg.alpha2 * l_smooth,
                lr=lr,
            )
        )

        wrt_names = [
            n for n in fg.params
            if not (cfg.freeze_embedding and n == "embedding")
        ]
        grads = E.backward(objective, [fg.params[n] for n in wrt_names])
        grad_arrays = {n: grads[fg.params[n]].data for n in wrt_names}
        opt.step(handle.params, grad_arrays, lr)

    cavg_trace.append((sched.steps, compute_c_avg(handle, probe, layer_index=0)))
    return handle, breakdown, cavg_trace
