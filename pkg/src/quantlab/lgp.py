"""Learnable-clipping PTQ with gradient preservation.

Blocks (one transformer layer each) are distilled shallow-to-deep.  For the
active block, clip factors (gamma, beta) parametrize the quantization range
of every projection; the joint objective matches the block's outputs and the
model's gradients at the block input against frozen full-precision targets:

    || z - z_hat ||_F^2  +  alpha1 * || dX - dX_hat ||_F^2

Integer codes are refreshed from the current clip values at the start of each
epoch and held constant inside it, so the per-epoch gradient wrt (gamma,
beta) is the true derivative of the piecewise-smooth objective and passes a
finite-difference check (a straight-through rule on the rounding would not).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .model import ModelHandle, build_forward
from .quant import ClipParams, QuantSpec, _group_bounds
from .model import PROJECTION_NAMES


@dataclass
class LgpConfig:
    alpha1: float = 0.0
    epochs: int = 40
    learning_rate: float = 0.01


@dataclass
class BlockTargets:
    block_index: int
    outputs: list[np.ndarray]      # z per calibration batch
    input_grads: list[np.ndarray]  # dX per calibration batch


@dataclass
class BlockDistillState:
    block_index: int
    clip: dict[str, ClipParams]
    targets: BlockTargets
    trace: list[tuple[int, float, float, float]] = field(default_factory=list)


def capture_block_targets(fp_model: ModelHandle, calib_batches, block_index: int) -> BlockTargets:
    """Frozen distillation targets from full-precision full-model passes."""
    outputs, grads = [], []
    for batch in calib_batches:
        fg = build_forward(fp_model, batch)
        x_in = fg.stream[block_index]
        g = E.backward(fg.loss, [x_in])[x_in]
        outputs.append(fg.stream[block_index + 1].data.copy())
        grads.append(g.data.copy())
    return BlockTargets(block_index=block_index, outputs=outputs, input_grads=grads)


def _group_stats(w: np.ndarray, group_size: int):
    d_out, d_in = w.shape
    bounds = _group_bounds(d_in, group_size)
    wmax = np.stack([w[:, lo:hi].max(axis=1) for lo, hi in bounds], axis=1)
    wmin = np.stack([w[:, lo:hi].min(axis=1) for lo, hi in bounds], axis=1)
    return bounds, wmax, wmin


def refresh_codes(w: np.ndarray, spec: QuantSpec, gamma: np.ndarray, beta: np.ndarray):
    """Integer codes minus zero-points for the current clip values."""
    bounds, wmax, wmin = _group_stats(w, spec.group_size)
    levels = spec.n_levels
    h = (gamma * wmax - beta * wmin) / levels
    h = np.maximum(h, 1e-12)
    z = np.rint(-(beta * wmin) / h)
    cmz = np.empty_like(w)
    for gi, (lo, hi) in enumerate(bounds):
        codes = np.clip(np.rint(w[:, lo:hi] / h[:, gi : gi + 1]) + z[:, gi : gi + 1], 0, levels)
        cmz[:, lo:hi] = codes - z[:, gi : gi + 1]
    return cmz


def clipped_quantized_weight(
    w: np.ndarray,
    spec: QuantSpec,
    gamma: E.GraphValue,
    beta: E.GraphValue,
) -> E.GraphValue:
    """Graph node for the dequantized weight as a function of (gamma, beta).

    Codes are constants for the current clip values; the scale h carries the
    gradient: w_hat = h(gamma, beta) * (codes - z).
    """
    bounds, wmax, wmin = _group_stats(w, spec.group_size)
    cmz = refresh_codes(w, spec, gamma.data, beta.data)
    dtype = gamma.data.dtype
    levels = float(spec.n_levels)
    parts = []
    for gi, (lo, hi) in enumerate(bounds):
        g_col = E.slice_axis(gamma, 1, gi, gi + 1)
        b_col = E.slice_axis(beta, 1, gi, gi + 1)
        h = E.scale(
            E.sub(
                E.mul(g_col, E.constant(wmax[:, gi : gi + 1].astype(dtype))),
                E.mul(b_col, E.constant(wmin[:, gi : gi + 1].astype(dtype))),
            ),
            1.0 / levels,
        )
        parts.append(E.mul(h, E.constant(cmz[:, lo:hi].astype(dtype))))
    return parts[0] if len(parts) == 1 else E.concat(parts, axis=1)


def _block_param_names(block_index: int) -> list[str]:
    return [f"layers.{block_index}.{p}" for p in PROJECTION_NAMES]


def _joint_loss(model, batch, block_index, spec, clip_leaves, targets, batch_idx, alpha1):
    overrides = {}
    for name, (g_leaf, b_leaf) in clip_leaves.items():
        overrides[name] = clipped_quantized_weight(model.params[name], spec, g_leaf, b_leaf)
    fg = build_forward(model, batch, param_overrides=overrides)
    fit = E.frobenius_norm_sq(
        E.sub(fg.stream[block_index + 1], E.constant(targets.outputs[batch_idx]))
    )
    x_in = fg.stream[block_index]
    g = E.backward(fg.loss, [x_in])[x_in]
    grad_term = E.frobenius_norm_sq(E.sub(g, E.constant(targets.input_grads[batch_idx])))
    joint = E.add(fit, E.scale(grad_term, alpha1)) if alpha1 > 0 else fit
    return joint, float(fit.data), float(grad_term.data)


def lgp_distill_block(
    model: ModelHandle,
    calib_batches,
    block_index: int,
    spec: QuantSpec,
    cfg: LgpConfig,
    targets: BlockTargets | None = None,
) -> BlockDistillState:
    """Train clip factors for one block against frozen fp targets.

    ``model`` carries the current state: already-distilled shallower blocks
    hold their dequantized weights, deeper blocks are full precision.
    """
    if targets is None:
        targets = capture_block_targets(model, calib_batches, block_index)

    names = _block_param_names(block_index)
    clip_np = {}
    for name in names:
        w = model.params[name]
        n_groups = len(_group_bounds(w.shape[1], spec.group_size))
        clip_np[name] = (
            np.ones((w.shape[0], n_groups), dtype=np.float64),
            np.ones((w.shape[0], n_groups), dtype=np.float64),
        )

    state = BlockDistillState(block_index=block_index, clip={}, targets=targets)
    lr = cfg.learning_rate
    restarts = 0
    epoch = 0
    while epoch < cfg.epochs:
        leaves = {
            name: (E.leaf(gb[0].copy()), E.leaf(gb[1].copy())) for name, gb in clip_np.items()
        }
        fit_total = grad_total = 0.0
        grad_acc = {name: (0.0, 0.0) for name in names}
        nan_hit = False
        for bi, batch in enumerate(calib_batches):
            joint, fit, gterm = _joint_loss(
                model, batch, block_index, spec, leaves, targets, bi, cfg.alpha1
            )
            if not np.isfinite(joint.data):
                nan_hit = True
                break
            fit_total += fit
            grad_total += gterm
            wrt = [leaf for pair in leaves.values() for leaf in pair]
            grads = E.backward(joint, wrt)
            for name, (g_leaf, b_leaf) in leaves.items():
                ga, gb = grad_acc[name]
                grad_acc[name] = (ga + grads[g_leaf].data, gb + grads[b_leaf].data)

        if nan_hit:
            restarts += 1
            if restarts > 3:
                raise RuntimeError(f"block {block_index}: joint loss NaN after 3 lr restarts")
            lr *= 0.5
            continue

        for name in names:
            g_arr, b_arr = clip_np[name]
            ga, gb = grad_acc[name]
            clip_np[name] = (
                np.clip(g_arr - lr * ga, ClipParams.CLIP_LO, ClipParams.CLIP_HI),
                np.clip(b_arr - lr * gb, ClipParams.CLIP_LO, ClipParams.CLIP_HI),
            )
        state.trace.append((epoch, fit_total, grad_total, fit_total + cfg.alpha1 * grad_total))
        epoch += 1

    state.clip = {
        name: ClipParams(gamma=gb[0], beta=gb[1]) for name, gb in clip_np.items()
    }
    return state


def apply_block_clips(model: ModelHandle, block_index: int, spec: QuantSpec, clip: dict[str, ClipParams]):
    """Freeze a distilled block: replace its weights with dequantized values."""
    for name, cp in clip.items():
        w = model.params[name]
        gamma = E.leaf(cp.gamma)
        beta = E.leaf(cp.beta)
        w_hat = clipped_quantized_weight(w.astype(np.float64), spec, gamma, beta)
        model.params[name] = w_hat.data.astype(w.dtype)


def run_lgp(
    fp_model: ModelHandle,
    calib_batches,
    spec: QuantSpec,
    cfg: LgpConfig,
):
    """Sequential shallow-to-deep LGP over all blocks.

    Targets always come from the original full-precision model; already
    distilled blocks stay frozen at their quantized weights.
    """
    work = fp_model.copy()
    states = []
    for b in range(fp_model.config.n_layer):
        targets = capture_block_targets(fp_model, calib_batches, b)
        state = lgp_distill_block(work, calib_batches, b, spec, cfg, targets=targets)
        apply_block_clips(work, b, spec, state.clip)
        states.append(state)
    work.precision_tag = f"quantized-{spec.bits}-bit-lgp"
    return work, states


def select_alpha1_magnitude(fit_term: float, grad_term: float, magnitudes):
    """Ratio rule: pick the magnitude bringing the weighted gradient term
    within [0.1, 10]x of the fitting term.

    Returns (choice, qualifying): choice is None when several magnitudes
    qualify and a downstream comparison must break the tie.
    """
    magnitudes = sorted(float(m) for m in magnitudes)
    if grad_term == 0.0:
        warnings.warn("gradient-preservation term is zero; alpha1 is irrelevant")
        return magnitudes[0], []
    ratios = {m: (m * grad_term) / fit_term for m in magnitudes}
    qualifying = [m for m, r in ratios.items() if 0.1 <= r <= 10.0]
    if not qualifying:
        return min(magnitudes, key=lambda m: abs(np.log10(ratios[m]))), []
    # the magnitude closest to parity wins; an exact tie in log distance
    # defers to a downstream comparison between the tied candidates
    dist = {m: abs(np.log10(ratios[m])) for m in qualifying}
    best = min(dist.values())
    tied = [m for m in qualifying if np.isclose(dist[m], best, atol=1e-12)]
    if len(tied) == 1:
        return tied[0], qualifying
    return None, tied


def alpha1_scale_search(
    model: ModelHandle,
    calib_batches,
    block_index: int,
    spec: QuantSpec,
    magnitudes,
    probe_epochs: int = 3,
) -> float:
    """Pick alpha1 so the weighted gradient term is comparable to the fitting
    term at initialization; tie-break qualifying magnitudes by a short
    distillation run scored on the joint objective."""
    targets = capture_block_targets(model, calib_batches, block_index)
    names = _block_param_names(block_index)
    leaves = {}
    for name in names:
        w = model.params[name]
        n_groups = len(_group_bounds(w.shape[1], spec.group_size))
        leaves[name] = (
            E.leaf(np.ones((w.shape[0], n_groups))),
            E.leaf(np.ones((w.shape[0], n_groups))),
        )
    fit_total = grad_total = 0.0
    for bi, batch in enumerate(calib_batches):
        _, fit, gterm = _joint_loss(model, batch, block_index, spec, leaves, targets, bi, 0.0)
        fit_total += fit
        grad_total += gterm

    choice, qualifying = select_alpha1_magnitude(fit_total, grad_total, magnitudes)
    if choice is not None:
        return choice

    best, best_joint = None, np.inf
    for m in qualifying:
        cfg = LgpConfig(alpha1=float(m), epochs=probe_epochs)
        state = lgp_distill_block(model.copy(), calib_batches, block_index, spec, cfg, targets=targets)
        fit_end, grad_end = state.trace[-1][1], state.trace[-1][2]
        score = fit_end + m * grad_end
        if score < best_joint:
            best, best_joint = m, score
    return float(best)
