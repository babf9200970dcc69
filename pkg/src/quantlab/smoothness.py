"""Input-gradient smoothness proxies.

A sequence's smoothness score is the 2-norm of the concatenation of its
per-token input gradients (a per-token-mean mode is available).  C_avg is the
mean score over a sample set, C_lower the supremum; together they sandwich
the intractable Lipschitz constant from below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .model import ModelHandle, build_forward


@dataclass
class SmoothnessReport:
    c_avg: float
    c_lower: float
    per_sequence_scores: np.ndarray
    per_token_norms: np.ndarray
    sample_count: int
    layer_index: int = 0
    aggregation: str = "concat"


@dataclass
class LayerGradientProfile:
    """Mean per-token gradient 2-norm at every tap site."""

    norms: dict[tuple[int, str], float]
    model_tag: str


def _grad_chunks(model: ModelHandle, sequences: np.ndarray, layer_index: int, chunk: int = 32):
    """Per-sequence input gradients, evaluated in batched passes.

    Cross-sequence gradients vanish, so the batch-mean loss yields each
    sequence's own gradient scaled by 1/B; the scale is undone here.
    """
    sequences = np.asarray(sequences)
    for lo in range(0, sequences.shape[0], chunk):
        batch = sequences[lo : lo + chunk]
        fg = build_forward(model, batch)
        target = fg.token_embedding if layer_index == 0 else fg.stream[layer_index]
        grad = E.backward(fg.loss, [target])[target].data
        yield grad * batch.shape[0]


def sequence_scores(
    model: ModelHandle,
    sample_set: np.ndarray,
    layer_index: int = 0,
    aggregation: str = "concat",
):
    """Per-sequence smoothness scores and per-token gradient norms."""
    if aggregation not in ("concat", "token_mean"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    scores = []
    token_norms = []
    for grads in _grad_chunks(model, sample_set, layer_index):
        norms = np.linalg.norm(grads.astype(np.float64), axis=-1)  # (B, T)
        token_norms.append(norms.reshape(-1))
        if aggregation == "concat":
            scores.append(np.sqrt((norms**2).sum(axis=1)))
        else:
            scores.append(norms.mean(axis=1))
    return np.concatenate(scores), np.concatenate(token_norms)


def smoothness_report(
    model: ModelHandle,
    sample_set: np.ndarray,
    layer_index: int = 0,
    aggregation: str = "concat",
) -> SmoothnessReport:
    sample_set = np.asarray(sample_set)
    if sample_set.shape[0] < 1:
        raise ValueError("sample set is empty")
    scores, token_norms = sequence_scores(model, sample_set, layer_index, aggregation)
    return SmoothnessReport(
        c_avg=float(scores.mean()),
        c_lower=float(scores.max()),
        per_sequence_scores=scores,
        per_token_norms=token_norms,
        sample_count=int(sample_set.shape[0]),
        layer_index=layer_index,
        aggregation=aggregation,
    )


def compute_c_avg(model: ModelHandle, sample_set: np.ndarray, layer_index: int = 0) -> float:
    return smoothness_report(model, sample_set, layer_index).c_avg


def compute_c_lower(model: ModelHandle, sample_set: np.ndarray, layer_index: int = 0) -> float:
    return smoothness_report(model, sample_set, layer_index).c_lower


def smoothness_score_distribution(
    model: ModelHandle,
    sample_set: np.ndarray,
    bins: int = 32,
    value_range: tuple[float, float] | None = None,
):
    """Per-sequence scores with histogram binning.

    Pass the same ``value_range`` for every model being compared so the bins
    are shared.
    """
    sample_set = np.asarray(sample_set)
    if sample_set.shape[0] < 32:
        raise ValueError(f"need at least 32 sequences, got {sample_set.shape[0]}")
    scores, _ = sequence_scores(model, sample_set)
    counts, edges = np.histogram(scores, bins=bins, range=value_range)
    return scores, edges, counts


def layer_gradient_profile(model: ModelHandle, batch: np.ndarray, model_tag: str = "") -> LayerGradientProfile:
    """Mean per-token gradient 2-norm at each normalization tap."""
    fg = build_forward(model, batch)
    sites = dict(fg.taps)
    sites[(model.config.n_layer, "input_layernorm_in")] = fg.stream[-1]
    keys = list(sites)
    grads = E.backward(fg.loss, [sites[k] for k in keys])
    bsz = np.asarray(batch).shape[0] if np.asarray(batch).ndim == 2 else 1
    norms = {}
    for k in keys:
        g = grads[sites[k]].data.astype(np.float64) * bsz
        norms[k] = float(np.linalg.norm(g, axis=-1).mean())
    return LayerGradientProfile(norms=norms, model_tag=model_tag or model.precision_tag)


def spectral_product_bound(weights) -> float:
    """Product of layer spectral norms: the loose Lipschitz upper bound for a
    purely linear chain (attention admits no finite global bound)."""
    prod = 1.0
    for w in weights:
        prod *= float(np.linalg.norm(np.atleast_2d(w), ord=2))
    return prod
