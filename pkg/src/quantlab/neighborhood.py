"""Sequence-neighborhood evaluation: reverse perplexity curves and
decoding-tree sparsity.

For each context the evaluated model ranks next tokens; the context extended
with the rank-k token is scored by the reference model.  Scoring uses the
exact causal decomposition: one reference pass over the context supplies both
the shared prefix NLL and the appended token's NLL, so a full rPPL-1..k curve
costs two forward passes per context batch.  ``directional_derivative`` scores
the extended sequence directly and serves as the independent cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import InputError, ModelHandle, build_forward

SCOPES = ("full_sequence", "appended_token_only")


@dataclass(frozen=True)
class NeighborhoodSpec:
    context_len: int = 128
    k_max: int = 40
    n_contexts: int = 128
    seed: int = 0
    scope: str = "full_sequence"

    def __post_init__(self):
        if self.context_len < 1 or self.n_contexts < 1:
            raise InputError("context_len and n_contexts must be >= 1")
        if self.scope not in SCOPES:
            raise InputError(f"scope must be one of {SCOPES}")


@dataclass
class RpplCurve:
    k_values: np.ndarray
    rppl: np.ndarray
    per_context: np.ndarray  # (n_contexts, k_max) per-context perplexities
    n_contexts: int
    context_length: int
    scope: str
    aggregation: str = "log-mean"


def sample_contexts(
    corpus: np.ndarray, spec: NeighborhoodSpec, boundary_token: int | None = None
) -> np.ndarray:
    """Fixed-seed context windows from a token stream.

    With ``boundary_token`` set, windows end on that token (word boundaries
    for byte text), where the next-token support is widest and deep rankings
    carry signal.
    """
    corpus = np.asarray(corpus)
    if corpus.size < spec.context_len + 1:
        raise InputError("corpus shorter than one context window")
    rng = np.random.default_rng(spec.seed)
    t = spec.context_len
    if boundary_token is None:
        starts = rng.integers(0, corpus.size - t, size=spec.n_contexts)
        return np.stack([corpus[s : s + t] for s in starts]).astype(np.int64)
    ends = np.where(corpus == boundary_token)[0]
    ends = ends[ends >= t]
    if ends.size < spec.n_contexts:
        raise InputError("not enough boundary positions for the requested contexts")
    picks = rng.choice(ends, size=spec.n_contexts, replace=False)
    return np.stack([corpus[e - t + 1 : e + 1] for e in picks]).astype(np.int64)


def _chunked_forward(model: ModelHandle, contexts: np.ndarray, chunk: int = 32):
    for lo in range(0, contexts.shape[0], chunk):
        yield contexts[lo : lo + chunk], build_forward(model, contexts[lo : lo + chunk], with_loss=False)


def _log_probs(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _reference_pieces(model_ref: ModelHandle, contexts: np.ndarray):
    """Per context: summed prefix NLL and the last position's NLL per token."""
    prefix_sums, last_nll = [], []
    for batch, fg in _chunked_forward(model_ref, contexts):
        logp = _log_probs(fg.logits.data)
        t = batch.shape[1]
        picked = np.take_along_axis(logp[:, : t - 1, :], batch[:, 1:, None], axis=-1)[..., 0]
        prefix_sums.append(-picked.sum(axis=1))
        last_nll.append(-logp[:, -1, :])
    return np.concatenate(prefix_sums), np.concatenate(last_nll)


def _rankings(model_q: ModelHandle, contexts: np.ndarray, k_max: int) -> np.ndarray:
    """Top-k next tokens per context, descending probability, ties by id."""
    vocab = model_q.config.vocab_size
    tops = []
    for batch, fg in _chunked_forward(model_q, contexts):
        logits = fg.logits.data[:, -1, :].astype(np.float64)
        for row in logits:
            order = np.lexsort((np.arange(vocab), -row))  # logit order = prob order
            tops.append(order[:k_max])
    return np.stack(tops)


def rppl_curve(
    model_q: ModelHandle,
    model_ref: ModelHandle,
    spec: NeighborhoodSpec,
    contexts: np.ndarray | None = None,
    corpus: np.ndarray | None = None,
    aggregation: str = "log-mean",
) -> RpplCurve:
    """Reverse perplexity for ranks 1..k_max under the reference model."""
    if model_q.config.vocab_size != model_ref.config.vocab_size:
        raise InputError("ranker and reference models must share a vocabulary")
    if spec.k_max > model_q.config.vocab_size:
        raise InputError("k_max exceeds vocabulary size")
    if aggregation not in ("log-mean", "arithmetic"):
        raise InputError(f"unknown aggregation {aggregation!r}")
    if contexts is None:
        if corpus is None:
            raise InputError("pass either contexts or a corpus to sample from")
        contexts = sample_contexts(corpus, spec)

    t = contexts.shape[1]
    ranked = _rankings(model_q, contexts, spec.k_max)  # (n, k)
    prefix_sum, last_nll = _reference_pieces(model_ref, contexts)

    appended = np.take_along_axis(last_nll, ranked, axis=1)  # (n, k)
    if spec.scope == "full_sequence":
        nll = (prefix_sum[:, None] + appended) / t
    else:
        nll = appended

    per_context = np.exp(nll)
    if aggregation == "log-mean":
        rppl = np.exp(nll.mean(axis=0))
    else:
        rppl = per_context.mean(axis=0)
    return RpplCurve(
        k_values=np.arange(1, spec.k_max + 1),
        rppl=rppl,
        per_context=per_context,
        n_contexts=contexts.shape[0],
        context_length=t,
        scope=spec.scope,
        aggregation=aggregation,
    )


def effective_candidates(curve: RpplCurve, threshold_ratio: float = 1.5):
    """Largest k per context whose whole rPPL prefix stays within
    threshold_ratio of rPPL-1 (contiguous prefix rule)."""
    if threshold_ratio <= 1.0:
        raise InputError("threshold_ratio must exceed 1")
    limits = threshold_ratio * curve.per_context[:, :1]
    within = curve.per_context <= limits
    counts = np.where(
        within.all(axis=1),
        curve.per_context.shape[1],
        np.argmin(within, axis=1),  # first rank outside the threshold
    )
    return counts.astype(int), float(counts.mean())


def directional_derivative(model_ref: ModelHandle, context: np.ndarray, token: int) -> float:
    """Score of the extended sequence c+w: its mean NLL under the reference.

    Runs a full forward over the extended sequence, independent of the
    prefix-sharing shortcut used by ``rppl_curve``.
    """
    context = np.asarray(context, dtype=np.int64)
    if not 0 <= token < model_ref.config.vocab_size:
        raise InputError(f"token {token} outside the vocabulary")
    extended = np.concatenate([context, [token]])
    fg = build_forward(model_ref, extended[None, :], with_loss=False)
    logp = _log_probs(fg.logits.data)[0]
    picked = logp[np.arange(extended.size - 1), extended[1:]]
    return float(-picked.mean())


def normalized_slope(curve: RpplCurve) -> float:
    """(rPPL(k_max) - rPPL(1)) / rPPL(1): the neighborhood collapse rate."""
    return float((curve.rppl[-1] - curve.rppl[0]) / curve.rppl[0])
