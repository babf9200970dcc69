"""Tiny decoder-only transformer: byte-level vocabulary, pre-norm RMS blocks,
SiLU-gated MLP, learned positional embeddings, and named gradient tap points
at every normalization boundary.

Residual-stream indexing: ``x^(0)`` is the token embedding / input to block 0,
``x^(i)`` the input to block ``i``, and ``x^(n_layer)`` the final-norm input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine as E

PROJECTION_NAMES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")

TAP_SITES = (
    "input_layernorm_in",
    "input_layernorm_out",
    "post_attention_layernorm_in",
    "post_attention_layernorm_out",
    "embedding_out",
)


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class ModelConfig:
    n_layer: int
    n_head: int
    d_hidden: int
    d_inter: int
    vocab_size: int = 256
    max_seq_len: int = 256
    use_rms_norm_before_linear: bool = False

    def __post_init__(self):
        for name in ("n_layer", "n_head", "d_hidden", "d_inter", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_hidden % self.n_head != 0:
            raise ConfigError(
                f"d_hidden ({self.d_hidden}) must be divisible by n_head ({self.n_head})"
            )

    @property
    def head_dim(self) -> int:
        return self.d_hidden // self.n_head


def toggle_rmsnorm_variant(config: ModelConfig) -> ModelConfig:
    """Controlled-comparison variant: RMS-normalize inputs of every projection."""
    return replace(config, use_rms_norm_before_linear=True)


@dataclass
class ModelHandle:
    config: ModelConfig
    params: dict[str, np.ndarray]
    precision_tag: str = "fp"
    quant_mode: str | None = None  # "ternary" applies simulated quantization in forward

    def copy(self) -> "ModelHandle":
        return ModelHandle(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            precision_tag=self.precision_tag,
            quant_mode=self.quant_mode,
        )


def param_count(config: ModelConfig) -> int:
    d, di, v, s = config.d_hidden, config.d_inter, config.vocab_size, config.max_seq_len
    per_layer = 4 * d * d + 3 * di * d + 2 * d
    return v * d + s * d + config.n_layer * per_layer + d + v * d


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelHandle:
    """Deterministic init: N(0, 0.02) matrices, unit norm gains."""
    rng = np.random.default_rng(seed)
    d, di, v, s = config.d_hidden, config.d_inter, config.vocab_size, config.max_seq_len

    def normal(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(dtype)

    params: dict[str, np.ndarray] = {}
    params["embedding"] = normal(v, d)
    params["pos_embedding"] = normal(s, d)
    for i in range(config.n_layer):
        params[f"layers.{i}.input_norm"] = np.ones(d, dtype=dtype)
        params[f"layers.{i}.wq"] = normal(d, d)
        params[f"layers.{i}.wk"] = normal(d, d)
        params[f"layers.{i}.wv"] = normal(d, d)
        params[f"layers.{i}.wo"] = normal(d, d)
        params[f"layers.{i}.post_attn_norm"] = np.ones(d, dtype=dtype)
        params[f"layers.{i}.w_gate"] = normal(di, d)
        params[f"layers.{i}.w_up"] = normal(di, d)
        params[f"layers.{i}.w_down"] = normal(d, di)
    params["final_norm"] = np.ones(d, dtype=dtype)
    params["unembedding"] = normal(v, d)
    return ModelHandle(config=config, params=params)


@dataclass
class ForwardGraph:
    """Handles into one forward pass: loss, logits, parameter leaves, the
    residual stream x^(0)..x^(n_layer), tap-site nodes, and (optionally) one
    (input alias, output) node pair per linear projection."""

    loss: E.GraphValue | None
    logits: E.GraphValue
    params: dict[str, E.GraphValue]
    stream: list[E.GraphValue]
    token_embedding: E.GraphValue
    taps: dict[tuple[int, str], E.GraphValue]
    linears: dict[tuple[int, str], tuple[E.GraphValue, E.GraphValue]] = field(default_factory=dict)


def _causal_mask(t: int, dtype) -> np.ndarray:
    mask = np.zeros((1, 1, t, t), dtype=dtype)
    mask[..., np.triu_indices(t, k=1)[0], np.triu_indices(t, k=1)[1]] = -np.inf
    return mask


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise InputError(f"tokens must be a sequence or batch of sequences, got shape {arr.shape}")
    t = arr.shape[1]
    if not 2 <= t <= config.max_seq_len:
        raise InputError(f"sequence length {t} outside [2, {config.max_seq_len}]")
    if arr.min() < 0 or arr.max() >= config.vocab_size:
        raise InputError(f"token id out of range [0, {config.vocab_size})")
    return arr


def build_forward(
    model: ModelHandle,
    tokens,
    with_loss: bool = True,
    record_linears: bool = False,
    param_overrides: dict[str, E.GraphValue] | None = None,
    inject_stream: tuple[int, E.GraphValue] | None = None,
) -> ForwardGraph:
    """Construct the full forward graph for a (batch of) token sequence(s).

    ``param_overrides`` lets callers splice in alternative weight nodes
    (e.g. clip-quantized projections during distillation); ``inject_stream``
    replaces the residual stream entering the given block with an explicit
    node, which turns the loss into a function of that hidden state.
    """
    cfg = model.config
    ids = _check_tokens(cfg, tokens)
    bsz, t = ids.shape

    pg = {name: E.leaf(arr) for name, arr in model.params.items()}
    if param_overrides:
        pg.update(param_overrides)
    dtype = model.params["embedding"].dtype

    ternary = model.quant_mode == "ternary"

    def weight_node(name: str) -> E.GraphValue:
        w = pg[name]
        if ternary and name.split(".")[-1] in PROJECTION_NAMES:
            w = E.ste_quantize(w, mode="ternary")
        return w

    def proj(x: E.GraphValue, name: str, alias_key=None) -> E.GraphValue:
        if cfg.use_rms_norm_before_linear:
            x = E.rms_norm(x)
        if alias_key is not None:
            x = E.identity(x)  # isolates this consumer edge for adjoint capture
        out = E.matmul(x, E.transpose(weight_node(name)))
        if alias_key is not None:
            linears[alias_key] = (x, out)
        return out

    taps: dict[tuple[int, str], E.GraphValue] = {}
    linears: dict = {}

    tok_emb = E.embedding(pg["embedding"], ids)
    taps[(0, "embedding_out")] = tok_emb
    pos = E.reshape(E.slice_axis(pg["pos_embedding"], 0, 0, t), (1, t, cfg.d_hidden))
    x = E.add(tok_emb, pos)

    stream = [x]
    mask = E.constant(_causal_mask(t, dtype))
    inv_sqrt_hd = 1.0 / math.sqrt(cfg.head_dim)

    def split_heads(v: E.GraphValue) -> E.GraphValue:
        v = E.reshape(v, (bsz, t, cfg.n_head, cfg.head_dim))
        return E.transpose(v, (0, 2, 1, 3))

    for i in range(cfg.n_layer):
        if inject_stream is not None and inject_stream[0] == i:
            x = inject_stream[1]
            stream[i] = x
        taps[(i, "input_layernorm_in")] = x
        a = E.rms_norm(x, pg[f"layers.{i}.input_norm"])
        taps[(i, "input_layernorm_out")] = a

        keys = [(i, n) for n in ("wq", "wk", "wv")]
        q = split_heads(proj(a, f"layers.{i}.wq", keys[0] if record_linears else None))
        k = split_heads(proj(a, f"layers.{i}.wk", keys[1] if record_linears else None))
        v = split_heads(proj(a, f"layers.{i}.wv", keys[2] if record_linears else None))

        scores = E.add(E.scale(E.matmul(q, E.transpose(k)), inv_sqrt_hd), mask)
        ctx = E.matmul(E.softmax(scores), v)
        ctx = E.reshape(E.transpose(ctx, (0, 2, 1, 3)), (bsz, t, cfg.d_hidden))
        attn_out = proj(ctx, f"layers.{i}.wo", (i, "wo") if record_linears else None)
        x = E.add(x, attn_out)

        taps[(i, "post_attention_layernorm_in")] = x
        b = E.rms_norm(x, pg[f"layers.{i}.post_attn_norm"])
        taps[(i, "post_attention_layernorm_out")] = b

        gate = proj(b, f"layers.{i}.w_gate", (i, "w_gate") if record_linears else None)
        up = proj(b, f"layers.{i}.w_up", (i, "w_up") if record_linears else None)
        mlp = proj(E.mul(E.silu(gate), up), f"layers.{i}.w_down", (i, "w_down") if record_linears else None)
        x = E.add(x, mlp)
        stream.append(x)

    if inject_stream is not None and inject_stream[0] == cfg.n_layer:
        x = inject_stream[1]
        stream[cfg.n_layer] = x
    xn = E.rms_norm(x, pg["final_norm"])
    logits = E.matmul(xn, E.transpose(pg["unembedding"]))

    loss = None
    if with_loss:
        pred = E.slice_axis(logits, 1, 0, t - 1)
        loss = E.cross_entropy(pred, ids[:, 1:])

    return ForwardGraph(
        loss=loss,
        logits=logits,
        params=pg,
        stream=stream,
        token_embedding=tok_emb,
        taps=taps,
        linears=linears,
    )


def lm_loss(model: ModelHandle, tokens) -> E.GraphValue:
    """Mean next-token cross-entropy over predicted positions."""
    return build_forward(model, tokens).loss


def input_gradient(model: ModelHandle, tokens, layer_index: int, as_graph: bool = False):
    """Gradient of the LM loss wrt the residual stream entering ``layer_index``.

    Returns per-token gradient rows (T, d_hidden) as a detached copy, or the
    live graph node pair when ``as_graph`` (needed for double backprop).
    """
    cfg = model.config
    if not 0 <= layer_index <= cfg.n_layer:
        raise E.GraphError(f"layer_index {layer_index} outside [0, {cfg.n_layer}]")
    fg = build_forward(model, tokens)
    target = fg.token_embedding if layer_index == 0 else fg.stream[layer_index]
    grad = E.backward(fg.loss, [target])[target]
    if as_graph:
        return grad, fg
    out = grad.data.copy()
    return out[0] if np.asarray(tokens).ndim == 1 else out


def next_token_ranking(model: ModelHandle, context, k_max: int):
    """Tokens sorted by descending next-token probability; ties break by id."""
    cfg = model.config
    ids = np.asarray(context, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("context must be a non-empty 1-D token sequence")
    if k_max > cfg.vocab_size:
        raise InputError(f"k_max {k_max} exceeds vocab size {cfg.vocab_size}")
    probs = next_token_distribution(model, ids[None, :])[0]
    order = np.lexsort((np.arange(cfg.vocab_size), -probs))
    return [(int(tok), float(probs[tok])) for tok in order[:k_max]]


def next_token_distribution(model: ModelHandle, contexts: np.ndarray) -> np.ndarray:
    """Next-token probabilities after each full context row; shape (B, vocab)."""
    fg = build_forward(model, contexts, with_loss=False)
    logits = fg.logits.data[:, -1, :].astype(np.float64)
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    return p


# --- training ------------------------------------------------------------------


@dataclass
class TrainSchedule:
    steps: int
    batch_size: int = 32
    seq_len: int = 256
    lr: float = 2e-4
    warmup_steps: int = 1000
    min_lr_frac: float = 0.1
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.95
    seed: int = 0


def lr_at(schedule: TrainSchedule, step: int) -> float:
    """Cosine decay with linear warmup."""
    if step < schedule.warmup_steps:
        return schedule.lr * (step + 1) / schedule.warmup_steps
    span = max(1, schedule.steps - schedule.warmup_steps)
    progress = min(1.0, (step - schedule.warmup_steps) / span)
    floor = schedule.min_lr_frac
    return schedule.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


class AdamW:
    def __init__(self, schedule: TrainSchedule):
        self.sched = schedule
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        s = self.sched
        self.t += 1
        bc1 = 1.0 - s.beta1**self.t
        bc2 = 1.0 - s.beta2**self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p, dtype=np.float64))
            v = self.v.setdefault(name, np.zeros_like(p, dtype=np.float64))
            g64 = g.astype(np.float64)
            m += (1.0 - s.beta1) * (g64 - m)
            v += (1.0 - s.beta2) * (g64 * g64 - v)
            upd = (m / bc1) / (np.sqrt(v / bc2) + 1e-8)
            if s.weight_decay:
                upd = upd + s.weight_decay * p.astype(np.float64)
            params[name] = (p.astype(np.float64) - lr * upd).astype(p.dtype)


def sample_batch(corpus: np.ndarray, rng: np.random.Generator, batch_size: int, seq_len: int) -> np.ndarray:
    if corpus.size < seq_len + 1:
        raise InputError(f"corpus too short ({corpus.size} tokens) for seq_len {seq_len}")
    starts = rng.integers(0, corpus.size - seq_len, size=batch_size)
    return np.stack([corpus[s : s + seq_len] for s in starts])


def train_baseline(
    model: ModelHandle,
    corpus: np.ndarray,
    schedule: TrainSchedule,
    frozen_params: tuple = (),
):
    """Full-precision LM training; returns (trained handle, per-step loss trace).

    ``frozen_params`` names tensors excluded from updates (controlled-variable
    baselines for the frozen-embedding comparison).
    """
    handle = model.copy()
    opt = AdamW(schedule)
    rng = np.random.default_rng(schedule.seed)
    trace: list[float] = []
    for step in range(schedule.steps):
        batch = sample_batch(corpus, rng, schedule.batch_size, schedule.seq_len)
        fg = build_forward(handle, batch)
        loss = float(fg.loss.data)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss diverged at step {step}", trace)
        trace.append(loss)
        names = [n for n in fg.params if n not in frozen_params]
        grads = E.backward(fg.loss, [fg.params[n] for n in names])
        grad_arrays = {n: grads[fg.params[n]].data for n in names}
        opt.step(handle.params, grad_arrays, lr_at(schedule, step))
    return handle, trace
