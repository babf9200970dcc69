"""Experiment orchestration: corpus ingestion, configuration schema,
subcommand runners, manifests, and CSV artifacts."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .model import InputError, ModelConfig, ModelHandle, TrainSchedule


# --- corpus ---------------------------------------------------------------------


@dataclass
class CorpusSplit:
    tokens: np.ndarray  # full byte-level stream
    train: np.ndarray
    heldout: np.ndarray


def ingest_corpus(path, seed: int = 1234, block_size: int = 8192, holdout_frac: float = 0.1) -> CorpusSplit:
    """Byte-level tokens with a deterministic 90/10 block-shuffle split."""
    data = Path(path).read_bytes()
    if not data:
        raise InputError(f"corpus file {path} is empty")
    tokens = np.frombuffer(data, dtype=np.uint8).astype(np.int64)

    n_blocks = (tokens.size + block_size - 1) // block_size
    order = np.random.default_rng(seed).permutation(n_blocks)
    n_hold = max(1, int(round(n_blocks * holdout_frac))) if n_blocks > 1 else 0
    hold_ids = set(order[:n_hold].tolist())

    train_parts, hold_parts = [], []
    for b in range(n_blocks):
        chunk = tokens[b * block_size : (b + 1) * block_size]
        (hold_parts if b in hold_ids else train_parts).append(chunk)
    train = np.concatenate(train_parts) if train_parts else np.empty(0, dtype=np.int64)
    heldout = np.concatenate(hold_parts) if hold_parts else np.empty(0, dtype=np.int64)
    return CorpusSplit(tokens=tokens, train=train, heldout=heldout)


_WORDS = (
    "the of and to in a is that it was for on are with as his they at be this "
    "from have or had by word but not what all were when we there can an your "
    "which their said if do will each about how up out them she many some so "
    "these would other into has more her two like him see time could no make "
    "than first been its who now people my made over did down only way find "
    "use may water long little very after called just where most know get "
    "through back much before go good new write our used me man too any day "
    "same right look think also around another came come work three must"
).split()


def synthetic_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic English-like filler text for desk-scale experiments.

    Zipf-weighted common words, numbers, case mixing and punctuation spread
    probability mass over ~70 distinct bytes, so top-40 next-byte rankings
    stay meaningful while the digraph structure remains learnable.
    """
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, len(_WORDS) + 1, dtype=np.float64)
    weights = 1.0 / ranks
    weights /= weights.sum()

    # rare standalone marker bytes with geometric frequencies keep the
    # next-byte distribution long-tailed (nll roughly linear in rank), so
    # deep rankings stay meaningful at byte level; the ordering rotates with
    # the preceding word's length, putting ranking structure on context-
    # dependent pathways instead of marginal statistics
    markers = rng.permutation(np.arange(128, 248))
    mw = 0.93 ** np.arange(markers.size, dtype=np.float64)
    mw /= mw.sum()

    pieces: list[str] = []
    size = 0
    while size < n_bytes:
        n_words = int(rng.integers(4, 13))
        words = []
        extra = "#$%&*+/<=>@[]^_`{|}~"
        for i in rng.choice(len(_WORDS), size=n_words, p=weights):
            w = _WORDS[i]
            r = rng.random()
            if r < 0.10:
                w = w.capitalize()
            elif r < 0.13:
                w = w.upper()
            if rng.random() < 0.08:
                w = str(rng.integers(0, 1000))
            if rng.random() < 0.06:
                w = rng.choice(["'", '"', "("]) + w + rng.choice(["'", '"', ")"])
            if rng.random() < 0.05:
                w = w + extra[int(rng.integers(0, len(extra)))]
            words.append(w)
            if rng.random() < 0.22:
                rot = (len(w) % 5) * 24
                rank = int(rng.choice(markers.size, p=mw))
                words.append(chr(markers[(rank + rot) % markers.size]))
        body = words[0].capitalize()
        for w in words[1:]:
            body += rng.choice([", ", "; ", " ", " ", " ", " "]) + w
        body += rng.choice([". ", ". ", ". ", "! ", "? ", ":\n"])
        if rng.random() < 0.06:
            body += "\n"
        pieces.append(body)
        size += len(body)
    return "".join(pieces).encode("latin-1")[:n_bytes]


# --- configuration ----------------------------------------------------------------


class ConfigError(ValueError):
    pass


@dataclass
class QuantSection:
    bits: list = field(default_factory=lambda: [8, 4, 3, 2])
    group_size: int = 64
    symmetric: bool = False
    method: str = "rtn"  # rtn | gptq | lgp
    calib_batches: int = 2
    calib_batch_size: int = 8
    calib_seq_len: int = 128

    def __post_init__(self):
        if isinstance(self.bits, int):
            self.bits = [self.bits]
        if self.method not in ("rtn", "gptq", "lgp"):
            raise ConfigError(f"unknown quantization method {self.method!r}")


@dataclass
class LgpSection:
    alpha1: float = 0.0
    epochs: int = 40
    learning_rate: float = 0.01
    magnitudes: list = field(default_factory=lambda: [10.0**k for k in range(-2, 7)])


@dataclass
class LgrSection:
    alpha2: float = 0.01
    reg_layer: int = 1
    activation_fraction: float = 0.5
    freeze_embedding: bool = False
    cavg_every: int = 50
    schedule: TrainSchedule = field(
        default_factory=lambda: TrainSchedule(steps=200, batch_size=8, seq_len=64, lr=2e-3, warmup_steps=20)
    )


@dataclass
class NeighborhoodSection:
    context_len: int = 128
    k_max: int = 40
    n_contexts: int = 128
    seed: int = 0
    scope: str = "full_sequence"
    threshold_ratio: float = 1.5
    boundary_token: int | None = None  # sample contexts ending on this token


@dataclass
class ExperimentConfig:
    corpus_path: str
    output_dir: str
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig(n_layer=4, n_head=4, d_hidden=128, d_inter=256, max_seq_len=256)
    )
    quant: QuantSection = field(default_factory=QuantSection)
    lgp: LgpSection = field(default_factory=LgpSection)
    lgr: LgrSection = field(default_factory=LgrSection)
    neighborhood: NeighborhoodSection = field(default_factory=NeighborhoodSection)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    checkpoint: str | None = None

    def canonical(self) -> dict:
        """Location-independent experiment identity (output_dir excluded)."""
        data = json.loads(json.dumps(asdict(self), sort_keys=True))
        data.pop("output_dir", None)
        return data


_SECTION_TYPES = {
    "model": ModelConfig,
    "quant": QuantSection,
    "lgp": LgpSection,
    "lgr": LgrSection,
    "neighborhood": NeighborhoodSection,
}


def _build_section(cls, data, context):
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key == "schedule":
            value = _build_section(TrainSchedule, value, f"{context}.schedule")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    """Parse and validate a JSON experiment configuration; unknown keys are
    rejected at every level."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def worker_count() -> int:
    """Parallelism budget, capped by the QUANTLAB_THREADS environment variable."""
    cap = os.environ.get("QUANTLAB_THREADS")
    avail = os.cpu_count() or 1
    if cap is None:
        return avail
    return max(1, min(avail, int(cap)))


def parallel_map(fn, items):
    """Ordered map honoring the worker budget (serial when the budget is 1)."""
    items = list(items)
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --- artifacts ---------------------------------------------------------------------


class OutputLocked(RuntimeError):
    pass


class RunArtifacts:
    """Manages one run's output directory: lock, manifest, CSV files, and
    cleanup of partial outputs on failure."""

    def __init__(self, out_dir, subcommand: str, config: ExperimentConfig):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.subcommand = subcommand
        self.config = config
        canonical = {"subcommand": subcommand, "config": config.canonical()}
        self.manifest_hash = hashlib.sha256(
            json.dumps(canonical, sort_keys=True).encode()
        ).hexdigest()[:16]
        self.manifest = {
            "subcommand": subcommand,
            "config": config.canonical(),
            "config_hash": self.manifest_hash,
            "seeds": list(config.seeds),
            "version": __version__,
        }
        self._created: list[Path] = []
        self._lock = self.out / ".quantlab.lock"

    def __enter__(self):
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.close(fd)
        except FileExistsError:
            raise OutputLocked(f"output directory {self.out} is locked by another run")
        path = self.out / f"{self.subcommand}_manifest.json"
        path.write_text(json.dumps(self.manifest, sort_keys=True, indent=1))
        self._created.append(path)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            for p in self._created:
                p.unlink(missing_ok=True)
        self._lock.unlink(missing_ok=True)
        return False

    def write_csv(self, name: str, header: list, rows) -> Path:
        path = self.out / name
        lines = [f"# manifest={self.manifest_hash}", ",".join(header)]
        for row in rows:
            lines.append(",".join(_csv_cell(v) for v in row))
        path.write_text("\n".join(lines) + "\n")
        self._created.append(path)
        return path

    def save_checkpoint(self, name: str, model, packed=None) -> Path:
        from .checkpoint import save_model

        path = self.out / name
        save_model(path, model, packed)
        self._created.append(path)
        return path


def _csv_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# --- subcommand runners --------------------------------------------------------------


def _base_model(config: ExperimentConfig, corpus: CorpusSplit, seed: int) -> ModelHandle:
    """Load the configured checkpoint or train a fresh fp baseline."""
    from .checkpoint import load_model
    from .model import build_model, train_baseline

    if config.checkpoint:
        model, _ = load_model(config.checkpoint)
        return model
    init = build_model(config.model, seed=seed)
    sched = replace(config.lgr.schedule, seed=seed)
    trained, _ = train_baseline(init, corpus.train, sched)
    return trained


def _quantized_variant(config, corpus, model, bits, seed):
    from . import gptq as GQ
    from . import lgp as LP
    from .model import sample_batch
    from .quant import QuantSpec, quantize_model_rtn

    spec = QuantSpec(bits=bits, group_size=config.quant.group_size, symmetric=config.quant.symmetric)
    method = config.quant.method
    if method == "rtn":
        return quantize_model_rtn(model, spec)
    rng = np.random.default_rng(seed)
    calib = [
        sample_batch(corpus.train, rng, config.quant.calib_batch_size, config.quant.calib_seq_len)
        for _ in range(config.quant.calib_batches)
    ]
    if method == "gptq":
        records = GQ.capture_calibration(model, calib)
        out = model.copy()
        for name, rec in records.items():
            ql = GQ.gptq_quantize(model.params[name], GQ.build_hessian(rec.X), spec)
            out.params[name] = ql.dequantize().astype(model.params[name].dtype)
        out.precision_tag = f"quantized-{bits}-bit"
        return out
    cfg = LP.LgpConfig(
        alpha1=config.lgp.alpha1, epochs=config.lgp.epochs, learning_rate=config.lgp.learning_rate
    )
    quantized, _ = LP.run_lgp(model, calib, spec, cfg)
    return quantized


def _sample_contexts(config, corpus):
    from . import neighborhood as N

    spec = N.NeighborhoodSpec(
        context_len=config.neighborhood.context_len,
        k_max=config.neighborhood.k_max,
        n_contexts=config.neighborhood.n_contexts,
        seed=config.neighborhood.seed,
        scope=config.neighborhood.scope,
    )
    ctx = N.sample_contexts(corpus.heldout, spec, boundary_token=config.neighborhood.boundary_token)
    return ctx, spec


def run_train(config: ExperimentConfig, art: RunArtifacts):
    from . import lgr as R
    from .model import build_model, train_baseline

    corpus = ingest_corpus(config.corpus_path)
    seed = config.seeds[0]
    sched = replace(config.lgr.schedule, seed=seed)
    init = build_model(config.model, seed=seed)

    fp, fp_trace = train_baseline(init, corpus.train, sched)
    art.write_csv(
        "train_fp_trace.csv",
        ["step", "l_lm", "l_smooth", "total", "lr"],
        [(i, v, 0.0, v, 0.0) for i, v in enumerate(fp_trace)],
    )
    art.save_checkpoint("fp.qlab", fp)

    rows, cavg_rows = [], []
    for tag, alpha2 in (("b158", 0.0), ("b158_lgr", config.lgr.alpha2)):
        cfg = R.LgrConfig(
            schedule=sched,
            alpha2=alpha2,
            reg_layer=config.lgr.reg_layer,
            activation_fraction=config.lgr.activation_fraction,
            freeze_embedding=config.lgr.freeze_embedding,
            cavg_every=config.lgr.cavg_every,
        )
        handle, breakdown, cavg = R.qat_train(init, corpus.train, cfg)
        art.save_checkpoint(f"{tag}.qlab", handle)
        rows += [(tag, b.step, b.l_lm, b.l_smooth, b.total, b.lr) for b in breakdown]
        cavg_rows += [(tag, s, v) for s, v in cavg]
    art.write_csv("train_qat_trace.csv", ["variant", "step", "l_lm", "l_smooth", "total", "lr"], rows)
    art.write_csv("train_cavg_trace.csv", ["variant", "step", "c_avg"], cavg_rows)
    return {"final_fp_loss": fp_trace[-1] if fp_trace else None}


def run_quantize(config: ExperimentConfig, art: RunArtifacts):
    from .model import lm_loss, sample_batch

    corpus = ingest_corpus(config.corpus_path)
    seed = config.seeds[0]
    model = _base_model(config, corpus, seed)
    rng = np.random.default_rng(seed)
    held = sample_batch(corpus.heldout, rng, 8, min(config.model.max_seq_len, 128))
    base_loss = float(lm_loss(model, held).data)

    rows = [("fp", 16, base_loss)]
    for bits in config.quant.bits:
        variant = _quantized_variant(config, corpus, model, bits, seed)
        rows.append((config.quant.method, bits, float(lm_loss(variant, held).data)))
        art.save_checkpoint(f"{config.quant.method}_{bits}bit.qlab", variant)
    art.write_csv("quantize_summary.csv", ["method", "bits", "heldout_loss"], rows)
    return {"rows": rows}


def run_smoothness(config: ExperimentConfig, art: RunArtifacts):
    from . import smoothness as S
    from .model import sample_batch

    corpus = ingest_corpus(config.corpus_path)
    seed = config.seeds[0]
    model = _base_model(config, corpus, seed)
    rng = np.random.default_rng(seed)
    sample = sample_batch(corpus.heldout, rng, 32, min(config.model.max_seq_len, 64))

    variants = [("fp", model)]
    for bits in config.quant.bits:
        variants.append((f"{bits}bit", _quantized_variant(config, corpus, model, bits, seed)))

    summary, score_rows = [], []
    for tag, m in variants:
        rep = S.smoothness_report(m, sample)
        summary.append((tag, rep.c_avg, rep.c_lower, rep.sample_count))
        score_rows += [(tag, i, s) for i, s in enumerate(rep.per_sequence_scores)]
    art.write_csv("smoothness_summary.csv", ["model", "c_avg", "c_lower", "n_sequences"], summary)
    art.write_csv("smoothness_scores.csv", ["model", "sequence", "score"], score_rows)
    return {"summary": summary}


def run_rppl(config: ExperimentConfig, art: RunArtifacts):
    from . import neighborhood as N

    corpus = ingest_corpus(config.corpus_path)
    seed = config.seeds[0]
    model = _base_model(config, corpus, seed)
    contexts, spec = _sample_contexts(config, corpus)

    variants = [("fp", model)]
    for bits in config.quant.bits:
        variants.append((f"{bits}bit", _quantized_variant(config, corpus, model, bits, seed)))

    curve_rows, cand_rows = [], []
    for tag, m in variants:
        curve = N.rppl_curve(m, model, spec, contexts=contexts)
        curve_rows += [(tag, int(k), r, curve.n_contexts) for k, r in zip(curve.k_values, curve.rppl)]
        counts, mean = N.effective_candidates(curve, config.neighborhood.threshold_ratio)
        cand_rows += [(tag, i, int(c)) for i, c in enumerate(counts)]
    art.write_csv("rppl_curves.csv", ["model", "k", "rppl", "n_contexts"], curve_rows)
    art.write_csv(
        "effective_candidates.csv",
        ["model", "context", "count"],
        cand_rows,
    )
    return {"n_contexts": spec.n_contexts}


def run_gradient_profile(config: ExperimentConfig, art: RunArtifacts):
    from . import lgr as R
    from . import smoothness as S
    from .model import build_model, sample_batch, train_baseline

    corpus = ingest_corpus(config.corpus_path)
    seed = config.seeds[0]
    sched = replace(config.lgr.schedule, seed=seed)
    init = build_model(config.model, seed=seed)
    fp, _ = train_baseline(init, corpus.train, sched)
    tern, _, _ = R.qat_train(init, corpus.train, R.LgrConfig(schedule=sched, alpha2=0.0))

    rng = np.random.default_rng(seed)
    batch = sample_batch(corpus.heldout, rng, 8, min(config.model.max_seq_len, 64))
    rows = []
    for tag, m in (("fp", fp), ("ternary", tern)):
        prof = S.layer_gradient_profile(m, batch, tag)
        rows += [(tag, layer, site, v) for (layer, site), v in sorted(prof.norms.items())]
    art.write_csv("gradient_profile.csv", ["model", "layer", "site", "mean_grad_norm"], rows)
    return {"rows": len(rows)}


def run_anisotropy(config: ExperimentConfig, art: RunArtifacts):
    from . import gptq as GQ
    from . import weightspace as WS
    from .model import sample_batch
    from .quant import QuantSpec

    corpus = ingest_corpus(config.corpus_path)
    seed = config.seeds[0]
    model = _base_model(config, corpus, seed)
    rng = np.random.default_rng(seed)
    calib = [
        sample_batch(corpus.train, rng, config.quant.calib_batch_size, config.quant.calib_seq_len)
        for _ in range(config.quant.calib_batches)
    ]
    rec = GQ.capture_calibration(model, calib)["layers.0.wq"]
    W = model.params["layers.0.wq"].astype(np.float64)

    rows = []
    for bits in config.quant.bits:
        spec = QuantSpec(bits=bits, group_size=config.quant.group_size)
        for p in WS.anisotropy_sweep(W, rec.X, rec.G, spec):
            rows.append((bits, p.alpha, p.cos_fwd, p.cos_bwd))
    art.write_csv("anisotropy.csv", ["bits", "alpha", "cos_fwd", "cos_bwd"], rows)
    return {"rows": len(rows)}


def run_feasibility(config: ExperimentConfig, art: RunArtifacts):
    from . import gptq as GQ
    from . import weightspace as WS
    from .model import sample_batch

    corpus = ingest_corpus(config.corpus_path)
    seed = config.seeds[0]
    model = _base_model(config, corpus, seed)
    rng = np.random.default_rng(seed)
    calib = [
        sample_batch(corpus.train, rng, config.quant.calib_batch_size, config.quant.calib_seq_len)
        for _ in range(config.quant.calib_batches)
    ]
    records = GQ.capture_calibration(model, calib)
    rows = [
        (r["layer"], r["rank_x"], r["rank_g"], r["d_in"], r["d_out"], r["condition_holds"])
        for r in WS.rank_profile(model, records)
    ]
    art.write_csv(
        "feasibility.csv",
        ["layer", "rank_x", "rank_g", "d_in", "d_out", "condition_holds"],
        rows,
    )
    return {"fraction_feasible": float(np.mean([r[5] for r in rows])) if rows else 0.0}


def run_ablate_alpha1(config: ExperimentConfig, art: RunArtifacts):
    from . import lgp as LP
    from .model import sample_batch
    from .quant import QuantSpec

    corpus = ingest_corpus(config.corpus_path)
    seed = config.seeds[0]
    model = _base_model(config, corpus, seed)
    rng = np.random.default_rng(seed)
    calib = [
        sample_batch(corpus.train, rng, config.quant.calib_batch_size, config.quant.calib_seq_len)
        for _ in range(config.quant.calib_batches)
    ]
    spec = QuantSpec(bits=min(config.quant.bits), group_size=config.quant.group_size)
    targets = LP.capture_block_targets(model, calib, 0)
    rows = []
    for alpha1 in config.lgp.magnitudes:
        cfg = LP.LgpConfig(alpha1=float(alpha1), epochs=config.lgp.epochs, learning_rate=config.lgp.learning_rate)
        state = LP.lgp_distill_block(model.copy(), calib, 0, spec, cfg, targets=targets)
        _, fit, grad, joint = state.trace[-1]
        rows.append((float(alpha1), fit, grad, joint))
    art.write_csv("ablate_alpha1.csv", ["alpha1", "fit_term", "grad_term", "joint"], rows)
    return {"rows": rows}


def run_ablate_reg_layer(config: ExperimentConfig, art: RunArtifacts):
    from . import lgr as R
    from . import smoothness as S
    from .model import build_model, sample_batch

    corpus = ingest_corpus(config.corpus_path)
    seed = config.seeds[0]
    sched = replace(config.lgr.schedule, seed=seed)
    init = build_model(config.model, seed=seed)
    rng = np.random.default_rng(seed)
    probe = sample_batch(corpus.heldout, rng, 8, min(config.model.max_seq_len, 64))

    rows = []
    for reg_layer in (0, 1):
        cfg = R.LgrConfig(schedule=sched, alpha2=config.lgr.alpha2, reg_layer=reg_layer)
        handle, breakdown, _ = R.qat_train(init, corpus.train, cfg)
        final_lm = float(np.mean([b.l_lm for b in breakdown[-10:]]))
        rows.append((reg_layer, final_lm, S.compute_c_avg(handle, probe)))
    art.write_csv("ablate_reg_layer.csv", ["reg_layer", "final_l_lm", "c_avg"], rows)
    return {"rows": rows}


SUBCOMMANDS = {
    "train": run_train,
    "quantize": run_quantize,
    "smoothness": run_smoothness,
    "rppl": run_rppl,
    "gradient-profile": run_gradient_profile,
    "anisotropy": run_anisotropy,
    "feasibility": run_feasibility,
    "ablate-alpha1": run_ablate_alpha1,
    "ablate-reg-layer": run_ablate_reg_layer,
}


def run_experiment(subcommand: str, config: ExperimentConfig):
    """Execute one subcommand, producing CSV artifacts plus a manifest in the
    configured output directory.  Partial outputs are removed on failure."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    with RunArtifacts(config.output_dir, subcommand, config) as art:
        summary = SUBCOMMANDS[subcommand](config, art)
    return summary
