"""Shared setup for the demo scripts: a synthetic corpus and a small trained
model, cached under demo_output/ so repeated runs are fast."""

from pathlib import Path

from quantlab import checkpoint as CK
from quantlab import model as M
from quantlab.harness import CorpusSplit, ingest_corpus, synthetic_corpus

OUT = Path(__file__).resolve().parent / "demo_output"

DEMO_CONFIG = M.ModelConfig(n_layer=2, n_head=2, d_hidden=32, d_inter=64, max_seq_len=64)
DEMO_SCHEDULE = M.TrainSchedule(
    steps=400, batch_size=8, seq_len=64, lr=2e-3, warmup_steps=30, seed=0
)


def demo_corpus() -> CorpusSplit:
    OUT.mkdir(exist_ok=True)
    path = OUT / "corpus.txt"
    if not path.exists():
        path.write_bytes(synthetic_corpus(400_000, seed=0))
    return ingest_corpus(path)


def demo_model(corpus: CorpusSplit) -> M.ModelHandle:
    OUT.mkdir(exist_ok=True)
    ckpt = OUT / "demo_fp.qlab"
    if ckpt.exists():
        model, _ = CK.load_model(ckpt)
        return model
    print("training the demo model (one-time, ~30s)...")
    init = M.build_model(DEMO_CONFIG, seed=0)
    trained, trace = M.train_baseline(init, corpus.train, DEMO_SCHEDULE)
    print(f"  loss {trace[0]:.3f} -> {trace[-1]:.3f} over {len(trace)} steps")
    CK.save_model(ckpt, trained)
    return trained
