"""Shared fixtures: synthetic corpora and trained models.

Training fixtures are session-scoped and sized so the whole suite stays
inside the acceptance runtime budgets on one CPU core.
"""

import pytest

from quantlab import model as M
from quantlab.harness import ingest_corpus, synthetic_corpus


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    path.write_bytes(synthetic_corpus(400_000, seed=0))
    return path


@pytest.fixture(scope="session")
def corpus(corpus_path):
    return ingest_corpus(corpus_path)


@pytest.fixture(scope="session")
def small_corpus(corpus):
    return corpus.train[:120_000]


TOY_CONFIG = M.ModelConfig(n_layer=4, n_head=4, d_hidden=64, d_inter=128, max_seq_len=128)
TOY_SCHEDULE = M.TrainSchedule(
    steps=900, batch_size=8, seq_len=128, lr=1.5e-3, warmup_steps=60, min_lr_frac=0.1, seed=0
)


TINY_CONFIG = M.ModelConfig(n_layer=2, n_head=2, d_hidden=32, d_inter=64, max_seq_len=64)


@pytest.fixture(scope="session")
def trained_tiny_model(corpus):
    """A quickly trained 2-layer model for direction-of-effect module tests."""
    base = M.build_model(TINY_CONFIG, seed=0)
    sched = M.TrainSchedule(steps=250, batch_size=8, seq_len=64, lr=3e-3, warmup_steps=25, seed=0)
    trained, trace = M.train_baseline(base, corpus.train, sched)
    assert trace[-1] < trace[0]
    return trained


@pytest.fixture(scope="session")
def trained_toy_model(corpus):
    """A 4-layer byte-level model trained well enough for quantization trends."""
    base = M.build_model(TOY_CONFIG, seed=0)
    trained, trace = M.train_baseline(base, corpus.train, TOY_SCHEDULE)
    assert trace[-1] < trace[0]
    return trained


CRIT5_CONFIG = M.ModelConfig(n_layer=6, n_head=4, d_hidden=96, d_inter=192, max_seq_len=128)
CRIT5_SCHEDULE = M.TrainSchedule(
    steps=2400, batch_size=8, seq_len=128, lr=1.2e-3, warmup_steps=100, min_lr_frac=0.05, seed=0
)


@pytest.fixture(scope="session")
def neighborhood_corpus(tmp_path_factory):
    """A larger corpus for the reverse-perplexity trend: its held-out pool
    supplies ~1000 independent boundary contexts per evaluation seed, which
    the 4-bit slope gap needs to clear sampling noise."""
    path = tmp_path_factory.mktemp("crit5") / "corpus.txt"
    path.write_bytes(synthetic_corpus(1_600_000, seed=1))
    return ingest_corpus(path)


@pytest.fixture(scope="session")
def neighborhood_model(neighborhood_corpus):
    """Deep enough that quantization scrambles rankings systematically: at
    four layers the 4-bit slope gap sits inside context-sampling noise."""
    trained, trace = M.train_baseline(
        M.build_model(CRIT5_CONFIG, seed=0), neighborhood_corpus.train, CRIT5_SCHEDULE
    )
    assert trace[-1] < trace[0]
    return trained


QAT_CONFIG = M.ModelConfig(n_layer=2, n_head=2, d_hidden=32, d_inter=64, max_seq_len=64)


def qat_schedule(seed):
    return M.TrainSchedule(
        steps=800, batch_size=8, seq_len=64, lr=2e-3, warmup_steps=20, seed=seed
    )


@pytest.fixture(scope="session")
def qat_runs(corpus):
    """Matched-seed fp / ternary / ternary+LGR runs shared by the gradient
    ridge and LGR acceptance criteria, plus the over-smoothing run and the
    architecture variants."""
    from quantlab import lgr as R

    runs = {"pairs": []}
    for seed in range(5):
        init = M.build_model(QAT_CONFIG, seed=seed)
        sched = qat_schedule(seed)
        fp, _ = M.train_baseline(init, corpus.train, sched)
        base, base_bd, _ = R.qat_train(init, corpus.train, R.LgrConfig(schedule=sched, alpha2=0.0))
        lgr, lgr_bd, _ = R.qat_train(init, corpus.train, R.LgrConfig(schedule=sched, alpha2=0.01))
        runs["pairs"].append(
            {"seed": seed, "fp": fp, "base": base, "lgr": lgr, "base_bd": base_bd, "lgr_bd": lgr_bd}
        )

    init0 = M.build_model(QAT_CONFIG, seed=0)
    sched0 = qat_schedule(0)
    big, big_bd, _ = R.qat_train(init0, corpus.train, R.LgrConfig(schedule=sched0, alpha2=100.0))
    runs["oversmoothed"] = {"model": big, "bd": big_bd}

    rms_cfg = M.toggle_rmsnorm_variant(QAT_CONFIG)
    rms_init = M.ModelHandle(config=rms_cfg, params={k: v.copy() for k, v in init0.params.items()})
    rms_fp, _ = M.train_baseline(rms_init, corpus.train, sched0)
    rms_tern, _, _ = R.qat_train(rms_init, corpus.train, R.LgrConfig(schedule=sched0, alpha2=0.0))
    runs["rmsnorm"] = {"fp": rms_fp, "ternary": rms_tern}

    # controlled pairing: the reference is an fp model trained with the same
    # frozen embedding, since freezing changes layer-0 gradients for any model
    frozen, _, _ = R.qat_train(
        init0, corpus.train, R.LgrConfig(schedule=sched0, alpha2=0.0, freeze_embedding=True)
    )
    frozen_fp, _ = M.train_baseline(init0, corpus.train, sched0, frozen_params=("embedding",))
    runs["frozen_embedding"] = {"fp": frozen_fp, "ternary": frozen}
    return runs
