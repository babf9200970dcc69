import json
from pathlib import Path

import numpy as np
import pytest

from quantlab import checkpoint as CK
from quantlab import harness as H
from quantlab import model as M
from quantlab import quant as Q
from quantlab.cli import main as cli_main


class TestIngestCorpus:
    def test_bytes_become_token_ids(self, tmp_path):
        p = tmp_path / "abc.txt"
        p.write_bytes(b"abc")
        split = H.ingest_corpus(p)
        assert split.tokens.tolist() == [97, 98, 99]

    def test_split_reproducible(self, corpus_path):
        a = H.ingest_corpus(corpus_path)
        b = H.ingest_corpus(corpus_path)
        np.testing.assert_array_equal(a.train, b.train)
        np.testing.assert_array_equal(a.heldout, b.heldout)

    def test_megabyte_split_proportions(self, tmp_path):
        p = tmp_path / "big.txt"
        p.write_bytes(H.synthetic_corpus(1_000_000, seed=1))
        split = H.ingest_corpus(p)
        assert split.tokens.size == 1_000_000
        assert abs(split.heldout.size - 100_000) <= 8192  # within one block
        assert split.train.size + split.heldout.size == 1_000_000

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "empty.txt"
        p.write_bytes(b"")
        with pytest.raises(M.InputError):
            H.ingest_corpus(p)

    def test_synthetic_corpus_deterministic(self):
        assert H.synthetic_corpus(10_000, seed=3) == H.synthetic_corpus(10_000, seed=3)


TINY_CONFIG_DICT = {
    "corpus_path": "",
    "output_dir": "",
    "model": {"n_layer": 1, "n_head": 2, "d_hidden": 16, "d_inter": 32, "max_seq_len": 32},
    "quant": {"bits": [3], "group_size": 8, "calib_batches": 1, "calib_batch_size": 2, "calib_seq_len": 16},
    "lgr": {"schedule": {"steps": 8, "batch_size": 2, "seq_len": 16, "warmup_steps": 2, "lr": 0.002}},
    "neighborhood": {"context_len": 16, "k_max": 8, "n_contexts": 8},
    "seeds": [0],
}


def write_config(tmp_path, corpus_path, out_name="out", **overrides):
    data = json.loads(json.dumps(TINY_CONFIG_DICT))
    data["corpus_path"] = str(corpus_path)
    data["output_dir"] = str(tmp_path / out_name)
    data.update(overrides)
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(data))
    return cfg_path


class TestConfig:
    def test_load_and_defaults(self, tmp_path, corpus_path):
        cfg = H.load_config(write_config(tmp_path, corpus_path))
        assert cfg.model.n_layer == 1
        assert cfg.quant.method == "rtn"
        assert cfg.lgr.alpha2 == 0.01

    def test_unknown_top_level_key_rejected(self, tmp_path, corpus_path):
        path = write_config(tmp_path, corpus_path, typo_key=1)
        with pytest.raises(H.ConfigError, match="typo_key"):
            H.load_config(path)

    def test_unknown_nested_key_rejected(self, tmp_path, corpus_path):
        data = json.loads(json.dumps(TINY_CONFIG_DICT))
        data["corpus_path"] = str(corpus_path)
        data["output_dir"] = str(tmp_path / "out")
        data["model"]["d_midden"] = 64
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(data))
        with pytest.raises(H.ConfigError, match="d_midden"):
            H.load_config(path)

    def test_manifest_hash_identical_for_identical_configs(self, tmp_path, corpus_path):
        cfg1 = H.load_config(write_config(tmp_path, corpus_path, out_name="a"))
        cfg2 = H.load_config(write_config(tmp_path, corpus_path, out_name="b"))
        a1 = H.RunArtifacts(tmp_path / "a", "feasibility", cfg1)
        a2 = H.RunArtifacts(tmp_path / "b", "feasibility", cfg2)
        assert a1.manifest_hash == a2.manifest_hash

    def test_worker_count_honors_env(self, monkeypatch):
        monkeypatch.setenv("QUANTLAB_THREADS", "1")
        assert H.worker_count() == 1


class TestCheckpoint:
    def test_round_trip_preserves_forward_bits(self, trained_tiny_model, tmp_path):
        path = tmp_path / "model.qlab"
        CK.save_model(path, trained_tiny_model)
        loaded, packed = CK.load_model(path)
        assert packed == {}
        tokens = np.arange(32, 64).reshape(1, -1)
        a = M.build_forward(trained_tiny_model, tokens, with_loss=False).logits.data
        b = M.build_forward(loaded, tokens, with_loss=False).logits.data
        np.testing.assert_array_equal(a, b)
        assert loaded.precision_tag == trained_tiny_model.precision_tag

    def test_packed_tensor_round_trip(self, trained_tiny_model, tmp_path):
        spec = Q.QuantSpec(bits=3, group_size=16)
        name = "layers.0.wq"
        ql = Q.quantize(trained_tiny_model.params[name], spec)
        model = trained_tiny_model.copy()
        model.params[name] = ql.dequantize().astype(np.float32)

        path = tmp_path / "packed.qlab"
        CK.save_model(path, model, packed={name: ql})
        loaded, packed = CK.load_model(path)
        np.testing.assert_array_equal(packed[name].codes, ql.codes)
        np.testing.assert_array_equal(loaded.params[name], model.params[name])

    def test_checksum_corruption_detected(self, trained_tiny_model, tmp_path):
        path = tmp_path / "model.qlab"
        CK.save_model(path, trained_tiny_model)
        blob = bytearray(path.read_bytes())
        blob[100] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CK.CheckpointError, match="checksum"):
            CK.load_model(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.qlab"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CK.CheckpointError):
            CK.load_model(path)


class TestRunExperiment:
    def test_feasibility_writes_manifest_and_csv(self, tmp_path, corpus_path):
        cfg = H.load_config(write_config(tmp_path, corpus_path))
        H.run_experiment("feasibility", cfg)
        out = Path(cfg.output_dir)
        csv = (out / "feasibility.csv").read_text().splitlines()
        manifest = json.loads((out / "feasibility_manifest.json").read_text())
        assert csv[0] == f"# manifest={manifest['config_hash']}"
        assert csv[1].startswith("layer,")
        assert len(csv) > 2

    def test_rerun_is_byte_identical(self, tmp_path, corpus_path):
        cfg1 = H.load_config(write_config(tmp_path, corpus_path, out_name="r1"))
        cfg2 = H.load_config(write_config(tmp_path, corpus_path, out_name="r2"))
        H.run_experiment("rppl", cfg1)
        H.run_experiment("rppl", cfg2)
        for name in ("rppl_curves.csv", "effective_candidates.csv"):
            b1 = (Path(cfg1.output_dir) / name).read_bytes()
            b2 = (Path(cfg2.output_dir) / name).read_bytes()
            assert b1 == b2, f"{name} differs between identical-manifest runs"

    def test_unknown_subcommand_rejected(self, tmp_path, corpus_path):
        cfg = H.load_config(write_config(tmp_path, corpus_path))
        with pytest.raises(H.ConfigError):
            H.run_experiment("explode", cfg)

    def test_failure_removes_partial_outputs(self, tmp_path):
        cfg = H.load_config(write_config(tmp_path, tmp_path / "missing.txt"))
        with pytest.raises(FileNotFoundError):
            H.run_experiment("feasibility", cfg)
        out = Path(cfg.output_dir)
        assert not list(out.glob("*.csv")) and not list(out.glob("*manifest*"))
        assert not (out / ".quantlab.lock").exists()

    def test_locked_directory_rejected(self, tmp_path, corpus_path):
        cfg = H.load_config(write_config(tmp_path, corpus_path))
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / ".quantlab.lock").touch()
        with pytest.raises(H.OutputLocked):
            H.run_experiment("feasibility", cfg)


class TestCli:
    def test_feasibility_exit_zero(self, tmp_path, corpus_path, capsys):
        cfg_path = write_config(tmp_path, corpus_path, out_name="cli_out")
        code = cli_main(["feasibility", "--config", str(cfg_path)])
        assert code == 0
        assert "wrote artifacts" in capsys.readouterr().out

    def test_config_error_exit_two(self, tmp_path, corpus_path, capsys):
        path = write_config(tmp_path, corpus_path, typo_key=1)
        assert cli_main(["feasibility", "--config", str(path)]) == 2

    def test_seed_and_out_overrides(self, tmp_path, corpus_path):
        cfg_path = write_config(tmp_path, corpus_path)
        out = tmp_path / "elsewhere"
        code = cli_main(
            ["feasibility", "--config", str(cfg_path), "--seed", "7", "--out", str(out)]
        )
        assert code == 0
        manifest = json.loads((out / "feasibility_manifest.json").read_text())
        assert manifest["seeds"] == [7]

    def test_bits_override(self, tmp_path, corpus_path):
        cfg_path = write_config(tmp_path, corpus_path, out_name="bits_out")
        code = cli_main(["quantize", "--config", str(cfg_path), "--bits", "2"])
        assert code == 0
        csv = (tmp_path / "bits_out" / "quantize_summary.csv").read_text()
        assert ",2," in csv and ",3," not in csv
