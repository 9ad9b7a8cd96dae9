"""End-to-end command-line pipeline on a miniature city."""

import json

import numpy as np
import pytest

from trajtoken.cli import gradcheck_suite, main
from trajtoken.tokens import Vocabulary, decode_pattern_tokens, split_answer_tokens
from trajtoken.traj import load_dataset

TINY = {
    "city": {"rows": 3, "cols": 3, "spacing_m": 250.0},
    "simulation": {"num_trajectories": 60, "interval_s": 5.0, "gps_noise_m": 3.0},
    "rqvae": {
        "d": 8, "d_e": 16, "d_q": 8, "channels": [8, 8, 8, 16], "head_dim": 4,
        "codebook_sizes": [4, 8, 16, 32], "road_embed_dim": 8,
        "road_transformer_layers": 1,
    },
    "rqvae_train": {"epochs": 2},
    "lm": {"layers": 2, "dim": 32, "heads": 2, "context": 256},
    "lm_train": {"epochs": 3},
    "metrics": {"top_k": 10, "bins": 20},
}


def _config_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def run(workdir, command, *extra, seed=0, config=None):
    argv = ["--workdir", str(workdir), "--seed", str(seed)]
    if config is not None:
        argv = ["--config", str(config)] + argv
    return main(argv + [command, *extra])


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    return _config_file(tmp_path_factory)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, tiny_config):
    wd = tmp_path_factory.mktemp("pipe")
    for cmd in ("synth-city", "synth-data", "make-labels", "train-rqvae",
                "tokenize", "export-sft", "train-lm"):
        assert run(wd, cmd, config=tiny_config) == 0, cmd
    assert run(wd, "generate", "--count", "8", config=tiny_config) == 0
    assert run(wd, "reconstruct", config=tiny_config) == 0
    assert run(wd, "evaluate", config=tiny_config) == 0
    return wd


class TestArtifacts:
    def test_all_outputs_exist(self, pipeline):
        for name in (
            "city.json", "train.jsonl", "test.jsonl", "stats.json",
            "labels_train.jsonl", "labels_test.jsonl", "rqvae.npz",
            "rqvae_history.json", "codebooks.json", "vocab.json",
            "codes_train.jsonl", "codes_test.jsonl", "sft_train.jsonl",
            "sft_test.jsonl", "lm.npz", "lm_vocab.json", "lm_history.json",
            "generated.jsonl", "generated_tokens.jsonl",
            "generation_summary.json", "reconstructed.jsonl",
            "reconstruction_summary.json", "report.json",
        ):
            assert (pipeline / name).exists(), name

    def test_codes_format(self, pipeline):
        vocab = Vocabulary.load(pipeline / "vocab.json")
        lines = (pipeline / "codes_train.jsonl").read_text().splitlines()
        assert len(lines) == len(load_dataset(pipeline / "train.jsonl"))
        rec = json.loads(lines[0])
        assert set(rec) == {"traj_id", "parity_bits", "indices"}
        assert len(rec["parity_bits"]) == 3
        assert len(rec["indices"]) == vocab.num_levels
        for level, row in enumerate(rec["indices"]):
            assert all(0 <= i < vocab.codebook_sizes[level] for i in row)

    def test_codebooks_export(self, pipeline):
        books = json.loads((pipeline / "codebooks.json").read_text())
        assert [b["level"] for b in books] == [0, 1, 2, 3]
        assert [b["size"] for b in books] == [4, 8, 16, 32]
        for b in books:
            assert len(b["rows"]) == b["size"]
            assert all(len(r) == b["dim"] for r in b["rows"])

    def test_sft_answers_decode(self, pipeline):
        vocab = Vocabulary.load(pipeline / "vocab.json")
        for line in (pipeline / "sft_test.jsonl").read_text().splitlines():
            rec = json.loads(line)
            decode_pattern_tokens(split_answer_tokens(rec["answer"]), vocab)

    def test_generation_log(self, pipeline):
        lines = (pipeline / "generated_tokens.jsonl").read_text().splitlines()
        assert len(lines) == 8
        emitted = len(load_dataset(pipeline / "generated.jsonl"))
        valid = sum(json.loads(l)["valid"] for l in lines)
        assert valid == emitted
        rec = json.loads(lines[0])
        assert set(rec) == {"conditions", "tokens", "valid"}
        assert set(rec["conditions"]) == {
            "route_ids", "start_time_s", "travel_time_s", "travel_distance_m", "interval_s"
        }

    def test_summaries(self, pipeline):
        gen = json.loads((pipeline / "generation_summary.json").read_text())
        assert gen["requested"] == 8
        assert gen["emitted"] == len(load_dataset(pipeline / "generated.jsonl"))
        rec = json.loads((pipeline / "reconstruction_summary.json").read_text())
        assert rec["num_trajectories"] == len(load_dataset(pipeline / "test.jsonl"))
        assert rec["displacement_over_step"] > 0

    def test_report_fields(self, pipeline):
        doc = json.loads((pipeline / "report.json").read_text())
        for k in ("t_dist", "s_dist", "radius", "pr_dist"):
            assert 0.0 <= doc[k] <= 1.0
        for k in ("g_den", "g_pat", "r_den", "r_pat"):
            assert 0.0 <= doc[k] <= 1.0

    def test_plot_outputs(self, pipeline, tiny_config):
        assert run(pipeline, "plot", "--svg", config=tiny_config) == 0
        for name in ("lengths.csv", "density.csv", "lengths.svg",
                     "density_real.svg", "density_generated.svg"):
            assert (pipeline / "plots" / name).exists()


class TestDeterminism:
    def test_stages_reproducible(self, tmp_path, tiny_config):
        wds = [tmp_path / "a", tmp_path / "b"]
        for wd in wds:
            assert run(wd, "synth-city", seed=5, config=tiny_config) == 0
            assert run(wd, "synth-data", seed=5, config=tiny_config) == 0
            assert run(wd, "make-labels", seed=5, config=tiny_config) == 0
        for name in ("city.json", "train.jsonl", "test.jsonl", "stats.json",
                     "labels_train.jsonl"):
            assert (wds[0] / name).read_bytes() == (wds[1] / name).read_bytes(), name

    def test_seed_changes_data(self, tmp_path, tiny_config):
        wds = [tmp_path / "a", tmp_path / "b"]
        for wd, seed in zip(wds, (1, 2)):
            assert run(wd, "synth-city", seed=seed, config=tiny_config) == 0
        assert (wds[0] / "city.json").read_bytes() != (wds[1] / "city.json").read_bytes()


class TestExitCodes:
    def test_usage_error(self, tmp_path):
        assert main(["--workdir", str(tmp_path), "--set", "city.rows", "synth-city"]) == 1
        assert main(["--workdir", str(tmp_path), "--set", "city.bogus=1", "synth-city"]) == 1

    def test_data_error_missing_inputs(self, tmp_path):
        assert run(tmp_path / "empty", "make-labels") == 2

    def test_data_error_on_corrupt_checkpoint(self, pipeline, tiny_config, tmp_path):
        import shutil

        wd = tmp_path / "broken"
        shutil.copytree(pipeline, wd)
        with np.load(wd / "rqvae.npz", allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        victim = next(k for k in arrays if k not in ("__meta__",))
        arrays[victim] = arrays[victim][..., :1]
        np.savez(wd / "rqvae.npz", **arrays)
        assert run(wd, "tokenize", config=tiny_config) == 2

    def test_numeric_error_exit_code(self, tmp_path, monkeypatch):
        import trajtoken.cli as cli

        monkeypatch.setattr(cli, "gradcheck_suite", lambda seed=0: [("linear", 1.0, 1e-6)])
        assert run(tmp_path, "gradcheck") == 3

    def test_gradcheck_command(self, tmp_path):
        assert run(tmp_path, "gradcheck") == 0


class TestGradcheckSuite:
    def test_all_within_tolerance(self):
        for name, err, tol in gradcheck_suite(seed=1):
            assert err <= tol, name

    def test_expected_components(self):
        names = [name for name, _, _ in gradcheck_suite(seed=0)]
        assert names == ["linear", "layer_norm", "conv1d_stride2",
                         "masked_attention", "log_softmax", "rqvae_full_path"]
