import json

import numpy as np
import pytest

from demoforge.cli import EXIT_CONFIG, EXIT_OK, STAGE_EXIT_CODES, main
from demoforge.demos import load_demos
from demoforge.pipeline import read_results_csv

TINY = [
    "--override", "data.n_pairs=300",
    "--override", "filter.ae_hidden=16,8,4,8,16",
    "--override", "filter.ae_epochs=20",
    "--override", "diffusion.hidden=32,32",
    "--override", "diffusion.epochs=20",
    "--override", "predictor.hidden=32,32",
    "--override", "predictor.epochs=10",
    "--override", "policy.hidden=32,32",
    "--override", "policy.epochs=20",
    "--override", "eval.episodes=5",
    "--override", "eval.seeds=2",
]


def run(verb, out, *extra):
    return main([verb, "--out", str(out), *TINY, *extra])


class TestStageChain:
    def test_full_chain(self, tmp_path):
        out = tmp_path / "run"
        for verb in ("gen-demos", "corrupt", "filter", "train-restorers", "restore", "train-policy", "eval"):
            assert run(verb, out) == EXIT_OK, verb
        for name in (
            "demos_clean.zip",
            "demos_noisy.zip",
            "filter.json",
            "schedule.json",
            "checkpoints/theta_s/manifest.json",
            "checkpoints/psi_a/manifest.json",
            "restore_report.json",
            "demos_restored.zip",
            "checkpoints/policy-0/manifest.json",
            "results.csv",
        ):
            assert (out / name).exists(), name
        report = json.loads((out / "restore_report.json").read_text())
        restored = load_demos(out / "demos_restored.zip")
        noisy = load_demos(out / "demos_noisy.zip")
        assert restored.n_pairs + report["discarded"] == noisy.n_pairs

    def test_report_renders(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert run("pipeline", out) == EXIT_OK
        assert main(["report", "--out", str(out)]) == EXIT_OK
        rows = read_results_csv(out / "results.csv")
        report_lines = (out / "report.txt").read_text().strip().splitlines()
        assert len(report_lines) == len(rows) + 2  # header + rule
        dat_lines = (out / "report.dat").read_text().strip().splitlines()
        assert len(dat_lines) == len(rows) + 1  # comment header


class TestPipelineVerb:
    def test_leaves_all_artifacts(self, tmp_path):
        out = tmp_path / "run"
        assert run("pipeline", out) == EXIT_OK
        for name in ("run_manifest.json", "results.csv", "demos_restored.zip", "filter.json"):
            assert (out / name).exists(), name

    def test_seed_flag_changes_results(self, tmp_path):
        out_a, out_b, out_c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert run("pipeline", out_a, "--seed", "1") == EXIT_OK
        assert run("pipeline", out_b, "--seed", "2") == EXIT_OK
        assert run("pipeline", out_c, "--seed", "1") == EXIT_OK
        # the tiny run's success rate can be 0.0 under every seed, so
        # check seed sensitivity on the corrupted data instead
        assert (out_a / "demos_noisy.zip").read_bytes() != (out_b / "demos_noisy.zip").read_bytes()
        assert (out_a / "results.csv").read_bytes() == (out_c / "results.csv").read_bytes()
        assert (out_a / "demos_noisy.zip").read_bytes() == (out_c / "demos_noisy.zip").read_bytes()


class TestErrors:
    def test_unknown_override_key(self, tmp_path):
        assert main(["pipeline", "--out", str(tmp_path), "--override", "nope=1"]) == EXIT_CONFIG

    def test_out_of_range_override(self, tmp_path):
        assert main(["pipeline", "--out", str(tmp_path), "--override", "noise.p=1.5"]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["pipeline", "--out", str(tmp_path), "--config", str(tmp_path / "no.cfg")]) == EXIT_CONFIG

    def test_config_file_applied(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text("noise.family = laplacian\ndata.n_pairs = 150\n")
        out = tmp_path / "run"
        assert main(["gen-demos", "--out", str(out), "--config", str(cfg_path)]) == EXIT_OK
        assert main(["corrupt", "--out", str(out), "--config", str(cfg_path)]) == EXIT_OK
        noisy = load_demos(out / "demos_noisy.zip")
        assert noisy.noise.family == "laplacian"
        assert noisy.n_pairs >= 150

    def test_stage_exit_code_on_missing_input(self, tmp_path):
        # corrupt without gen-demos first: missing archive -> corrupt stage code
        assert run("corrupt", tmp_path / "empty") == STAGE_EXIT_CODES["corrupt"]

    def test_restore_before_training(self, tmp_path):
        out = tmp_path / "run"
        assert run("gen-demos", out) == EXIT_OK
        assert run("corrupt", out) == EXIT_OK
        assert run("filter", out) == EXIT_OK
        assert run("restore", out) == STAGE_EXIT_CODES["restore"]


class TestAblate:
    def test_noise_level_axis(self, tmp_path):
        out = tmp_path / "ab"
        extra = ["--axis", "noise_level", "--override", "eval.seeds=1", "--override", "eval.episodes=3"]
        assert run("ablate", out, *extra) == EXIT_OK
        rows = read_results_csv(out / "results.csv")
        assert {r["setting"] for r in rows} == {"p=0.2", "p=0.4"}

    def test_threaded_matches_sequential(self, tmp_path, monkeypatch):
        extra = ["--axis", "noise_level", "--override", "eval.seeds=1", "--override", "eval.episodes=3"]
        out_seq = tmp_path / "seq"
        assert run("ablate", out_seq, *extra) == EXIT_OK
        monkeypatch.setenv("DEMOFORGE_THREADS", "2")
        out_par = tmp_path / "par"
        assert run("ablate", out_par, *extra) == EXIT_OK
        assert (out_seq / "results.csv").read_bytes() == (out_par / "results.csv").read_bytes()

    def test_unknown_axis(self, tmp_path):
        assert run("ablate", tmp_path, "--axis", "bogus") != EXIT_OK


class TestEvalFlags:
    def test_episode_and_seed_flags(self, tmp_path):
        out = tmp_path / "run"
        assert run("pipeline", out) == EXIT_OK
        assert run("eval", out, "--episodes", "4", "--seeds", "3") == EXIT_OK
        rows = read_results_csv(out / "results.csv")
        seed_rows = [r for r in rows if r["seed"] not in ("mean", "std")]
        assert len(seed_rows) == 3
