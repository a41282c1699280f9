import numpy as np
import pytest

from demoforge import nn, pipeline
from demoforge.config import RunConfig
from demoforge.demos import expert_action, make_env
from demoforge.pipeline import (
    EvalResult,
    PipelineConfigError,
    PolicyBundle,
    StageError,
    ablation_suite,
    evaluate,
    read_results_csv,
    results_rows,
    run_dmdr,
    run_pipeline,
    train_bc,
    write_results_csv,
)


def tiny_config(**overrides):
    base = dict(
        env_kind="point_reach",
        n_pairs=300,
        seed=7,
        ae_hidden=(16, 8, 4, 8, 16),
        ae_epochs=20,
        ae_lr=2e-3,
        diffusion_hidden=(32, 32),
        diffusion_epochs=20,
        diffusion_lr=2e-3,
        predictor_hidden=(32, 32),
        predictor_epochs=10,
        predictor_lr=2e-3,
        policy_hidden=(32, 32),
        policy_epochs=20,
        policy_lr=2e-3,
        eval_episodes=5,
        eval_seeds=2,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def tiny_run():
    return run_dmdr(tiny_config())


class TestRunDmdr:
    def test_discard_accounting(self, tiny_run):
        assert len(tiny_run.final_indices) + tiny_run.n_discarded == tiny_run.noisy_demos.n_pairs

    def test_final_set_composition(self, tiny_run):
        fr = tiny_run.filter_result
        expected = np.sort(
            np.concatenate(
                [
                    fr.subsets["clean_pairs"],
                    fr.subsets["noisy_state_clean_action"],
                    fr.subsets["clean_state_noisy_action"],
                ]
            )
        )
        assert np.array_equal(tiny_run.final_indices, expected)

    def test_clean_pairs_untouched(self, tiny_run):
        fr = tiny_run.filter_result
        pos = np.searchsorted(tiny_run.final_indices, fr.subsets["clean_pairs"])
        assert np.array_equal(tiny_run.final_states[pos], tiny_run.noisy_demos.states[fr.subsets["clean_pairs"]])
        assert not tiny_run.restored_state_mask[pos].any()

    def test_gate_counts_match_masks(self, tiny_run):
        total_restored = tiny_run.restored_state_mask.sum() + tiny_run.restored_action_mask.sum()
        counted = sum(c["restored"] for c in tiny_run.gate_counts.values())
        assert total_restored == counted

    def test_zero_noise_completes(self):
        run = run_dmdr(tiny_config(noise_p=0.0))
        assert not run.noisy_demos.state_mask.any()
        assert len(run.final_indices) + run.n_discarded == run.noisy_demos.n_pairs

    def test_stage_error_labels(self, monkeypatch):
        def boom(*args, **kwargs):
            raise RuntimeError("boom")

        monkeypatch.setattr(pipeline, "gen_expert_demos", boom)
        with pytest.raises(StageError) as exc_info:
            run_dmdr(tiny_config())
        assert exc_info.value.stage == "gen_demos"

    def test_artifacts_written(self, tmp_path):
        cfg = tiny_config()
        run_pipeline(cfg, out_dir=tmp_path)
        for name in ("filter.json", "schedule.json", "restore_report.json", "results.csv", "run_manifest.json"):
            assert (tmp_path / name).exists(), name
        for role in ("theta_s", "theta_a", "psi_s", "psi_a"):
            model, loaded_role = nn.load_checkpoint(tmp_path / "checkpoints" / role)
            assert loaded_role == role

    def test_manifest_config_roundtrip(self, tmp_path):
        import json

        from demoforge.config import config_from_dict

        cfg = tiny_config()
        run_pipeline(cfg, out_dir=tmp_path)
        manifest = json.loads((tmp_path / "run_manifest.json").read_text())
        assert config_from_dict(manifest["config"]) == cfg
        assert "filter.json" in manifest["artifact_checksums"]


class TestTrainBc:
    def small_data(self, n=200, seed=0):
        rng = np.random.default_rng(seed)
        states = rng.normal(size=(n, 4)).astype(np.float32)
        actions = rng.normal(size=(n, 2)).astype(np.float32)
        return states, actions

    def test_ensemble_of_one_identity(self):
        states, actions = self.small_data()
        cfg = tiny_config()
        bundle = train_bc(states, actions, cfg, strategy="single", n=1)
        pred = bundle.predict(states[:5])
        assert np.array_equal(pred, nn.mlp_forward(bundle.members[0], states[:5]))

    def test_split_partition_contract(self):
        states, actions = self.small_data()
        cfg = tiny_config(policy_epochs=1)
        # peek at the split the trainer uses
        from demoforge.seeding import derive_seed

        perm = np.random.default_rng(derive_seed(cfg.seed, "policy-split")).permutation(len(states))
        chunks = np.array_split(perm, 5)
        all_idx = np.sort(np.concatenate(chunks))
        assert np.array_equal(all_idx, np.arange(len(states)))
        bundle = train_bc(states, actions, cfg, strategy="split", n=5)
        assert bundle.n == 5

    def test_split_too_many_parts(self):
        states, actions = self.small_data(n=3)
        with pytest.raises(PipelineConfigError):
            train_bc(states, actions, tiny_config(), strategy="split", n=10)

    def test_single_with_n5_rejected(self):
        states, actions = self.small_data()
        with pytest.raises(PipelineConfigError):
            train_bc(states, actions, tiny_config(), strategy="single", n=5)

    def test_empty_dataset_rejected(self):
        with pytest.raises(PipelineConfigError):
            train_bc(np.zeros((0, 4)), np.zeros((0, 2)), tiny_config())

    def test_shuffle_members_differ(self):
        states, actions = self.small_data()
        bundle = train_bc(states, actions, tiny_config(policy_epochs=5), strategy="shuffle", n=2)
        w0 = bundle.members[0].weights[0]
        w1 = bundle.members[1].weights[0]
        assert not np.array_equal(w0, w1)


class TestEvaluate:
    def test_expert_ceiling(self):
        env = make_env("point_reach")
        ev = evaluate(lambda s: expert_action(env, s), "point_reach", episodes=20, seeds=2)
        assert ev.metric_name == "success_rate"
        assert ev.mean == 1.0

    def test_deterministic(self):
        states = np.random.default_rng(0).normal(size=(50, 4)).astype(np.float32)
        actions = np.random.default_rng(1).normal(size=(50, 2)).astype(np.float32)
        bundle = train_bc(states, actions, tiny_config(policy_epochs=2))
        a = evaluate(bundle, "point_reach", episodes=5, seeds=2, base_seed=3)
        b = evaluate(bundle, "point_reach", episodes=5, seeds=2, base_seed=3)
        assert np.array_equal(a.per_seed, b.per_seed)

    def test_line_tracker_metric_name(self):
        ev = evaluate(lambda s: np.zeros(1), "line_tracker", episodes=2, seeds=1)
        assert ev.metric_name == "mean_return"


class TestResultsCsv:
    def test_roundtrip(self, tmp_path):
        ev = EvalResult(metric_name="success_rate", per_seed=np.array([0.5, 0.75]), mean=0.625, std=0.125)
        rows = results_rows("dmdr", ev)
        path = tmp_path / "results.csv"
        write_results_csv(rows, path)
        loaded = read_results_csv(path)
        assert len(loaded) == 4  # 2 seeds + mean + std
        assert loaded[-2]["seed"] == "mean"
        assert loaded[-2]["value"] == 0.625

    def test_byte_identical_reruns(self, tmp_path):
        cfg = tiny_config()
        run_pipeline(cfg, out_dir=tmp_path / "a")
        run_pipeline(cfg, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


class TestAblation:
    def test_unknown_axis(self):
        with pytest.raises(PipelineConfigError, match="axis"):
            ablation_suite(tiny_config(), "bogus")

    def test_noise_level_axis(self, tmp_path):
        rows = ablation_suite(tiny_config(eval_episodes=3, eval_seeds=1), "noise_level", out_dir=tmp_path)
        settings = {row["setting"] for row in rows}
        assert settings == {"p=0.2", "p=0.4"}
        loaded = read_results_csv(tmp_path / "results.csv")
        assert len(loaded) == len(rows)
