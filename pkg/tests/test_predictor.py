import numpy as np
import pytest

from demoforge import nn
from demoforge.diffusion import DiffusionTrainConfig, make_schedule, train_cond_diffusion
from demoforge.predictor import (
    GateConfigError,
    NoisePredictor,
    PredictorTrainConfig,
    gate_and_restore,
    load_restore_report,
    predict_t,
    save_restore_report,
    train_predictor,
)
from demoforge.diffusion import Standardizer
from demoforge.seeding import derive_seed

from test_diffusion import zero_eps_model


def constant_predictor(value, d=2, cond_dim=2, T=100):
    """Predictor whose raw output is exactly `value` for every input."""
    spec = nn.MlpSpec(d + cond_dim, (4,), 1)
    net = nn.mlp_init(spec, 0)
    for w in net.weights:
        w[:] = 0
    net.biases[-1][0] = value
    norm = Standardizer(mean=np.zeros(d, dtype=np.float32), std=np.ones(d, dtype=np.float32))
    cnorm = Standardizer(mean=np.zeros(cond_dim, dtype=np.float32), std=np.ones(cond_dim, dtype=np.float32))
    return NoisePredictor(net=net, role="psi_s", T=T, sample_norm=norm, cond_norm=cnorm)


def manifold_data(n, seed):
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1, 1, size=n)
    v = rng.uniform(-1, 1, size=n)
    states = np.stack([u, v, u * v, 0.5 * (u**2 - v**2), np.sin(2 * u)], axis=1).astype(np.float32)
    conds = np.stack([u, v], axis=1).astype(np.float32)
    return states, conds


def sinusoid_manifold(n, seed, d=32):
    """2-D latent manifold embedded in d ambient dims via random sinusoids.

    The ambient dimension gives the regressor enough independent noise
    coordinates to identify the corruption scale from a single draw.
    """
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1, 1, size=n)
    v = rng.uniform(-1, 1, size=n)
    coef = np.random.default_rng(1234)
    a = coef.uniform(-2, 2, size=d)
    b = coef.uniform(-2, 2, size=d)
    c = coef.uniform(0, 2 * np.pi, size=d)
    states = np.sin(u[:, None] * a + v[:, None] * b + c).astype(np.float32)
    conds = np.stack([u, v], axis=1).astype(np.float32)
    return states, conds


class TestPredictT:
    def test_clamp_below(self):
        pred = constant_predictor(-0.3)
        assert predict_t(pred, np.zeros(2), np.zeros(2)) == 0

    def test_clamp_above(self):
        pred = constant_predictor(1.7)
        assert predict_t(pred, np.zeros(2), np.zeros(2)) == 100

    def test_midpoint_rounding(self):
        pred = constant_predictor(0.375)
        assert predict_t(pred, np.zeros(2), np.zeros(2)) == 38

    def test_pure(self):
        pred = constant_predictor(0.5)
        x = np.array([0.1, 0.2], dtype=np.float32)
        assert predict_t(pred, x, x) == predict_t(pred, x, x)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(0)
        spec = nn.MlpSpec(4, (8,), 1)
        net = nn.mlp_init(spec, 1)
        norm = Standardizer.fit(rng.normal(size=(32, 2)).astype(np.float32))
        pred = NoisePredictor(net=net, role="psi_s", T=100, sample_norm=norm, cond_norm=norm)
        xs = rng.normal(size=(5, 2)).astype(np.float32)
        cs = rng.normal(size=(5, 2)).astype(np.float32)
        batch = predict_t(pred, xs, cs)
        for i in range(5):
            assert batch[i] == predict_t(pred, xs[i], cs[i])


class TestTraining:
    def test_zero_epochs_returns_init(self):
        states, conds = manifold_data(64, 0)
        cfg = PredictorTrainConfig(hidden=(8,), epochs=0, seed=5)
        pred = train_predictor(states, conds, "psi_s", make_schedule(), cfg)
        fresh = nn.mlp_init(pred.net.spec, derive_seed(5, "psi_s-init"))
        for a, b in zip(pred.net.weights, fresh.weights):
            assert np.array_equal(a, b)

    def test_empty_subset_rejected(self):
        with pytest.raises(ValueError):
            train_predictor(np.zeros((0, 3)), np.zeros((0, 2)), "psi_s", make_schedule(), PredictorTrainConfig())

    @pytest.mark.slow
    def test_beats_uniform_baseline_and_mae(self):
        sched = make_schedule()
        states, conds = sinusoid_manifold(2000, 1)
        cfg = PredictorTrainConfig(hidden=(128, 128, 128), epochs=800, lr=2e-3, seed=1)
        pred = train_predictor(states, conds, "psi_s", sched, cfg)

        held_states, held_conds = sinusoid_manifold(400, 99)
        rng = np.random.default_rng(2)
        t_true = rng.integers(1, sched.T + 1, size=len(held_states))
        eps = rng.standard_normal(held_states.shape).astype(np.float32)
        x0 = pred.sample_norm.apply(held_states)
        x_t = sched.alpha[t_true - 1, None] * x0 + sched.sigma[t_true - 1, None] * eps
        noised_raw = pred.sample_norm.invert(x_t.astype(np.float32))
        t_hat = predict_t(pred, noised_raw, held_conds)

        mae = np.mean(np.abs(t_hat - t_true))
        mse_norm = np.mean(((t_hat - t_true) / sched.T) ** 2)
        assert mae <= sched.T / 10
        assert mse_norm < 1 / 12

    @pytest.mark.slow
    def test_clean_vs_corrupted_separation(self):
        sched = make_schedule()
        states, conds = manifold_data(1500, 3)
        cfg = PredictorTrainConfig(hidden=(128, 128, 128), epochs=300, lr=2e-3, seed=3)
        pred = train_predictor(states, conds, "psi_s", sched, cfg)

        held_states, held_conds = manifold_data(300, 77)
        rng = np.random.default_rng(4)
        corrupted = held_states + rng.normal(0, 1 / 6, size=held_states.shape).astype(np.float32)
        t_clean = np.median(predict_t(pred, held_states, held_conds))
        t_corrupt = np.median(predict_t(pred, corrupted, held_conds))
        assert t_clean < t_corrupt


class TestGate:
    def make_inputs(self, n=8, seed=0):
        rng = np.random.default_rng(seed)
        flagged = rng.normal(size=(n, 2)).astype(np.float32)
        conds = rng.normal(size=(n, 2)).astype(np.float32)
        return flagged, conds

    def test_partition_counts(self):
        flagged, conds = self.make_inputs()
        pred = constant_predictor(0.3)  # t* = 30 for every sample
        model = zero_eps_model()
        res = gate_and_restore(flagged, conds, pred, model, t_thres=20)
        assert res.counts == {"passed": 0, "restored": 8}
        assert res.counts["passed"] + res.counts["restored"] == len(flagged)

    def test_below_threshold_passthrough(self):
        flagged, conds = self.make_inputs()
        pred = constant_predictor(0.1)  # t* = 10 < 20
        model = zero_eps_model()
        res = gate_and_restore(flagged, conds, pred, model, t_thres=20)
        assert res.counts == {"passed": 8, "restored": 0}
        assert np.array_equal(res.samples, flagged)

    def test_threshold_above_T_passes_everything(self):
        flagged, conds = self.make_inputs()
        pred = constant_predictor(0.9)
        model = zero_eps_model()
        res = gate_and_restore(flagged, conds, pred, model, t_thres=100)
        # t* = 90 < 100, all pass
        assert res.counts["passed"] == 8

    def test_no_threshold_restores_all(self):
        flagged, conds = self.make_inputs()
        pred = constant_predictor(0.05)  # t*=5, would pass under full mode
        model = zero_eps_model()
        res = gate_and_restore(flagged, conds, pred, model, t_thres=20, mode="no_threshold")
        assert res.counts["restored"] == 8
        assert not np.array_equal(res.samples, flagged)

    def test_fixed_t_ignores_predictor(self):
        flagged, conds = self.make_inputs()
        model = zero_eps_model()
        res = gate_and_restore(flagged, conds, None, model, mode="fixed_t", fixed_t=50)
        assert np.all(res.t_star == 50)
        assert res.counts["restored"] == 8

    def test_generation_ignores_noisy_input(self):
        flagged, conds = self.make_inputs()
        model = zero_eps_model()
        res_a = gate_and_restore(flagged, conds, None, model, mode="generation", seed=7)
        res_b = gate_and_restore(np.zeros_like(flagged), conds, None, model, mode="generation", seed=7)
        assert np.array_equal(res_a.samples, res_b.samples)

    def test_monotone_gate(self):
        rng = np.random.default_rng(1)
        spec = nn.MlpSpec(4, (8,), 1)
        net = nn.mlp_init(spec, 2)
        norm = Standardizer.fit(rng.normal(size=(32, 2)).astype(np.float32))
        pred = NoisePredictor(net=net, role="psi_s", T=100, sample_norm=norm, cond_norm=norm)
        flagged, conds = self.make_inputs(n=32, seed=2)
        model = zero_eps_model()
        prev_passed = -1
        for thres in (0, 10, 20, 50, 100):
            res = gate_and_restore(flagged, conds, pred, model, t_thres=thres)
            assert res.counts["passed"] >= prev_passed
            prev_passed = res.counts["passed"]

    def test_deterministic(self):
        flagged, conds = self.make_inputs()
        pred = constant_predictor(0.5)
        model = zero_eps_model()
        a = gate_and_restore(flagged, conds, pred, model, seed=3)
        b = gate_and_restore(flagged, conds, pred, model, seed=3)
        assert np.array_equal(a.samples, b.samples)

    def test_empty_subset(self):
        model = zero_eps_model()
        res = gate_and_restore(np.zeros((0, 2)), np.zeros((0, 2)), constant_predictor(0.5), model)
        assert res.counts == {"passed": 0, "restored": 0}
        assert res.samples.shape[0] == 0

    def test_bad_mode_and_threshold(self):
        flagged, conds = self.make_inputs()
        model = zero_eps_model()
        with pytest.raises(GateConfigError):
            gate_and_restore(flagged, conds, constant_predictor(0.5), model, mode="bogus")
        with pytest.raises(GateConfigError):
            gate_and_restore(flagged, conds, constant_predictor(0.5), model, t_thres=101)

    @pytest.mark.slow
    def test_gate_improves_corrupted_keeps_clean(self):
        sched = make_schedule()
        states, conds = manifold_data(1500, 6)
        dcfg = DiffusionTrainConfig(hidden=(128, 128, 128), epochs=400, lr=2e-3, seed=6)
        model = train_cond_diffusion(states, conds, "theta_s", sched, dcfg)
        pcfg = PredictorTrainConfig(hidden=(128, 128, 128), epochs=300, lr=2e-3, seed=6)
        pred = train_predictor(states, conds, "psi_s", sched, pcfg)

        held_states, held_conds = manifold_data(300, 66)
        rng = np.random.default_rng(7)
        mask = np.zeros(300, dtype=bool)
        mask[:150] = True
        corrupted = held_states.copy()
        corrupted[mask] += rng.normal(0, 1 / 6, size=(150, held_states.shape[1])).astype(np.float32)

        res = gate_and_restore(corrupted, held_conds, pred, model, t_thres=20, seed=8)
        # most genuinely clean samples should pass through unchanged
        assert np.mean(~res.restored_mask[~mask]) > 0.5
        # corrupted samples should get closer to the truth on average
        before = np.mean(np.sum((corrupted[mask] - held_states[mask]) ** 2, axis=1))
        after = np.mean(np.sum((res.samples[mask] - held_states[mask]) ** 2, axis=1))
        assert after < before


class TestReport:
    def test_roundtrip(self, tmp_path):
        per_subset = {
            "clean_state_noisy_action": {"passed": 3, "restored": 7},
            "noisy_state_clean_action": {"passed": 1, "restored": 4},
        }
        path = tmp_path / "restore_report.json"
        save_restore_report(path, per_subset, discarded=12)
        loaded = load_restore_report(path)
        assert loaded["discarded"] == 12
        assert loaded["subsets"]["clean_state_noisy_action"]["restored"] == 7
