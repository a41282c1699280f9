"""End-to-end orchestration: corrupt, filter, restore, clone, evaluate.

``run_dmdr`` chains the full filter-and-restore pipeline and returns the
aggregated repaired dataset; ``train_bc``/``evaluate`` implement
behavioral cloning (optionally as an ensemble) and the fixed evaluation
protocol; ``ablation_suite`` sweeps one configuration axis with shared
seeds so rows differ only on the axis under study.

Determinism contract: identical RunConfig -> byte-identical final
dataset and results table. Every stage derives its RNG stream from the
master seed with a fixed tag, so no stage depends on scheduling.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .config import POLICY_STRATEGIES, RunConfig, config_to_dict
from .demos import DemoSet, NoiseSpec, corrupt, env_rollout, gen_expert_demos, make_env
from .diffusion import (
    DiffusionTrainConfig,
    make_schedule,
    save_schedule,
    train_cond_diffusion,
)
from .filtering import FilterConfig, FilterResult, filter_variant, save_filter_result
from .predictor import PredictorTrainConfig, gate_and_restore, save_restore_report, train_predictor
from .seeding import derive_seed

STAGES = ("gen_demos", "corrupt", "filter", "train_restorers", "restore", "train_policy", "eval")


class PipelineConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """Component failure annotated with the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PolicyBundle:
    """One or more state->action regressors aggregated by coordinate mean."""

    members: list[nn.MlpModel]
    strategy: str

    @property
    def n(self) -> int:
        return len(self.members)

    def predict(self, states: np.ndarray) -> np.ndarray:
        single = np.asarray(states).ndim == 1
        x = np.atleast_2d(np.asarray(states, dtype=np.float32))
        out = np.mean([nn.mlp_forward(m, x) for m in self.members], axis=0)
        return out[0] if single else out

    def as_policy(self):
        return lambda s: self.predict(s)


def train_bc(
    states: np.ndarray,
    actions: np.ndarray,
    cfg: RunConfig,
    strategy: str | None = None,
    n: int | None = None,
) -> PolicyBundle:
    """Behavioral cloning with one of the ensemble strategies.

    ``split`` partitions a seeded permutation into n disjoint chunks,
    ``sample_with_replacement`` bootstraps n training sets, ``shuffle``
    trains n members on the full data with distinct seeds, ``single``
    is plain BC.
    """
    strategy = cfg.policy_strategy if strategy is None else strategy
    n = cfg.policy_n if n is None else n
    if strategy not in POLICY_STRATEGIES:
        raise PipelineConfigError(f"unknown policy strategy {strategy!r}")
    if strategy == "single" and n != 1:
        raise PipelineConfigError("single strategy requires n=1")
    N = len(states)
    if N == 0:
        raise PipelineConfigError("empty training set")
    if n < 1:
        raise PipelineConfigError("member count must be >= 1")
    if strategy == "split" and n > N:
        raise PipelineConfigError(f"cannot split {N} pairs into {n} parts")

    if strategy == "split":
        perm = np.random.default_rng(derive_seed(cfg.seed, "policy-split")).permutation(N)
        chunks = np.array_split(perm, n)
    members = []
    for i in range(n):
        if strategy == "split":
            idx = np.sort(chunks[i])
        elif strategy == "sample_with_replacement":
            rng = np.random.default_rng(derive_seed(cfg.seed, f"policy-boot-{i}"))
            idx = np.sort(rng.integers(0, N, size=N))
        else:  # single, shuffle: full data
            idx = slice(None)
        spec = nn.MlpSpec(states.shape[1], tuple(cfg.policy_hidden), actions.shape[1])
        model = nn.mlp_init(spec, derive_seed(cfg.seed, f"policy-{i}-init"))
        nn.train_mse(
            model,
            states[idx],
            actions[idx],
            epochs=cfg.policy_epochs,
            base_lr=cfg.policy_lr,
            batch_size=cfg.batch_size,
            seed=derive_seed(cfg.seed, f"policy-{i}-train"),
        )
        members.append(model)
    return PolicyBundle(members=members, strategy=strategy)


@dataclass
class EvalResult:
    metric_name: str
    per_seed: np.ndarray  # (seeds,) mean metric per evaluation seed
    mean: float
    std: float


def evaluate(bundle_or_policy, env_kind: str, episodes: int = 100, seeds: int = 5, base_seed: int = 0) -> EvalResult:
    """Mean +/- std of the env metric over independent evaluation seeds."""
    env = make_env(env_kind)
    policy = bundle_or_policy.as_policy() if isinstance(bundle_or_policy, PolicyBundle) else bundle_or_policy
    per_seed = np.zeros(seeds, dtype=np.float64)
    metric_name = ""
    for i in range(seeds):
        summary = env_rollout(env, policy, episodes, seed=derive_seed(base_seed, f"eval-{i}"))
        per_seed[i] = summary.mean
        metric_name = summary.metric_name
    return EvalResult(metric_name=metric_name, per_seed=per_seed, mean=float(per_seed.mean()), std=float(per_seed.std()))


@dataclass
class PipelineResult:
    """Everything run_dmdr produces, kept in memory for downstream stages."""

    clean_demos: DemoSet
    noisy_demos: DemoSet
    filter_result: FilterResult
    final_indices: np.ndarray  # original pair indices in the aggregated set
    final_states: np.ndarray
    final_actions: np.ndarray
    restored_state_mask: np.ndarray  # within final set: state came from the restorer
    restored_action_mask: np.ndarray
    gate_counts: dict[str, dict] = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def n_discarded(self) -> int:
        return len(self.filter_result.subsets["both_noisy"])


def _stage(timings: dict, name: str):
    class _Timer:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            timings[name] = time.perf_counter() - self.t0
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, exc) from exc
            return False

    return _Timer()


def run_dmdr(cfg: RunConfig, out_dir: str | Path | None = None) -> PipelineResult:
    """Corrupt, filter, train restorers, and rebuild the demo set.

    Flagged states are restored conditioned on their trusted actions and
    vice versa; pairs flagged noisy on both sides are dropped. Artifacts
    land under ``out_dir`` when given.
    """
    timings: dict[str, float] = {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    with _stage(timings, "gen_demos"):
        env = make_env(cfg.env_kind)
        clean = gen_expert_demos(env, cfg.n_pairs, derive_seed(cfg.seed, "demos"))

    with _stage(timings, "corrupt"):
        spec = NoiseSpec(
            family=cfg.noise_family,
            p=cfg.noise_p,
            sigma=cfg.noise_sigma,
            bias=cfg.noise_bias,
            seed=derive_seed(cfg.seed, "noise"),
        )
        noisy = corrupt(clean, spec)

    with _stage(timings, "filter"):
        fcfg = FilterConfig(
            variant=cfg.filter_variant,
            tau=cfg.filter_tau,
            k=cfg.filter_k,
            ae_hidden=tuple(cfg.ae_hidden),
            ae_epochs=cfg.ae_epochs,
            ae_lr=cfg.ae_lr,
            batch_size=cfg.batch_size,
            seed=derive_seed(cfg.seed, "filter"),
        )
        fr = filter_variant(noisy, fcfg)
        if out is not None:
            save_filter_result(fr, out / "filter.json")

    clean_idx = fr.subsets["clean_pairs"]
    if len(clean_idx) == 0:
        raise StageError("filter", ValueError("clean-pair subset is empty"))
    s_clean = noisy.states[clean_idx]
    a_clean = noisy.actions[clean_idx]

    with _stage(timings, "train_restorers"):
        schedule = make_schedule(cfg.schedule_T, cfg.schedule_beta_start, cfg.schedule_beta_end)
        dcfg = DiffusionTrainConfig(
            hidden=tuple(cfg.diffusion_hidden),
            epochs=cfg.diffusion_epochs,
            lr=cfg.diffusion_lr,
            batch_size=cfg.batch_size,
            seed=derive_seed(cfg.seed, "diffusion"),
        )
        theta_s = train_cond_diffusion(s_clean, a_clean, "theta_s", schedule, dcfg)
        theta_a = train_cond_diffusion(a_clean, s_clean, "theta_a", schedule, dcfg)
        psi_s = psi_a = None
        if cfg.restore_mode in ("full", "no_threshold"):
            pcfg = PredictorTrainConfig(
                hidden=tuple(cfg.predictor_hidden),
                epochs=cfg.predictor_epochs,
                lr=cfg.predictor_lr,
                batch_size=cfg.batch_size,
                seed=derive_seed(cfg.seed, "predictor"),
            )
            psi_s = train_predictor(s_clean, a_clean, "psi_s", schedule, pcfg)
            psi_a = train_predictor(a_clean, s_clean, "psi_a", schedule, pcfg)
        if out is not None:
            save_schedule(schedule, out / "schedule.json")
            ckpt = out / "checkpoints"
            ckpt.mkdir(exist_ok=True)
            nn.save_checkpoint(theta_s.eps_net, ckpt / "theta_s", "theta_s")
            nn.save_checkpoint(theta_a.eps_net, ckpt / "theta_a", "theta_a")
            if psi_s is not None:
                nn.save_checkpoint(psi_s.net, ckpt / "psi_s", "psi_s")
                nn.save_checkpoint(psi_a.net, ckpt / "psi_a", "psi_a")

    with _stage(timings, "restore"):
        ns_idx = fr.subsets["noisy_state_clean_action"]  # restore states
        na_idx = fr.subsets["clean_state_noisy_action"]  # restore actions
        gate_s = gate_and_restore(
            noisy.states[ns_idx],
            noisy.actions[ns_idx],
            psi_s,
            theta_s,
            t_thres=cfg.t_thres,
            mode=cfg.restore_mode,
            fixed_t=cfg.fixed_t,
            seed=derive_seed(cfg.seed, "restore-states"),
        )
        gate_a = gate_and_restore(
            noisy.actions[na_idx],
            noisy.states[na_idx],
            psi_a,
            theta_a,
            t_thres=cfg.t_thres,
            mode=cfg.restore_mode,
            fixed_t=cfg.fixed_t,
            seed=derive_seed(cfg.seed, "restore-actions"),
        )
        gate_counts = {
            "noisy_state_clean_action": gate_s.counts,
            "clean_state_noisy_action": gate_a.counts,
        }
        if out is not None:
            save_restore_report(out / "restore_report.json", gate_counts, discarded=len(fr.subsets["both_noisy"]))

        final_idx = np.sort(np.concatenate([clean_idx, ns_idx, na_idx]))
        final_states = noisy.states[final_idx].copy()
        final_actions = noisy.actions[final_idx].copy()
        restored_state_mask = np.zeros(len(final_idx), dtype=bool)
        restored_action_mask = np.zeros(len(final_idx), dtype=bool)
        pos = np.searchsorted(final_idx, ns_idx)
        final_states[pos] = gate_s.samples
        restored_state_mask[pos] = gate_s.restored_mask
        pos = np.searchsorted(final_idx, na_idx)
        final_actions[pos] = gate_a.samples
        restored_action_mask[pos] = gate_a.restored_mask

    result = PipelineResult(
        clean_demos=clean,
        noisy_demos=noisy,
        filter_result=fr,
        final_indices=final_idx,
        final_states=final_states,
        final_actions=final_actions,
        restored_state_mask=restored_state_mask,
        restored_action_mask=restored_action_mask,
        gate_counts=gate_counts,
        models={"theta_s": theta_s, "theta_a": theta_a, "psi_s": psi_s, "psi_a": psi_a, "schedule": schedule},
        timings=timings,
    )
    assert len(result.final_indices) + result.n_discarded == noisy.n_pairs
    return result


def run_pipeline(cfg: RunConfig, out_dir: str | Path | None = None) -> tuple[PipelineResult, PolicyBundle, EvalResult]:
    """Full run: restore the dataset, clone a policy, evaluate it."""
    result = run_dmdr(cfg, out_dir=out_dir)
    with _stage(result.timings, "train_policy"):
        bundle = train_bc(result.final_states, result.final_actions, cfg)
    with _stage(result.timings, "eval"):
        ev = evaluate(
            bundle,
            cfg.env_kind,
            episodes=cfg.eval_episodes,
            seeds=cfg.eval_seeds,
            base_seed=derive_seed(cfg.seed, "eval"),
        )
    if out_dir is not None:
        out = Path(out_dir)
        rows = results_rows("dmdr", ev)
        write_results_csv(rows, out / "results.csv")
        write_run_manifest(cfg, result.timings, out)
    return result, bundle, ev


ABLATION_AXES = {
    "filter_variant": [("filter.variant", v) for v in ("random", "ae_only", "lof_raw", "ae_lof")],
    "restore_variant": [("restore.mode", v) for v in ("full", "no_threshold", "fixed_t", "generation")],
    "trusted_fraction": [("filter.tau", v) for v in (0.3, 0.5, 0.7, 0.9)],
    "noise_type": [
        ("noise.family", v)
        for v in (
            "gaussian",
            "laplacian",
            "uniform",
            "gaussian_biased",
            "uniform_biased",
            "mix_gauss_uniform",
            "mix_gauss_gauss",
        )
    ],
    "noise_level": [("noise.p", v) for v in (0.2, 0.4)],
    "ensemble_strategy": [
        ("policy", ("single", 1)),
        ("policy", ("split", 5)),
        ("policy", ("sample_with_replacement", 5)),
        ("policy", ("shuffle", 5)),
    ],
}


def ablation_suite(cfg: RunConfig, axis: str, out_dir: str | Path | None = None) -> list[dict]:
    """Run the pipeline once per setting on one axis, shared master seed."""
    if axis not in ABLATION_AXES:
        raise PipelineConfigError(f"unknown ablation axis {axis!r}; valid: {sorted(ABLATION_AXES)}")
    rows = []
    for key, value in ABLATION_AXES[axis]:
        if axis == "ensemble_strategy":
            strategy, n = value
            run_cfg = replace(cfg, policy_strategy=strategy, policy_n=n)
            setting = f"{strategy}-{n}"
        elif axis == "filter_variant":
            run_cfg = replace(cfg, filter_variant=value)
            setting = str(value)
        elif axis == "restore_variant":
            run_cfg = replace(cfg, restore_mode=value)
            setting = str(value)
        elif axis == "trusted_fraction":
            run_cfg = replace(cfg, filter_tau=value)
            setting = f"tau={value}"
        elif axis == "noise_type":
            run_cfg = replace(cfg, noise_family=value)
            setting = str(value)
        else:  # noise_level
            run_cfg = replace(cfg, noise_p=value)
            setting = f"p={value}"
        sub_dir = None if out_dir is None else Path(out_dir) / setting.replace("=", "_")
        _, _, ev = run_pipeline(run_cfg, out_dir=sub_dir)
        rows.extend(results_rows(setting, ev))
    if out_dir is not None:
        write_results_csv(rows, Path(out_dir) / "results.csv")
    return rows


def results_rows(setting: str, ev: EvalResult) -> list[dict]:
    rows = [
        {"setting": setting, "seed": i, "metric": ev.metric_name, "value": float(v)}
        for i, v in enumerate(ev.per_seed)
    ]
    rows.append({"setting": setting, "seed": "mean", "metric": ev.metric_name, "value": ev.mean})
    rows.append({"setting": setting, "seed": "std", "metric": ev.metric_name, "value": ev.std})
    return rows


def write_results_csv(rows: list[dict], path: str | Path) -> None:
    """Deterministic CSV: repr-formatted floats, fixed column order."""
    lines = ["setting,seed,metric,value"]
    for row in rows:
        lines.append(f"{row['setting']},{row['seed']},{row['metric']},{repr(float(row['value']))}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_results_csv(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().strip().splitlines()
    rows = []
    for line in lines[1:]:
        setting, seed, metric, value = line.split(",")
        rows.append({"setting": setting, "seed": seed, "metric": metric, "value": float(value)})
    return rows


def write_run_manifest(cfg: RunConfig, timings: dict[str, float], out_dir: str | Path) -> None:
    """Config, config hash, stage timings, and artifact checksums."""
    out = Path(out_dir)
    cfg_dict = config_to_dict(cfg)
    cfg_hash = hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()
    checksums = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "run_manifest.json":
            checksums[str(p.relative_to(out))] = hashlib.sha256(p.read_bytes()).hexdigest()
    payload = {
        "config": cfg_dict,
        "config_hash": cfg_hash,
        "stage_timings": {k: round(v, 6) for k, v in timings.items()},
        "artifact_checksums": checksums,
    }
    (out / "run_manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
