"""Command-line frontend: stage commands, artifact plumbing, reports.

Every verb reads a config (defaults if absent), applies ``--override``
key=value pairs, and writes its artifacts under ``--out``. Stage verbs
chain through files so a pipeline can be re-run piecemeal; ``pipeline``
runs everything in one process. Exit codes identify the failing stage.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nn
from .config import ConfigError, RunConfig, apply_overrides, parse_config
from .demos import DemoSet, NoiseSpec, corrupt, gen_expert_demos, load_demos, make_env, save_demos
from .diffusion import (
    CondDiffusionModel,
    DiffusionTrainConfig,
    Standardizer,
    load_schedule,
    make_schedule,
    save_schedule,
    train_cond_diffusion,
)
from .filtering import FilterConfig, filter_variant, load_filter_result, save_filter_result
from .pipeline import (
    PolicyBundle,
    StageError,
    ablation_suite,
    evaluate,
    read_results_csv,
    results_rows,
    run_pipeline,
    train_bc,
    write_results_csv,
    write_run_manifest,
)
from .predictor import (
    NoisePredictor,
    PredictorTrainConfig,
    gate_and_restore,
    save_restore_report,
    train_predictor,
)
from .seeding import derive_seed

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
STAGE_EXIT_CODES = {
    "gen_demos": 10,
    "corrupt": 11,
    "filter": 12,
    "train_restorers": 13,
    "restore": 14,
    "train_policy": 15,
    "eval": 16,
}


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    overrides = dict(kv.split("=", 1) for kv in args.override)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "episodes", None) is not None:
        overrides["eval.episodes"] = str(args.episodes)
    if getattr(args, "seeds", None) is not None:
        overrides["eval.seeds"] = str(args.seeds)
    return apply_overrides(cfg, overrides)


def _save_norms(path: Path, **norms: Standardizer) -> None:
    path.write_text(json.dumps({name: norm.to_dict() for name, norm in norms.items()}))


def _load_norms(path: Path) -> dict[str, Standardizer]:
    return {name: Standardizer.from_dict(d) for name, d in json.loads(path.read_text()).items()}


def _save_diffusion(model: CondDiffusionModel, directory: Path) -> None:
    nn.save_checkpoint(model.eps_net, directory, model.role)
    _save_norms(directory / "norms.json", target=model.target_norm, cond=model.cond_norm)


def _load_diffusion(directory: Path, schedule) -> CondDiffusionModel:
    net, role = nn.load_checkpoint(directory)
    norms = _load_norms(directory / "norms.json")
    return CondDiffusionModel(eps_net=net, role=role, schedule=schedule, target_norm=norms["target"], cond_norm=norms["cond"])


def _save_predictor(pred: NoisePredictor, directory: Path) -> None:
    nn.save_checkpoint(pred.net, directory, pred.role)
    _save_norms(directory / "norms.json", sample=pred.sample_norm, cond=pred.cond_norm)
    (directory / "meta.json").write_text(json.dumps({"T": pred.T}))


def _load_predictor(directory: Path) -> NoisePredictor:
    net, role = nn.load_checkpoint(directory)
    norms = _load_norms(directory / "norms.json")
    meta = json.loads((directory / "meta.json").read_text())
    return NoisePredictor(net=net, role=role, T=meta["T"], sample_norm=norms["sample"], cond_norm=norms["cond"])


def cmd_gen_demos(cfg: RunConfig, out: Path) -> None:
    env = make_env(cfg.env_kind)
    demos = gen_expert_demos(env, cfg.n_pairs, derive_seed(cfg.seed, "demos"))
    save_demos(demos, out / "demos_clean.zip")


def cmd_corrupt(cfg: RunConfig, out: Path) -> None:
    demos = load_demos(out / "demos_clean.zip")
    spec = NoiseSpec(
        family=cfg.noise_family,
        p=cfg.noise_p,
        sigma=cfg.noise_sigma,
        bias=cfg.noise_bias,
        seed=derive_seed(cfg.seed, "noise"),
    )
    save_demos(corrupt(demos, spec), out / "demos_noisy.zip")


def _filter_config(cfg: RunConfig) -> FilterConfig:
    return FilterConfig(
        variant=cfg.filter_variant,
        tau=cfg.filter_tau,
        k=cfg.filter_k,
        ae_hidden=tuple(cfg.ae_hidden),
        ae_epochs=cfg.ae_epochs,
        ae_lr=cfg.ae_lr,
        batch_size=cfg.batch_size,
        seed=derive_seed(cfg.seed, "filter"),
    )


def cmd_filter(cfg: RunConfig, out: Path) -> None:
    demos = load_demos(out / "demos_noisy.zip")
    result = filter_variant(demos, _filter_config(cfg))
    save_filter_result(result, out / "filter.json")


def cmd_train_restorers(cfg: RunConfig, out: Path) -> None:
    demos = load_demos(out / "demos_noisy.zip")
    fr = load_filter_result(out / "filter.json")
    clean_idx = fr.subsets["clean_pairs"]
    s_clean, a_clean = demos.states[clean_idx], demos.actions[clean_idx]
    schedule = make_schedule(cfg.schedule_T, cfg.schedule_beta_start, cfg.schedule_beta_end)
    save_schedule(schedule, out / "schedule.json")
    dcfg = DiffusionTrainConfig(
        hidden=tuple(cfg.diffusion_hidden),
        epochs=cfg.diffusion_epochs,
        lr=cfg.diffusion_lr,
        batch_size=cfg.batch_size,
        seed=derive_seed(cfg.seed, "diffusion"),
    )
    ckpt = out / "checkpoints"
    _save_diffusion(train_cond_diffusion(s_clean, a_clean, "theta_s", schedule, dcfg), ckpt / "theta_s")
    _save_diffusion(train_cond_diffusion(a_clean, s_clean, "theta_a", schedule, dcfg), ckpt / "theta_a")
    if cfg.restore_mode in ("full", "no_threshold"):
        pcfg = PredictorTrainConfig(
            hidden=tuple(cfg.predictor_hidden),
            epochs=cfg.predictor_epochs,
            lr=cfg.predictor_lr,
            batch_size=cfg.batch_size,
            seed=derive_seed(cfg.seed, "predictor"),
        )
        _save_predictor(train_predictor(s_clean, a_clean, "psi_s", schedule, pcfg), ckpt / "psi_s")
        _save_predictor(train_predictor(a_clean, s_clean, "psi_a", schedule, pcfg), ckpt / "psi_a")


def cmd_restore(cfg: RunConfig, out: Path) -> None:
    demos = load_demos(out / "demos_noisy.zip")
    fr = load_filter_result(out / "filter.json")
    schedule = load_schedule(out / "schedule.json")
    ckpt = out / "checkpoints"
    theta_s = _load_diffusion(ckpt / "theta_s", schedule)
    theta_a = _load_diffusion(ckpt / "theta_a", schedule)
    psi_s = psi_a = None
    if cfg.restore_mode in ("full", "no_threshold"):
        psi_s = _load_predictor(ckpt / "psi_s")
        psi_a = _load_predictor(ckpt / "psi_a")

    ns_idx = fr.subsets["noisy_state_clean_action"]
    na_idx = fr.subsets["clean_state_noisy_action"]
    clean_idx = fr.subsets["clean_pairs"]
    gate_s = gate_and_restore(
        demos.states[ns_idx],
        demos.actions[ns_idx],
        psi_s,
        theta_s,
        t_thres=cfg.t_thres,
        mode=cfg.restore_mode,
        fixed_t=cfg.fixed_t,
        seed=derive_seed(cfg.seed, "restore-states"),
    )
    gate_a = gate_and_restore(
        demos.actions[na_idx],
        demos.states[na_idx],
        psi_a,
        theta_a,
        t_thres=cfg.t_thres,
        mode=cfg.restore_mode,
        fixed_t=cfg.fixed_t,
        seed=derive_seed(cfg.seed, "restore-actions"),
    )
    save_restore_report(
        out / "restore_report.json",
        {"noisy_state_clean_action": gate_s.counts, "clean_state_noisy_action": gate_a.counts},
        discarded=len(fr.subsets["both_noisy"]),
    )
    final_idx = np.sort(np.concatenate([clean_idx, ns_idx, na_idx]))
    states = demos.states[final_idx].copy()
    actions = demos.actions[final_idx].copy()
    states[np.searchsorted(final_idx, ns_idx)] = gate_s.samples
    actions[np.searchsorted(final_idx, na_idx)] = gate_a.samples
    restored = DemoSet(
        states=states,
        actions=actions,
        traj_lengths=np.array([len(final_idx)], dtype=np.int64),
        env_kind=demos.env_kind,
    )
    save_demos(restored, out / "demos_restored.zip")


def cmd_train_policy(cfg: RunConfig, out: Path) -> None:
    demos = load_demos(out / "demos_restored.zip")
    bundle = train_bc(demos.states, demos.actions, cfg)
    ckpt = out / "checkpoints"
    for i, member in enumerate(bundle.members):
        nn.save_checkpoint(member, ckpt / f"policy-{i}", "policy")
    (ckpt / "policy.json").write_text(json.dumps({"strategy": bundle.strategy, "n": bundle.n}))


def _load_policy(out: Path) -> PolicyBundle:
    ckpt = out / "checkpoints"
    meta = json.loads((ckpt / "policy.json").read_text())
    members = [nn.load_checkpoint(ckpt / f"policy-{i}")[0] for i in range(meta["n"])]
    return PolicyBundle(members=members, strategy=meta["strategy"])


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    bundle = _load_policy(out)
    ev = evaluate(
        bundle,
        cfg.env_kind,
        episodes=cfg.eval_episodes,
        seeds=cfg.eval_seeds,
        base_seed=derive_seed(cfg.seed, "eval"),
    )
    write_results_csv(results_rows("dmdr", ev), out / "results.csv")


def cmd_pipeline(cfg: RunConfig, out: Path) -> None:
    result, bundle, _ = run_pipeline(cfg, out_dir=out)
    save_demos(result.clean_demos, out / "demos_clean.zip")
    save_demos(result.noisy_demos, out / "demos_noisy.zip")
    restored = DemoSet(
        states=result.final_states,
        actions=result.final_actions,
        traj_lengths=np.array([len(result.final_indices)], dtype=np.int64),
        env_kind=cfg.env_kind,
    )
    save_demos(restored, out / "demos_restored.zip")
    ckpt = out / "checkpoints"
    for i, member in enumerate(bundle.members):
        nn.save_checkpoint(member, ckpt / f"policy-{i}", "policy")
    (ckpt / "policy.json").write_text(json.dumps({"strategy": bundle.strategy, "n": bundle.n}))
    write_run_manifest(cfg, result.timings, out)


def cmd_ablate(cfg: RunConfig, out: Path, axis: str) -> None:
    workers = max(1, int(os.environ.get("DEMOFORGE_THREADS", "1")))
    if workers == 1:
        ablation_suite(cfg, axis, out_dir=out)
        return
    # one worker per setting, isolated subdirectories, deterministic row order
    from .pipeline import ABLATION_AXES, PipelineConfigError

    if axis not in ABLATION_AXES:
        raise PipelineConfigError(f"unknown ablation axis {axis!r}")

    rows = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = []
        for key, value in ABLATION_AXES[axis]:
            if axis == "ensemble_strategy":
                strategy, n = value
                run_cfg = replace(cfg, policy_strategy=strategy, policy_n=n)
                setting = f"{strategy}-{n}"
            elif axis == "trusted_fraction":
                run_cfg = replace(cfg, filter_tau=value)
                setting = f"tau={value}"
            elif axis == "noise_level":
                run_cfg = replace(cfg, noise_p=value)
                setting = f"p={value}"
            elif axis == "filter_variant":
                run_cfg = replace(cfg, filter_variant=value)
                setting = str(value)
            elif axis == "restore_variant":
                run_cfg = replace(cfg, restore_mode=value)
                setting = str(value)
            else:
                run_cfg = replace(cfg, noise_family=value)
                setting = str(value)
            sub_dir = out / setting.replace("=", "_")
            futures.append((setting, pool.submit(run_pipeline, run_cfg, sub_dir)))
        for setting, future in futures:
            _, _, ev = future.result()
            rows.extend(results_rows(setting, ev))
    write_results_csv(rows, out / "results.csv")


def cmd_report(out: Path) -> None:
    rows = read_results_csv(out / "results.csv")
    headers = ("setting", "seed", "metric", "value")
    table = [[str(row[h]) for h in headers] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in table)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for r in table:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(headers))))
    (out / "report.txt").write_text("\n".join(lines) + "\n")

    dat_lines = ["# " + " ".join(headers)]
    for r in table:
        dat_lines.append(" ".join(r))
    (out / "report.dat").write_text("\n".join(dat_lines) + "\n")
    print("\n".join(lines))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="demoforge", description="Filter-and-restore pipeline for noisy demonstrations")
    sub = parser.add_subparsers(dest="verb", required=True)
    verbs = (
        "gen-demos",
        "corrupt",
        "filter",
        "train-restorers",
        "restore",
        "train-policy",
        "eval",
        "pipeline",
        "ablate",
        "report",
    )
    for verb in verbs:
        p = sub.add_parser(verb)
        p.add_argument("--config", default=None, help="config file path (defaults apply if omitted)")
        p.add_argument("--out", required=True, help="artifact output directory")
        p.add_argument("--override", action="append", default=[], metavar="K=V", help="config override, repeatable")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        if verb == "eval":
            p.add_argument("--episodes", type=int, default=None)
            p.add_argument("--seeds", type=int, default=None)
        if verb == "ablate":
            p.add_argument("--axis", required=True, help="ablation axis name")
    return parser


VERB_STAGE = {
    "gen-demos": "gen_demos",
    "corrupt": "corrupt",
    "filter": "filter",
    "train-restorers": "train_restorers",
    "restore": "restore",
    "train-policy": "train_policy",
    "eval": "eval",
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.verb == "report":
            cmd_report(out)
            return EXIT_OK
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    stage = VERB_STAGE.get(args.verb, args.verb)
    try:
        if args.verb == "gen-demos":
            cmd_gen_demos(cfg, out)
        elif args.verb == "corrupt":
            cmd_corrupt(cfg, out)
        elif args.verb == "filter":
            cmd_filter(cfg, out)
        elif args.verb == "train-restorers":
            cmd_train_restorers(cfg, out)
        elif args.verb == "restore":
            cmd_restore(cfg, out)
        elif args.verb == "train-policy":
            cmd_train_policy(cfg, out)
        elif args.verb == "eval":
            cmd_eval(cfg, out)
        elif args.verb == "pipeline":
            cmd_pipeline(cfg, out)
        elif args.verb == "ablate":
            cmd_ablate(cfg, out, args.axis)
        return EXIT_OK
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return STAGE_EXIT_CODES.get(exc.stage, EXIT_ERROR)
    except Exception as exc:
        print(f"error in {stage}: {exc}", file=sys.stderr)
        return STAGE_EXIT_CODES.get(stage, EXIT_ERROR)


if __name__ == "__main__":
    sys.exit(main())
