"""Run configuration: defaults, file parsing, and validation.

Config files are flat ``key = value`` text with dotted section prefixes
(``noise.p = 0.2``). Blank lines and ``#`` comments are ignored. Every
key has a default, so an empty file is a complete configuration; unknown
keys and out-of-range values are rejected with the offending line.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .demos import NOISE_FAMILIES
from .filtering import FILTER_VARIANTS
from .predictor import RESTORE_MODES

POLICY_STRATEGIES = ("single", "split", "sample_with_replacement", "shuffle")

ENV_KINDS = ("point_reach", "line_tracker")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    env_kind: str = "point_reach"
    n_pairs: int = 2000
    seed: int = 0
    batch_size: int = 128

    noise_family: str = "gaussian"
    noise_p: float = 0.2
    noise_sigma: float = 1.0 / 6.0
    noise_bias: float = 0.4

    filter_variant: str = "ae_lof"
    filter_tau: float = 0.5
    filter_k: int = 50
    ae_hidden: tuple[int, ...] = (128, 64, 8, 64, 128)
    ae_epochs: int = 1200
    ae_lr: float = 6e-3

    schedule_T: int = 100
    schedule_beta_start: float = 1e-3
    schedule_beta_end: float = 0.2

    diffusion_hidden: tuple[int, ...] = (128, 128, 128)
    diffusion_epochs: int = 1500
    diffusion_lr: float = 2e-3

    predictor_hidden: tuple[int, ...] = (128, 128, 128)
    predictor_epochs: int = 1000
    predictor_lr: float = 2e-3

    restore_mode: str = "full"
    t_thres: int = 20
    fixed_t: int = 50

    policy_strategy: str = "single"
    policy_n: int = 1
    policy_hidden: tuple[int, ...] = (128, 128, 128)
    policy_epochs: int = 600
    policy_lr: float = 2e-3

    eval_episodes: int = 100
    eval_seeds: int = 5


# dotted config key -> dataclass field
KEYMAP = {
    "env.kind": "env_kind",
    "data.n_pairs": "n_pairs",
    "seed": "seed",
    "train.batch_size": "batch_size",
    "noise.family": "noise_family",
    "noise.p": "noise_p",
    "noise.sigma": "noise_sigma",
    "noise.bias": "noise_bias",
    "filter.variant": "filter_variant",
    "filter.tau": "filter_tau",
    "filter.k": "filter_k",
    "filter.ae_hidden": "ae_hidden",
    "filter.ae_epochs": "ae_epochs",
    "filter.ae_lr": "ae_lr",
    "schedule.T": "schedule_T",
    "schedule.beta_start": "schedule_beta_start",
    "schedule.beta_end": "schedule_beta_end",
    "diffusion.hidden": "diffusion_hidden",
    "diffusion.epochs": "diffusion_epochs",
    "diffusion.lr": "diffusion_lr",
    "predictor.hidden": "predictor_hidden",
    "predictor.epochs": "predictor_epochs",
    "predictor.lr": "predictor_lr",
    "restore.mode": "restore_mode",
    "restore.t_thres": "t_thres",
    "restore.fixed_t": "fixed_t",
    "policy.strategy": "policy_strategy",
    "policy.n": "policy_n",
    "policy.hidden": "policy_hidden",
    "policy.epochs": "policy_epochs",
    "policy.lr": "policy_lr",
    "eval.episodes": "eval_episodes",
    "eval.seeds": "eval_seeds",
}

FIELDMAP = {v: k for k, v in KEYMAP.items()}


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            return tuple(int(part) for part in raw.split(",") if part.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"field {key!r}: cannot parse {raw!r}") from exc


def validate_config(cfg: RunConfig) -> None:
    def check(ok, key, message):
        if not ok:
            raise ConfigError(f"field {key!r}: {message}")

    check(cfg.env_kind in ENV_KINDS, "env.kind", f"must be one of {ENV_KINDS}")
    check(cfg.n_pairs > 0, "data.n_pairs", "must be positive")
    check(cfg.batch_size > 0, "train.batch_size", "must be positive")
    check(cfg.noise_family in NOISE_FAMILIES, "noise.family", f"must be one of {NOISE_FAMILIES}")
    check(0.0 <= cfg.noise_p <= 1.0, "noise.p", f"must be in [0, 1], got {cfg.noise_p}")
    check(cfg.noise_sigma > 0, "noise.sigma", "must be positive")
    check(cfg.filter_variant in FILTER_VARIANTS, "filter.variant", f"must be one of {FILTER_VARIANTS}")
    check(0.0 < cfg.filter_tau < 1.0, "filter.tau", f"must be in (0, 1), got {cfg.filter_tau}")
    check(cfg.filter_k >= 1, "filter.k", "must be >= 1")
    check(cfg.schedule_T >= 1, "schedule.T", "must be >= 1")
    check(
        0.0 < cfg.schedule_beta_start <= cfg.schedule_beta_end < 1.0,
        "schedule.beta_start",
        f"invalid beta range ({cfg.schedule_beta_start}, {cfg.schedule_beta_end})",
    )
    check(cfg.restore_mode in RESTORE_MODES, "restore.mode", f"must be one of {RESTORE_MODES}")
    check(0 <= cfg.t_thres <= cfg.schedule_T, "restore.t_thres", f"must be in [0, {cfg.schedule_T}]")
    check(1 <= cfg.fixed_t <= cfg.schedule_T, "restore.fixed_t", f"must be in [1, {cfg.schedule_T}]")
    check(cfg.policy_strategy in POLICY_STRATEGIES, "policy.strategy", f"must be one of {POLICY_STRATEGIES}")
    check(cfg.policy_n >= 1, "policy.n", "must be >= 1")
    check(cfg.policy_strategy != "single" or cfg.policy_n == 1, "policy.n", "must be 1 for the single strategy")
    check(cfg.eval_episodes >= 1, "eval.episodes", "must be >= 1")
    check(cfg.eval_seeds >= 1, "eval.seeds", "must be >= 1")
    for name in ("ae_hidden", "diffusion_hidden", "predictor_hidden", "policy_hidden"):
        dims = getattr(cfg, name)
        check(len(dims) > 0 and all(d > 0 for d in dims), FIELDMAP[name], "layer widths must be positive")
    for name in ("ae_epochs", "diffusion_epochs", "predictor_epochs", "policy_epochs"):
        check(getattr(cfg, name) >= 0, FIELDMAP[name], "must be >= 0")
    for name in ("ae_lr", "diffusion_lr", "predictor_lr", "policy_lr"):
        check(getattr(cfg, name) > 0, FIELDMAP[name], "must be positive")


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """New config with dotted-key string overrides applied and validated."""
    updates = {}
    for key, raw in overrides.items():
        if key not in KEYMAP:
            raise ConfigError(f"unknown key {key!r}")
        name = KEYMAP[key]
        updates[name] = _parse_value(str(raw), getattr(cfg, name), key)
    out = replace(cfg, **updates)
    validate_config(out)
    return out


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in KEYMAP:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        name = KEYMAP[key]
        try:
            updates[name] = _parse_value(raw, getattr(cfg, name), key)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    cfg = replace(cfg, **updates)
    validate_config(cfg)
    return cfg


def parse_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), source=str(path))


def config_to_dict(cfg: RunConfig) -> dict:
    """Dotted-key mapping with JSON-safe values (tuples become lists)."""
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        out[FIELDMAP[f.name]] = list(value) if isinstance(value, tuple) else value
    return out


def config_from_dict(d: dict) -> RunConfig:
    updates = {}
    for key, value in d.items():
        if key not in KEYMAP:
            raise ConfigError(f"unknown key {key!r}")
        name = KEYMAP[key]
        updates[name] = tuple(value) if isinstance(value, list) else value
    cfg = RunConfig(**updates)
    validate_config(cfg)
    return cfg


def format_config(cfg: RunConfig) -> str:
    """Render a config as parseable text (round-trips through parse)."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{FIELDMAP[f.name]} = {value}")
    return "\n".join(lines) + "\n"
