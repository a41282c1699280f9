"""Conditional DDPMs for state and action restoration.

Schedule convention: x_t = alpha_t * x0 + sigma_t * eps with
alpha_t = sqrt(prod(1 - beta_i)) and sigma_t = sqrt(1 - alpha_t^2).
The default linear beta range (1e-3 -> 0.2 over 100 steps) is chosen so
the terminal latent is near-isotropic (alpha_T < 0.04).

Both models are trained in a standardized space: targets and conditions
are shifted/scaled per coordinate by clean-subset statistics, and
restored outputs are mapped back. Restoration initializes the reverse
chain at alpha_t* times the (standardized) noisy sample, which matches
the additive-corruption model's first two moments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .seeding import derive_seed

SCHEDULE_FORMAT_VERSION = "demoforge-schedule-1"

DEFAULT_T = 100
DEFAULT_BETA_START = 1e-3
DEFAULT_BETA_END = 0.2
EMBED_DIM = 16


class ScheduleConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray  # (T,) beta_1 .. beta_T
    alpha: np.ndarray  # (T,) alpha_t = sqrt(prod(1 - beta))
    sigma: np.ndarray  # (T,) sqrt(1 - alpha_t^2)
    posterior_var: np.ndarray  # (T,) beta_tilde_t

    def at(self, t: int) -> tuple[float, float]:
        """(alpha_t, sigma_t) for 1-based step t."""
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha[t - 1]), float(self.sigma[t - 1])


def make_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> DiffusionSchedule:
    if T < 1:
        raise ScheduleConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleConfigError(f"invalid beta range ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.cumprod(1.0 - beta)
    alpha = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return DiffusionSchedule(T=T, beta=beta, alpha=alpha, sigma=sigma, posterior_var=posterior_var)


def timestep_embedding(t, T: int, dim: int = EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of (possibly batched) integer timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return emb.astype(np.float32)


def forward_noise(
    schedule: DiffusionSchedule,
    x0: np.ndarray,
    t: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """x_t = alpha_t * x0 + sigma_t * eps; returns (x_t, eps)."""
    alpha_t, sigma_t = schedule.at(t)
    x0 = np.asarray(x0)
    eps = rng.standard_normal(x0.shape)
    return alpha_t * x0 + sigma_t * eps, eps


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray) -> "Standardizer":
        mean = data.astype(np.float64).mean(axis=0)
        std = np.maximum(data.astype(np.float64).std(axis=0), 1e-6)
        return cls(mean=mean.astype(np.float32), std=std.astype(np.float32))

    def apply(self, data: np.ndarray) -> np.ndarray:
        return ((data - self.mean) / self.std).astype(np.float32)

    def invert(self, data: np.ndarray) -> np.ndarray:
        return (data * self.std + self.mean).astype(np.float32)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(mean=np.array(d["mean"], dtype=np.float32), std=np.array(d["std"], dtype=np.float32))


@dataclass
class CondDiffusionModel:
    eps_net: nn.MlpModel
    role: str  # theta_s | theta_a
    schedule: DiffusionSchedule
    target_norm: Standardizer
    cond_norm: Standardizer

    @property
    def target_dim(self) -> int:
        return self.eps_net.spec.output_dim

    @property
    def cond_dim(self) -> int:
        return self.eps_net.spec.input_dim - self.target_dim - EMBED_DIM


@dataclass
class DiffusionTrainConfig:
    hidden: tuple[int, ...] = (256, 256, 256, 256)  # 5 layers of weights
    epochs: int = 2000
    lr: float = 1e-3
    batch_size: int = 128
    seed: int = 0


def _eps_inputs(x_t: np.ndarray, cond: np.ndarray, t, T: int) -> np.ndarray:
    emb = timestep_embedding(t, T)
    if emb.shape[0] == 1 and x_t.ndim == 2 and x_t.shape[0] > 1:
        emb = np.repeat(emb, x_t.shape[0], axis=0)
    return np.concatenate([np.atleast_2d(x_t), np.atleast_2d(cond), emb], axis=1).astype(np.float32)


def train_cond_diffusion(
    targets: np.ndarray,
    conditions: np.ndarray,
    role: str,
    schedule: DiffusionSchedule,
    cfg: DiffusionTrainConfig,
) -> CondDiffusionModel:
    """Train an eps-prediction network on clean (target, condition) pairs.

    Each minibatch draws fresh timesteps t ~ Uniform{1..T} and noise per
    sample; the network regresses the injected noise.
    """
    if len(targets) == 0:
        raise ValueError("clean subset is empty")
    target_norm = Standardizer.fit(targets)
    cond_norm = Standardizer.fit(conditions)
    x0_all = target_norm.apply(targets)
    cond_all = cond_norm.apply(conditions)

    d = x0_all.shape[1]
    spec = nn.MlpSpec(
        input_dim=d + cond_all.shape[1] + EMBED_DIM,
        hidden_dims=tuple(cfg.hidden),
        output_dim=d,
    )
    model = nn.mlp_init(spec, derive_seed(cfg.seed, f"{role}-init"))

    alpha = schedule.alpha.astype(np.float32)
    sigma = schedule.sigma.astype(np.float32)

    def make_batch(xb, cb, epoch, rng):
        t = rng.integers(1, schedule.T + 1, size=len(xb))
        eps = rng.standard_normal(xb.shape).astype(np.float32)
        x_t = alpha[t - 1, None] * xb + sigma[t - 1, None] * eps
        inputs = np.concatenate([x_t, cb, timestep_embedding(t, schedule.T)], axis=1)
        return inputs.astype(np.float32), eps

    nn.train_mse(
        model,
        x0_all,
        cond_all,
        epochs=cfg.epochs,
        base_lr=cfg.lr,
        batch_size=cfg.batch_size,
        seed=derive_seed(cfg.seed, f"{role}-train"),
        make_batch=make_batch,
    )
    return CondDiffusionModel(eps_net=model, role=role, schedule=schedule, target_norm=target_norm, cond_norm=cond_norm)


def predict_eps(model: CondDiffusionModel, x_t: np.ndarray, cond: np.ndarray, t: int) -> np.ndarray:
    """eps-net output for standardized inputs; batched or single."""
    single = np.asarray(x_t).ndim == 1
    inputs = _eps_inputs(x_t, cond, t, model.schedule.T)
    out = nn.mlp_forward(model.eps_net, inputs)
    return out[0] if single else out


def reverse_step(
    model: CondDiffusionModel,
    x_t: np.ndarray,
    cond: np.ndarray,
    t: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """One ancestral DDPM update in standardized space; z=0 at t=1."""
    sched = model.schedule
    if not 1 <= t <= sched.T:
        raise IndexError(f"timestep {t} outside [1, {sched.T}]")
    beta_t = float(sched.beta[t - 1])
    _, sigma_t = sched.at(t)
    eps_hat = predict_eps(model, x_t, cond, t)
    mean = (np.asarray(x_t) - (beta_t / sigma_t) * eps_hat) / np.sqrt(1.0 - beta_t)
    if t == 1:
        return mean
    z = rng.standard_normal(np.shape(x_t))
    return mean + np.sqrt(float(sched.posterior_var[t - 1])) * z


def restore(
    model: CondDiffusionModel,
    noisy: np.ndarray,
    cond: np.ndarray,
    t_start: int,
    seed: int = 0,
    generation: bool = False,
) -> np.ndarray:
    """Denoise a raw-space sample by reverse diffusion from step t_start.

    With ``generation=True`` the noisy sample is ignored and the chain
    starts from a standard normal draw (pure conditional generation).
    t_start = 0 is the identity.
    """
    if not 0 <= t_start <= model.schedule.T:
        raise IndexError(f"t_start {t_start} outside [0, {model.schedule.T}]")
    if t_start == 0 and not generation:
        return np.asarray(noisy, dtype=np.float32).copy()
    rng = np.random.default_rng(seed)
    cond_std = model.cond_norm.apply(np.asarray(cond))
    if generation:
        x = rng.standard_normal(model.target_dim)
    else:
        alpha_t, _ = model.schedule.at(t_start)
        x = alpha_t * model.target_norm.apply(np.asarray(noisy)).astype(np.float64)
    for t in range(t_start, 0, -1):
        x = reverse_step(model, x.astype(np.float32), cond_std, t, rng)
    return model.target_norm.invert(np.asarray(x))


def restore_batch(
    model: CondDiffusionModel,
    noisy: np.ndarray,
    cond: np.ndarray,
    t_starts: np.ndarray,
    base_seed: int = 0,
    generation: bool = False,
) -> np.ndarray:
    """Restoration of many samples with shared batched network calls.

    Per-sample results are bit-identical to `restore` called with seed
    derive_seed(base_seed, f"restore-{i}"): every sample keeps its own
    RNG stream, only the eps-net forward passes are batched.
    """
    noisy = np.atleast_2d(np.asarray(noisy))
    cond = np.atleast_2d(np.asarray(cond))
    t_starts = np.asarray(t_starts, dtype=np.int64)
    n, d = noisy.shape
    sched = model.schedule
    out = np.empty((n, d), dtype=np.float32)
    rngs = [np.random.default_rng(derive_seed(base_seed, f"restore-{i}")) for i in range(n)]
    cond_std = model.cond_norm.apply(cond)
    noisy_std = model.target_norm.apply(noisy)

    x = np.zeros((n, d), dtype=np.float64)
    for i in range(n):
        if generation:
            x[i] = rngs[i].standard_normal(d)
        elif t_starts[i] > 0:
            alpha_t, _ = sched.at(int(t_starts[i]))
            x[i] = alpha_t * noisy_std[i].astype(np.float64)
        else:
            out[i] = noisy[i]

    t_max = int(t_starts.max(initial=0))
    for t in range(t_max, 0, -1):
        active = np.flatnonzero(t_starts >= t)
        if len(active) == 0:
            continue
        beta_t = float(sched.beta[t - 1])
        _, sigma_t = sched.at(t)
        eps_hat = predict_eps(model, x[active].astype(np.float32), cond_std[active], t)
        mean = (x[active].astype(np.float32) - (beta_t / sigma_t) * eps_hat) / np.sqrt(1.0 - beta_t)
        if t > 1:
            z = np.stack([rngs[i].standard_normal(d) for i in active])
            x[active] = mean + np.sqrt(float(sched.posterior_var[t - 1])) * z
        else:
            x[active] = mean
    done = t_starts > 0 if not generation else np.ones(n, dtype=bool)
    if done.any():
        out[done] = model.target_norm.invert(x[done])
    return out


def save_schedule(schedule: DiffusionSchedule, path: str | Path) -> None:
    payload = {
        "format_version": SCHEDULE_FORMAT_VERSION,
        "T": schedule.T,
        "beta_start": repr(float(schedule.beta[0])),
        "beta_end": repr(float(schedule.beta[-1])),
        "alpha": [repr(float(v)) for v in schedule.alpha],
        "sigma": [repr(float(v)) for v in schedule.sigma],
        "posterior_var": [repr(float(v)) for v in schedule.posterior_var],
    }
    Path(path).write_text(json.dumps(payload))


def load_schedule(path: str | Path) -> DiffusionSchedule:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != SCHEDULE_FORMAT_VERSION:
        raise ScheduleConfigError(f"unknown schedule format {payload.get('format_version')!r}")
    return make_schedule(payload["T"], float(payload["beta_start"]), float(payload["beta_end"]))
