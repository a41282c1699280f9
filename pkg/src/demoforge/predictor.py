"""Noise-timestep predictors and the passthrough/restore gate.

A predictor regresses the normalized diffusion step t/T at which a
sample would sit on the forward-noising trajectory, conditioned on its
(trusted) partner vector. At restoration time the predicted step t*
decides the treatment of each flagged sample: below a threshold the
sample passes through unchanged, otherwise the diffusion model denoises
it starting from t*.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .diffusion import CondDiffusionModel, DiffusionSchedule, Standardizer, restore_batch
from .seeding import derive_seed

RESTORE_MODES = ("full", "no_threshold", "fixed_t", "generation")

DEFAULT_T_THRES = 20
DEFAULT_FIXED_T = 50


class GateConfigError(ValueError):
    pass


@dataclass
class NoisePredictor:
    """Scalar regressor of the noise timestep, conditioned on a partner vector."""

    net: nn.MlpModel
    role: str  # psi_s | psi_a
    T: int
    sample_norm: Standardizer
    cond_norm: Standardizer

    @property
    def sample_dim(self) -> int:
        return self.sample_norm.mean.shape[0]


@dataclass
class PredictorTrainConfig:
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    epochs: int = 500
    lr: float = 1e-3
    batch_size: int = 128
    seed: int = 0


def train_predictor(
    samples: np.ndarray,
    conditions: np.ndarray,
    role: str,
    schedule: DiffusionSchedule,
    cfg: PredictorTrainConfig,
) -> NoisePredictor:
    """Fit the timestep regressor on clean pairs.

    Every minibatch forward-noises its samples at fresh t ~ Uniform{1..T}
    and regresses the normalized target t/T.
    """
    if len(samples) == 0:
        raise ValueError("clean subset is empty")
    sample_norm = Standardizer.fit(samples)
    cond_norm = Standardizer.fit(conditions)
    x0_all = sample_norm.apply(samples)
    cond_all = cond_norm.apply(conditions)

    spec = nn.MlpSpec(
        input_dim=x0_all.shape[1] + cond_all.shape[1],
        hidden_dims=tuple(cfg.hidden),
        output_dim=1,
    )
    model = nn.mlp_init(spec, derive_seed(cfg.seed, f"{role}-init"))

    alpha = schedule.alpha.astype(np.float32)
    sigma = schedule.sigma.astype(np.float32)

    def make_batch(xb, cb, epoch, rng):
        t = rng.integers(1, schedule.T + 1, size=len(xb))
        eps = rng.standard_normal(xb.shape).astype(np.float32)
        x_t = alpha[t - 1, None] * xb + sigma[t - 1, None] * eps
        inputs = np.concatenate([x_t, cb], axis=1).astype(np.float32)
        targets = (t[:, None] / schedule.T).astype(np.float32)
        return inputs, targets

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
    return NoisePredictor(net=model, role=role, T=schedule.T, sample_norm=sample_norm, cond_norm=cond_norm)


def predict_t(pred: NoisePredictor, sample: np.ndarray, cond: np.ndarray) -> np.ndarray | int:
    """Predicted timestep(s): round(clamp(raw, 0, 1) * T). Pure."""
    single = np.asarray(sample).ndim == 1
    x = pred.sample_norm.apply(np.atleast_2d(np.asarray(sample)))
    c = pred.cond_norm.apply(np.atleast_2d(np.asarray(cond)))
    raw = nn.mlp_forward(pred.net, np.concatenate([x, c], axis=1))[:, 0]
    t_star = np.rint(np.clip(raw, 0.0, 1.0) * pred.T).astype(np.int64)
    return int(t_star[0]) if single else t_star


@dataclass
class GateResult:
    """Outcome of gating one flagged subset."""

    samples: np.ndarray  # restored-or-passed sample vectors, input order
    t_star: np.ndarray  # predicted timestep per sample
    restored_mask: np.ndarray  # bool; False = passed through unchanged
    counts: dict = field(default_factory=dict)


def gate_and_restore(
    flagged: np.ndarray,
    conditions: np.ndarray,
    pred: NoisePredictor | None,
    diff_model: CondDiffusionModel,
    t_thres: int = DEFAULT_T_THRES,
    mode: str = "full",
    fixed_t: int = DEFAULT_FIXED_T,
    seed: int = 0,
) -> GateResult:
    """Route each flagged sample through the threshold gate.

    Modes: ``full`` (predict t*, pass through when t* < t_thres, else
    restore from t*), ``no_threshold`` (restore every sample from its
    predicted t*), ``fixed_t`` (skip the predictor, restore all from a
    fixed step), ``generation`` (discard the noisy vector, sample fresh
    from the conditional model).
    """
    if mode not in RESTORE_MODES:
        raise GateConfigError(f"unknown restore mode {mode!r}")
    if not 0 <= t_thres <= diff_model.schedule.T:
        raise GateConfigError(f"t_thres {t_thres} outside [0, {diff_model.schedule.T}]")
    flagged = np.atleast_2d(np.asarray(flagged, dtype=np.float32))
    conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float32))
    n = len(flagged)
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return GateResult(
            samples=flagged.copy(),
            t_star=empty,
            restored_mask=np.zeros(0, dtype=bool),
            counts={"passed": 0, "restored": 0},
        )

    generation = mode == "generation"
    if mode == "fixed_t" or generation:
        t_star = np.full(n, fixed_t if mode == "fixed_t" else diff_model.schedule.T, dtype=np.int64)
    else:
        t_star = np.asarray(predict_t(pred, flagged, conditions))

    if mode == "full":
        restored_mask = t_star >= t_thres
    else:
        restored_mask = np.ones(n, dtype=bool)

    t_starts = np.where(restored_mask, t_star, 0)
    samples = restore_batch(diff_model, flagged, conditions, t_starts, base_seed=seed, generation=generation)
    # restore_batch treats t_start=0 as passthrough, but a predicted
    # t*=0 inside the restored set must stay flagged as restored.
    restored_mask = restored_mask & (t_starts > 0) if not generation else restored_mask
    samples[~restored_mask] = flagged[~restored_mask]
    return GateResult(
        samples=samples,
        t_star=t_star,
        restored_mask=restored_mask,
        counts={"passed": int(n - restored_mask.sum()), "restored": int(restored_mask.sum())},
    )


def save_restore_report(path: str | Path, per_subset: dict[str, dict], discarded: int) -> None:
    """Write gate counts per subset plus the dropped both-noisy count."""
    payload = {
        "subsets": {name: dict(counts) for name, counts in per_subset.items()},
        "discarded": int(discarded),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_restore_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
