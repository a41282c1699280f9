"""Demonstration filtering: autoencoder features, LOF scores, partition.

A pair of reconstruction autoencoders is trained on the (possibly noisy)
demonstrations; Local Outlier Factor scores computed on the bottleneck
features rank each state and action, and the lowest-scoring trusted
fraction is pseudo-labeled clean. The two boolean labels induce the
four-subset partition consumed by the restoration stage.

LOF follows Breunig's definitions exactly: neighborhoods include all
points tied at the k-distance, the query point is excluded from its own
neighborhood, and duplicate clusters (zero mean reachability) get their
local reachability density capped so scores stay finite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .demos import DemoSet
from .seeding import derive_seed

FILTER_VARIANTS = ("random", "ae_only", "lof_raw", "ae_lof")

SUBSET_KEYS = ("clean_pairs", "clean_state_noisy_action", "noisy_state_clean_action", "both_noisy")


class InvalidConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LofConfig:
    k: int = 50
    duplicate_lrd_cap: float = 1e12


@dataclass
class FilterConfig:
    variant: str = "ae_lof"
    tau: float = 0.5
    k: int = 50
    ae_hidden: tuple[int, ...] = (128, 64, 8, 64, 128)
    ae_epochs: int = 500
    ae_lr: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    duplicate_lrd_cap: float = 1e12

    def __post_init__(self):
        if self.variant not in FILTER_VARIANTS:
            raise InvalidConfigError(f"unknown filter variant {self.variant!r}")
        if not 0.0 < self.tau < 1.0:
            raise InvalidConfigError(f"trusted fraction tau={self.tau} outside (0, 1)")


@dataclass
class AutoencoderPair:
    phi_s: nn.MlpModel
    phi_a: nn.MlpModel
    bottleneck_layer: int
    bottleneck_dim: int


@dataclass
class FilterResult:
    state_label: np.ndarray  # bool, True = clean
    action_label: np.ndarray
    lof_state: np.ndarray
    lof_action: np.ndarray
    tau: float
    variant: str
    subsets: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def clean_pairs(self) -> np.ndarray:
        return self.subsets["clean_pairs"]


def clamp_neighbors(k: int, n: int) -> int:
    """Shrink the neighbor count for small datasets; always < n."""
    k_eff = max(5, min(k, n // 20))
    return max(1, min(k_eff, n - 1))


def train_autoencoders(demos: DemoSet, cfg: FilterConfig) -> AutoencoderPair:
    """Train state and action reconstruction AEs on all pairs."""
    if demos.n_pairs == 0:
        raise ValueError("empty demo set")
    hidden = tuple(cfg.ae_hidden)
    bottleneck_layer = len(hidden) // 2
    bottleneck_dim = hidden[bottleneck_layer]
    models = []
    for tag, data, dim in (("phi_s", demos.states, demos.d_s), ("phi_a", demos.actions, demos.d_a)):
        spec = nn.MlpSpec(input_dim=dim, hidden_dims=hidden, output_dim=dim)
        model = nn.mlp_init(spec, derive_seed(cfg.seed, f"{tag}-init"))
        nn.train_mse(
            model,
            data,
            data,
            epochs=cfg.ae_epochs,
            base_lr=cfg.ae_lr,
            batch_size=cfg.batch_size,
            seed=derive_seed(cfg.seed, f"{tag}-train"),
        )
        models.append(model)
    return AutoencoderPair(phi_s=models[0], phi_a=models[1], bottleneck_layer=bottleneck_layer, bottleneck_dim=bottleneck_dim)


def encode(ae: AutoencoderPair, demos: DemoSet) -> tuple[np.ndarray, np.ndarray]:
    """Bottleneck features (z_s, z_a) for every pair."""
    z_s = nn.mlp_bottleneck(ae.phi_s, demos.states, ae.bottleneck_layer)
    z_a = nn.mlp_bottleneck(ae.phi_a, demos.actions, ae.bottleneck_layer)
    return z_s, z_a


def reconstruction_errors(ae: AutoencoderPair, demos: DemoSet) -> tuple[np.ndarray, np.ndarray]:
    err_s = nn.mlp_forward(ae.phi_s, demos.states) - demos.states
    err_a = nn.mlp_forward(ae.phi_a, demos.actions) - demos.actions
    return (
        np.sum(err_s.astype(np.float64) ** 2, axis=1),
        np.sum(err_a.astype(np.float64) ** 2, axis=1),
    )


def _pairwise_dist(block: np.ndarray, X: np.ndarray) -> np.ndarray:
    sq = np.sum(block**2, axis=1)[:, None] + np.sum(X**2, axis=1)[None, :] - 2.0 * block @ X.T
    return np.sqrt(np.maximum(sq, 0.0))


def lof_scores(features: np.ndarray, cfg: LofConfig) -> np.ndarray:
    """Breunig LOF with exact brute-force kNN; ties at k-distance included."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidConfigError("features must be a 2-D matrix")
    n = len(X)
    k = cfg.k
    if k >= n:
        raise InvalidConfigError(f"k={k} must be smaller than the sample count {n}")
    if k < 1:
        raise InvalidConfigError("k must be positive")

    chunk = max(1, int(2e7) // max(n, 1))
    kdist = np.empty(n)
    neighbors: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        D = _pairwise_dist(X[start:stop], X)
        rows = np.arange(start, stop)
        D[rows - start, rows] = np.inf  # exclude self
        kth = np.partition(D, k - 1, axis=1)[:, k - 1]
        kdist[start:stop] = kth
        for i, row in enumerate(rows):
            mask = D[i] <= kth[i]
            neighbors[row] = np.flatnonzero(mask)

    lrd = np.empty(n)
    cap = cfg.duplicate_lrd_cap
    for p in range(n):
        nb = neighbors[p]
        d = np.linalg.norm(X[nb] - X[p], axis=1)
        reach = np.maximum(kdist[nb], d)
        mean_reach = reach.mean()
        lrd[p] = cap if mean_reach == 0.0 else min(1.0 / mean_reach, cap)

    scores = np.empty(n)
    for p in range(n):
        nb = neighbors[p]
        scores[p] = np.mean(lrd[nb]) / lrd[p]
    return scores


def rank_clean(scores: np.ndarray, tau: float) -> np.ndarray:
    """Boolean clean labels: the ceil(tau*N) lowest scores, ties by index."""
    n = len(scores)
    n_clean = math.ceil(tau * n)
    order = np.argsort(scores, kind="stable")
    labels = np.zeros(n, dtype=bool)
    labels[order[:n_clean]] = True
    return labels


def assemble_subsets(state_label: np.ndarray, action_label: np.ndarray) -> dict[str, np.ndarray]:
    idx = np.arange(len(state_label))
    return {
        "clean_pairs": idx[state_label & action_label],
        "clean_state_noisy_action": idx[state_label & ~action_label],
        "noisy_state_clean_action": idx[~state_label & action_label],
        "both_noisy": idx[~state_label & ~action_label],
    }


def partition(
    demos: DemoSet,
    scores_s: np.ndarray,
    scores_a: np.ndarray,
    tau: float,
    variant: str = "ae_lof",
) -> FilterResult:
    if len(scores_s) != demos.n_pairs or len(scores_a) != demos.n_pairs:
        raise InvalidConfigError("score length must equal the pair count")
    if not 0.0 < tau < 1.0:
        raise InvalidConfigError(f"tau={tau} outside (0, 1)")
    state_label = rank_clean(np.asarray(scores_s), tau)
    action_label = rank_clean(np.asarray(scores_a), tau)
    return FilterResult(
        state_label=state_label,
        action_label=action_label,
        lof_state=np.asarray(scores_s, dtype=np.float64),
        lof_action=np.asarray(scores_a, dtype=np.float64),
        tau=tau,
        variant=variant,
        subsets=assemble_subsets(state_label, action_label),
    )


def filter_variant(demos: DemoSet, cfg: FilterConfig, ae: AutoencoderPair | None = None) -> FilterResult:
    """Run one of the four filtering strategies on a demo set."""
    n = demos.n_pairs
    if cfg.variant == "random":
        rng = np.random.default_rng(derive_seed(cfg.seed, "random-filter"))
        state_label = rng.random(n) < cfg.tau
        action_label = rng.random(n) < cfg.tau
        zeros = np.zeros(n)
        return FilterResult(
            state_label=state_label,
            action_label=action_label,
            lof_state=zeros,
            lof_action=zeros.copy(),
            tau=cfg.tau,
            variant="random",
            subsets=assemble_subsets(state_label, action_label),
        )

    if cfg.variant == "lof_raw":
        lof_cfg = LofConfig(k=clamp_neighbors(cfg.k, n), duplicate_lrd_cap=cfg.duplicate_lrd_cap)
        scores_s = lof_scores(demos.states, lof_cfg)
        scores_a = lof_scores(demos.actions, lof_cfg)
        return partition(demos, scores_s, scores_a, cfg.tau, variant="lof_raw")

    if ae is None:
        ae = train_autoencoders(demos, cfg)

    if cfg.variant == "ae_only":
        scores_s, scores_a = reconstruction_errors(ae, demos)
        return partition(demos, scores_s, scores_a, cfg.tau, variant="ae_only")

    # ae_lof: the main pipeline
    z_s, z_a = encode(ae, demos)
    lof_cfg = LofConfig(k=clamp_neighbors(cfg.k, n), duplicate_lrd_cap=cfg.duplicate_lrd_cap)
    scores_s = lof_scores(z_s, lof_cfg)
    scores_a = lof_scores(z_a, lof_cfg)
    return partition(demos, scores_s, scores_a, cfg.tau, variant="ae_lof")


def save_filter_result(result: FilterResult, path: str | Path) -> None:
    payload = {
        "tau": result.tau,
        "variant": result.variant,
        "state_label": result.state_label.astype(bool).tolist(),
        "action_label": result.action_label.astype(bool).tolist(),
        "lof_state": [repr(float(v)) for v in result.lof_state],
        "lof_action": [repr(float(v)) for v in result.lof_action],
        "subsets": {key: result.subsets[key].tolist() for key in SUBSET_KEYS},
    }
    Path(path).write_text(json.dumps(payload))


def load_filter_result(path: str | Path) -> FilterResult:
    payload = json.loads(Path(path).read_text())
    return FilterResult(
        state_label=np.array(payload["state_label"], dtype=bool),
        action_label=np.array(payload["action_label"], dtype=bool),
        lof_state=np.array([float(v) for v in payload["lof_state"]]),
        lof_action=np.array([float(v) for v in payload["lof_action"]]),
        tau=payload["tau"],
        variant=payload["variant"],
        subsets={key: np.array(val, dtype=np.int64) for key, val in payload["subsets"].items()},
    )
