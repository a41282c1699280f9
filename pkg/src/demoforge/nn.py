"""Minimal deterministic feedforward-network engine.

Plain numpy MLPs with hand-rolled reverse-mode gradients and Adam with
linear learning-rate decay. Parameters are float32; loss reductions
accumulate in float64. All randomness flows through explicit seeds so a
fixed (spec, seed, data order) reproduces bit-identical parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = "demoforge-ckpt-1"

__all__ = [
    "MlpSpec",
    "MlpModel",
    "OptimState",
    "InvalidSpecError",
    "ShapeError",
    "EmptyBatchError",
    "TrainingError",
    "CheckpointError",
    "mlp_init",
    "mlp_forward",
    "mlp_bottleneck",
    "mlp_grad",
    "adam_init",
    "adam_step",
    "effective_lr",
    "train_mse",
    "save_checkpoint",
    "load_checkpoint",
]


class InvalidSpecError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Raised when a training loop produces a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if not self.hidden_dims:
            raise InvalidSpecError("hidden_dims must be non-empty")
        if any(int(d) <= 0 for d in dims):
            raise InvalidSpecError(f"all layer dims must be positive, got {dims}")
        if self.hidden_activation != "relu":
            raise InvalidSpecError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation != "identity":
            raise InvalidSpecError(f"unsupported output activation {self.output_activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)


@dataclass
class MlpModel:
    spec: MlpSpec
    weights: list[np.ndarray]  # weights[i] has shape (out_i, in_i)
    biases: list[np.ndarray]
    init_seed: int

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpModel":
        return MlpModel(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            init_seed=self.init_seed,
        )

    def astype(self, dtype) -> "MlpModel":
        return MlpModel(
            spec=self.spec,
            weights=[w.astype(dtype) for w in self.weights],
            biases=[b.astype(dtype) for b in self.biases],
            init_seed=self.init_seed,
        )


def mlp_init(spec: MlpSpec, seed: int) -> MlpModel:
    """Kaiming-uniform weights (bound sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    dims = spec.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(np.float32)
        weights.append(w)
        biases.append(np.zeros(fan_out, dtype=np.float32))
    return MlpModel(spec=spec, weights=weights, biases=biases, init_seed=seed)


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what} must have trailing dim {dim}, got shape {x.shape}")
    return x, single


def _forward_all(model: MlpModel, x: np.ndarray) -> list[np.ndarray]:
    """Activations per layer, input included. x is (B, input_dim)."""
    acts = [x]
    h = x
    last = model.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w.T + b
        if i != last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def mlp_forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Forward pass; accepts a single vector or a (B, input_dim) batch."""
    xb, single = _as_batch(x, model.spec.input_dim, "input")
    out = _forward_all(model, xb)[-1]
    return out[0] if single else out


def mlp_bottleneck(model: MlpModel, x: np.ndarray, layer: int) -> np.ndarray:
    """Post-activation of hidden layer `layer` (0-based), used for AE features."""
    if not 0 <= layer < model.n_layers - 1:
        raise ShapeError(f"layer {layer} is not a hidden layer of a {model.n_layers}-layer net")
    xb, single = _as_batch(x, model.spec.input_dim, "input")
    out = _forward_all(model, xb)[layer + 1]
    return out[0] if single else out


def mlp_grad(
    model: MlpModel,
    batch_inputs: np.ndarray,
    batch_targets: np.ndarray,
    loss: str = "mse",
) -> tuple[list[np.ndarray], list[np.ndarray], float]:
    """Gradient of the mean-over-batch loss w.r.t. every parameter.

    MSE is the per-sample sum of squared errors averaged over the batch,
    matching E||f(x) - y||^2.
    """
    if loss != "mse":
        raise ValueError(f"unsupported loss {loss!r}")
    x = np.asarray(batch_inputs)
    y = np.asarray(batch_targets)
    if x.ndim == 1:
        x = x[None, :]
    if y.ndim == 1:
        y = y[None, :]
    if x.shape[0] == 0:
        raise EmptyBatchError("empty batch")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"batch size mismatch: {x.shape[0]} inputs vs {y.shape[0]} targets")
    if x.shape[1] != model.spec.input_dim or y.shape[1] != model.spec.output_dim:
        raise ShapeError(f"bad batch shapes {x.shape}, {y.shape} for spec {model.spec.layer_dims}")

    batch = x.shape[0]
    acts = _forward_all(model, x)
    out = acts[-1]
    err = out - y
    loss_val = float(np.sum(err.astype(np.float64) ** 2) / batch)

    # dL/d(out), L = (1/B) sum_b ||out_b - y_b||^2
    delta = (2.0 / batch) * err
    grad_w: list[np.ndarray] = [None] * model.n_layers  # type: ignore[list-item]
    grad_b: list[np.ndarray] = [None] * model.n_layers  # type: ignore[list-item]
    for i in range(model.n_layers - 1, -1, -1):
        grad_w[i] = delta.T @ acts[i]
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * (acts[i] > 0)
    dtype = model.weights[0].dtype
    grad_w = [g.astype(dtype, copy=False) for g in grad_w]
    grad_b = [g.astype(dtype, copy=False) for g in grad_b]
    return grad_w, grad_b, loss_val


@dataclass
class OptimState:
    base_lr: float
    total_epochs: int
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moment_w: list[np.ndarray] = field(default_factory=list)
    first_moment_b: list[np.ndarray] = field(default_factory=list)
    second_moment_w: list[np.ndarray] = field(default_factory=list)
    second_moment_b: list[np.ndarray] = field(default_factory=list)


def adam_init(model: MlpModel, base_lr: float, total_epochs: int, **kw) -> OptimState:
    opt = OptimState(base_lr=base_lr, total_epochs=total_epochs, **kw)
    opt.first_moment_w = [np.zeros_like(w) for w in model.weights]
    opt.first_moment_b = [np.zeros_like(b) for b in model.biases]
    opt.second_moment_w = [np.zeros_like(w) for w in model.weights]
    opt.second_moment_b = [np.zeros_like(b) for b in model.biases]
    return opt


def effective_lr(opt: OptimState, epoch: int) -> float:
    """Linearly decayed learning rate, floored at zero."""
    frac = 1.0 - epoch / opt.total_epochs
    return opt.base_lr * max(frac, 0.0)


def adam_step(
    model: MlpModel,
    grads: tuple[list[np.ndarray], list[np.ndarray]],
    opt: OptimState,
    epoch: int,
) -> tuple[MlpModel, OptimState]:
    """One Adam update with bias correction; mutates model and opt in place."""
    grad_w, grad_b = grads
    opt.step_count += 1
    lr = effective_lr(opt, epoch)
    b1, b2, eps = opt.beta1, opt.beta2, opt.eps
    c1 = 1.0 - b1 ** opt.step_count
    c2 = 1.0 - b2 ** opt.step_count
    for params, gs, ms, vs in (
        (model.weights, grad_w, opt.first_moment_w, opt.second_moment_w),
        (model.biases, grad_b, opt.first_moment_b, opt.second_moment_b),
    ):
        for p, g, m, v in zip(params, gs, ms, vs):
            if p.shape != g.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return model, opt


def train_mse(
    model: MlpModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    *,
    epochs: int,
    base_lr: float,
    batch_size: int = 128,
    seed: int = 0,
    make_batch=None,
) -> MlpModel:
    """Shuffle-per-epoch minibatch Adam training on MSE.

    `make_batch(xb, yb, epoch, rng)`, when given, maps each raw minibatch
    to the actual (inputs, targets) pair; diffusion/predictor training use
    it to inject noise targets on the fly.
    """
    n = len(inputs)
    if n == 0:
        raise EmptyBatchError("empty training set")
    opt = adam_init(model, base_lr=base_lr, total_epochs=max(epochs, 1))
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = inputs[idx], targets[idx]
            if make_batch is not None:
                xb, yb = make_batch(xb, yb, epoch, rng)
            grad_w, grad_b, loss = mlp_grad(model, xb, yb)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            adam_step(model, (grad_w, grad_b), opt, epoch)
    return model


def save_checkpoint(model: MlpModel, directory: str | Path, role: str) -> None:
    """Write manifest.json + params.bin (little-endian f32, row-major)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    blobs = []
    for i in range(model.n_layers):
        for name, arr in ((f"w{i}", model.weights[i]), (f"b{i}", model.biases[i])):
            raw = arr.astype("<f4").tobytes(order="C")
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += len(raw)
            blobs.append(raw)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "role": role,
        "spec": {
            "input_dim": model.spec.input_dim,
            "hidden_dims": list(model.spec.hidden_dims),
            "output_dim": model.spec.output_dim,
            "hidden_activation": model.spec.hidden_activation,
            "output_activation": model.spec.output_activation,
        },
        "init_seed": model.init_seed,
        "tensors": tensors,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    (directory / "params.bin").write_bytes(b"".join(blobs))


def load_checkpoint(directory: str | Path) -> tuple[MlpModel, str]:
    """Load a checkpoint directory; returns (model, role)."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unknown checkpoint format version {version!r}")
    spec = MlpSpec(
        input_dim=manifest["spec"]["input_dim"],
        hidden_dims=tuple(manifest["spec"]["hidden_dims"]),
        output_dim=manifest["spec"]["output_dim"],
        hidden_activation=manifest["spec"]["hidden_activation"],
        output_activation=manifest["spec"]["output_activation"],
    )
    raw = (directory / "params.bin").read_bytes()
    arrays = {}
    for t in manifest["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape))
        start = t["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape)
        arrays[t["name"]] = arr.astype(np.float32)
    n_layers = len(spec.layer_dims) - 1
    model = MlpModel(
        spec=spec,
        weights=[arrays[f"w{i}"] for i in range(n_layers)],
        biases=[arrays[f"b{i}"] for i in range(n_layers)],
        init_seed=manifest.get("init_seed", 0),
    )
    return model, manifest["role"]
