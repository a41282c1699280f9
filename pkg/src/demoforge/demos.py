"""Demonstration data model, toy environments, and noise injection.

Two deterministic toy control tasks with scripted analytic experts stand
in for physics-simulated environments:

* ``point_reach`` -- a 2-D agent drives toward a goal; state is
  (agent_xy, goal_xy), action is a velocity command clipped to [-1, 1],
  success means ending within a small radius of the goal.
* ``line_tracker`` -- a 1-D cart tracks a piecewise-constant target
  velocity that is re-drawn every few steps; state is (scaled position,
  velocity, target velocity), action is an acceleration in [-1, 1],
  return rewards matching the target speed with a small quadratic
  control cost.

Noise injection corrupts whole state or action vectors independently
with probability p, adding i.i.d. per-element noise from one of seven
families. Ground-truth copies and corruption masks stay attached for
evaluation only.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import derive_seed

DEMO_FORMAT_VERSION = "demoforge-demo-1"

NOISE_FAMILIES = (
    "gaussian",
    "laplacian",
    "uniform",
    "gaussian_biased",
    "uniform_biased",
    "mix_gauss_uniform",
    "mix_gauss_gauss",
)

DEFAULT_SIGMA = 1.0 / 6.0
DEFAULT_BIAS = 0.4


class InvalidNoiseSpecError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    family: str = "gaussian"
    p: float = 0.2
    sigma: float = DEFAULT_SIGMA
    bias: float = DEFAULT_BIAS
    seed: int = 0

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise InvalidNoiseSpecError(f"unknown noise family {self.family!r}")
        if not 0.0 <= self.p <= 1.0:
            raise InvalidNoiseSpecError(f"noise probability p={self.p} outside [0, 1]")
        if self.sigma <= 0:
            raise InvalidNoiseSpecError(f"sigma must be positive, got {self.sigma}")

    def to_dict(self) -> dict:
        return {"family": self.family, "p": self.p, "sigma": self.sigma, "bias": self.bias, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(**d)


@dataclass
class Trajectory:
    states: np.ndarray  # (L, d_s)
    actions: np.ndarray  # (L, d_a)

    def __post_init__(self):
        if len(self.states) != len(self.actions) or len(self.states) < 1:
            raise ValueError("states and actions must have equal positive length")


@dataclass
class DemoSet:
    """Flat (state, action) pairs plus trajectory boundaries.

    ``clean_states``/``clean_actions`` hold hidden ground truth and
    ``state_mask``/``action_mask`` flag corrupted pairs (True = noisy);
    both are evaluation-only and never visible to the pipeline proper.
    """

    states: np.ndarray  # (N, d_s) float32
    actions: np.ndarray  # (N, d_a) float32
    traj_lengths: np.ndarray  # (n_traj,) int
    clean_states: np.ndarray | None = None
    clean_actions: np.ndarray | None = None
    state_mask: np.ndarray | None = None
    action_mask: np.ndarray | None = None
    env_kind: str = ""
    noise: NoiseSpec | None = None

    def __post_init__(self):
        if len(self.states) != len(self.actions):
            raise ValueError("state/action count mismatch")
        if int(np.sum(self.traj_lengths)) != len(self.states):
            raise ValueError("traj_lengths do not sum to the pair count")

    @property
    def n_pairs(self) -> int:
        return len(self.states)

    @property
    def d_s(self) -> int:
        return self.states.shape[1]

    @property
    def d_a(self) -> int:
        return self.actions.shape[1]

    def trajectories(self):
        offset = 0
        for length in self.traj_lengths:
            yield Trajectory(self.states[offset : offset + length], self.actions[offset : offset + length])
            offset += int(length)

    def pair_location(self, index: int) -> tuple[int, int]:
        """Map a flat pair index to (trajectory, step)."""
        offsets = np.cumsum(self.traj_lengths)
        traj = int(np.searchsorted(offsets, index, side="right"))
        prev = 0 if traj == 0 else int(offsets[traj - 1])
        return traj, index - prev


@dataclass(frozen=True)
class ToyEnv:
    kind: str  # point_reach | line_tracker
    d_s: int
    d_a: int
    horizon: int
    dt: float = 0.1
    success_radius: float = 0.05
    gain: float = 1.0
    control_cost: float = 0.01
    pos_scale: float = 20.0  # line_tracker position normalizer
    retarget_every: int = 0  # line_tracker target re-draw period (0 = fixed target)


def make_env(kind: str) -> ToyEnv:
    if kind == "point_reach":
        # feedback gain 3: the equilibrium position offset of a cloned
        # policy is (its action error / gain), so a stiffer expert keeps
        # the task solvable for imperfect policies while the tight
        # success radius still separates good datasets from corrupted ones
        return ToyEnv(kind="point_reach", d_s=4, d_a=2, horizon=50, gain=3.0)
    if kind == "line_tracker":
        # the target speed is re-drawn every 10 steps: with a fixed
        # target the velocity settles within ~10 steps and the rest of
        # the episode is one near-duplicate steady-state pair, which
        # starves the dataset of the transient behavior that actually
        # distinguishes policies
        # gain 1.2 keeps every clean action inside a compact [-0.3, 0.3]
        # band: the band is uniformly well-populated, so a density-based
        # outlier ranker has no thin tail of rare-but-correct actions to
        # amputate, while typical corruptions stick out past the band
        # edges; the low gain also amplifies the cost of any learned
        # action bias (steady-state tracking offset scales as 1/gain),
        # so dataset quality differences show up clearly in the return
        return ToyEnv(kind="line_tracker", d_s=3, d_a=1, horizon=200, gain=1.2, retarget_every=10)
    raise ValueError(f"unknown env kind {kind!r}")


def env_reset(env: ToyEnv, rng: np.random.Generator) -> np.ndarray:
    if env.kind == "point_reach":
        while True:
            agent = rng.uniform(-1, 1, size=2)
            goal = rng.uniform(-1, 1, size=2)
            if np.linalg.norm(goal - agent) >= 0.2:
                break
        return np.concatenate([agent, goal]).astype(np.float32)
    # line_tracker: start at the origin; the velocity starts near the
    # target so rollouts stay on the support of the expert data and
    # policy comparisons measure tracking quality, not how a regressor
    # happens to extrapolate below the band
    target = rng.uniform(0.55, 1.5)
    vel = float(np.clip(target + rng.uniform(-0.2, 0.2), 0.0, 2.0))
    return np.array([0.0, vel, target], dtype=np.float32)


def maybe_retarget(env: ToyEnv, state: np.ndarray, step: int, rng: np.random.Generator) -> np.ndarray:
    """Apply the exogenous target-speed schedule at the given step.

    Jump sizes are drawn from a continuous range small enough that the
    expert's response stays inside the [-1, 1] acceleration clip. In
    that linear regime tracking speed is proportional to a policy's
    feedback gain, so a policy whose gain was washed out by corrupted
    training data scores visibly worse instead of hiding behind the
    actuator limit. A continuous size range also keeps the recorded
    action distribution continuous; a single fixed size would put every
    post-jump decay level on an isolated point mass, which a
    density-based outlier ranker mis-scores whenever the mass holds
    fewer points than its neighborhood size.

    Jump signs alternate instead of random-walking. With random signs,
    two same-signed jumps in a row open a tracking gap larger than any
    gap in the demonstrations, and policy quality in that unsupported
    strip is decided by regressor extrapolation rather than by the data
    being compared. Alternation caps the rollout-time gap at one jump
    plus the policy's own residual lag, which stays next to the
    well-populated single-jump transient.
    """
    if env.retarget_every <= 0 or step == 0 or step % env.retarget_every != 0:
        return state
    state = state.copy()
    segment = step // env.retarget_every
    sign = -1.0 if segment % 2 == 1 else 1.0
    state[2] = float(np.clip(state[2] + sign * rng.uniform(0.15, 0.25), 0.3, 1.5))
    return state


def env_step(env: ToyEnv, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float]:
    """Deterministic transition; returns (next_state, reward)."""
    action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    if env.kind == "point_reach":
        agent = state[:2] + env.dt * action
        nxt = np.concatenate([agent, state[2:]]).astype(np.float32)
        return nxt, 0.0
    pos, vel, target = float(state[0]) * env.pos_scale, float(state[1]), float(state[2])
    a = float(action[0])
    vel = float(np.clip(vel + env.dt * a, -2.0, 2.0))
    pos += env.dt * vel
    # progress credit peaks when velocity matches the target
    reward = env.dt * (target - abs(vel - target)) - env.control_cost * a * a
    nxt = np.array([pos / env.pos_scale, vel, target], dtype=np.float32)
    return nxt, reward


def expert_action(env: ToyEnv, state: np.ndarray) -> np.ndarray:
    """Scripted analytic expert: clipped proportional feedback."""
    if env.kind == "point_reach":
        raw = env.gain * (state[2:4] - state[:2])
    else:
        raw = env.gain * (state[2] - state[1:2])
    return np.clip(raw, -1.0, 1.0).astype(np.float32)


def episode_success(env: ToyEnv, final_state: np.ndarray) -> bool:
    if env.kind != "point_reach":
        raise ValueError("success is defined for point_reach only")
    return float(np.linalg.norm(final_state[2:4] - final_state[:2])) <= env.success_radius


def gen_expert_demos(env: ToyEnv, n_pairs: int, seed: int) -> DemoSet:
    """Roll out the scripted expert until at least n_pairs pairs exist.

    point_reach episodes terminate a few steps after reaching the goal;
    recording the full horizon would flood the dataset with near-exact
    duplicates of the stationary hover pair and starve it of the
    approach behavior a cloned policy actually needs.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    hover_steps = 3
    rng = np.random.default_rng(seed)
    states, actions, lengths = [], [], []
    total = 0
    while total < n_pairs:
        s = env_reset(env, rng)
        ep_states, ep_actions = [], []
        reached = False
        for step in range(env.horizon):
            s = maybe_retarget(env, s, step, rng)
            a = expert_action(env, s)
            ep_states.append(s)
            ep_actions.append(a)
            s, _ = env_step(env, s, a)
            if env.kind == "point_reach" and episode_success(env, s):
                reached = True
                for _ in range(hover_steps):
                    a = expert_action(env, s)
                    ep_states.append(s)
                    ep_actions.append(a)
                    s, _ = env_step(env, s, a)
                break
        if env.kind == "point_reach" and not reached:
            raise GenerationError("scripted expert failed to reach the goal")
        if not np.all(np.isfinite(s)):
            raise GenerationError("expert rollout diverged")
        states.extend(ep_states)
        actions.extend(ep_actions)
        lengths.append(len(ep_states))
        total += len(ep_states)
    st = np.array(states, dtype=np.float32)
    ac = np.array(actions, dtype=np.float32)
    return DemoSet(
        states=st,
        actions=ac,
        traj_lengths=np.array(lengths, dtype=np.int64),
        clean_states=st.copy(),
        clean_actions=ac.copy(),
        state_mask=np.zeros(len(st), dtype=bool),
        action_mask=np.zeros(len(st), dtype=bool),
        env_kind=env.kind,
    )


def sample_noise(
    family: str,
    shape: tuple[int, ...],
    sigma: float,
    bias: float,
    rng: np.random.Generator,
    return_components: bool = False,
):
    """Draw i.i.d. per-element noise of the given family.

    Unbiased families are calibrated to standard deviation sigma; the
    uniform range is sigma*sqrt(3) so variances match across families.
    """
    half_width = sigma * np.sqrt(3.0)
    if family == "gaussian":
        noise = rng.normal(0.0, sigma, size=shape)
    elif family == "laplacian":
        noise = rng.laplace(0.0, sigma / np.sqrt(2.0), size=shape)
    elif family == "uniform":
        noise = rng.uniform(-half_width, half_width, size=shape)
    elif family == "gaussian_biased":
        noise = bias + rng.normal(0.0, sigma, size=shape)
    elif family == "uniform_biased":
        noise = bias + rng.uniform(-half_width, half_width, size=shape)
    elif family == "mix_gauss_uniform":
        pick_gauss = rng.random(size=shape) < 0.5
        gauss = rng.normal(0.0, sigma, size=shape)
        unif = rng.uniform(-half_width, half_width, size=shape)
        noise = np.where(pick_gauss, gauss, unif)
        if return_components:
            return noise, pick_gauss
    elif family == "mix_gauss_gauss":
        # bimodal: peaks at +/-bias, each component std sigma
        pick_pos = rng.random(size=shape) < 0.5
        centers = np.where(pick_pos, bias, -bias)
        noise = centers + rng.normal(0.0, sigma, size=shape)
        if return_components:
            return noise, pick_pos
    else:
        raise InvalidNoiseSpecError(f"unknown noise family {family!r}")
    if return_components:
        return noise, None
    return noise


def corrupt(demos: DemoSet, spec: NoiseSpec) -> DemoSet:
    """Corrupt each state/action vector independently with probability p."""
    if demos.clean_states is None or demos.clean_actions is None:
        raise ValueError("corrupt() needs a demo set with ground truth")
    n = demos.n_pairs
    rng_mask = np.random.default_rng(derive_seed(spec.seed, "corrupt-mask"))
    rng_noise = np.random.default_rng(derive_seed(spec.seed, "corrupt-noise"))
    state_mask = rng_mask.random(n) < spec.p
    action_mask = rng_mask.random(n) < spec.p
    states = demos.clean_states.copy()
    actions = demos.clean_actions.copy()
    if state_mask.any():
        noise = sample_noise(spec.family, (int(state_mask.sum()), demos.d_s), spec.sigma, spec.bias, rng_noise)
        states[state_mask] += noise.astype(np.float32)
    if action_mask.any():
        noise = sample_noise(spec.family, (int(action_mask.sum()), demos.d_a), spec.sigma, spec.bias, rng_noise)
        actions[action_mask] += noise.astype(np.float32)
    return DemoSet(
        states=states,
        actions=actions,
        traj_lengths=demos.traj_lengths.copy(),
        clean_states=demos.clean_states.copy(),
        clean_actions=demos.clean_actions.copy(),
        state_mask=state_mask,
        action_mask=action_mask,
        env_kind=demos.env_kind,
        noise=spec,
    )


@dataclass
class RolloutSummary:
    metric_name: str  # success_rate | mean_return
    per_episode: np.ndarray
    mean: float
    std: float


def env_rollout(env: ToyEnv, policy, episodes: int, seed: int) -> RolloutSummary:
    """Evaluate a state->action policy; deterministic given seed.

    Episodes with a NaN action are aborted and scored as failure / zero
    return. Reduction order is fixed by episode index.
    """
    scores = np.zeros(episodes, dtype=np.float64)
    for ep in range(episodes):
        rng = np.random.default_rng(derive_seed(seed, f"episode-{ep}"))
        s = env_reset(env, rng)
        ret = 0.0
        aborted = False
        for step in range(env.horizon):
            s = maybe_retarget(env, s, step, rng)
            a = np.asarray(policy(s), dtype=np.float64)
            if not np.all(np.isfinite(a)):
                aborted = True
                break
            s, r = env_step(env, s, a)
            ret += r
        if env.kind == "point_reach":
            scores[ep] = 0.0 if aborted else float(episode_success(env, s))
        else:
            scores[ep] = 0.0 if aborted else ret
    name = "success_rate" if env.kind == "point_reach" else "mean_return"
    return RolloutSummary(metric_name=name, per_episode=scores, mean=float(scores.mean()), std=float(scores.std()))


def save_demos(demos: DemoSet, path: str | Path) -> None:
    """Write a demo archive: meta.json + raw little-endian blocks."""
    path = Path(path)
    meta = {
        "format_version": DEMO_FORMAT_VERSION,
        "env_kind": demos.env_kind,
        "d_s": demos.d_s,
        "d_a": demos.d_a,
        "n_pairs": demos.n_pairs,
        "n_trajectories": int(len(demos.traj_lengths)),
        "noise": demos.noise.to_dict() if demos.noise else None,
        "has_ground_truth": demos.clean_states is not None,
        "has_masks": demos.state_mask is not None,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2))
        zf.writestr("traj_lengths.u32", demos.traj_lengths.astype("<u4").tobytes())
        zf.writestr("states.f32", demos.states.astype("<f4").tobytes())
        zf.writestr("actions.f32", demos.actions.astype("<f4").tobytes())
        if demos.clean_states is not None:
            zf.writestr("clean_states.f32", demos.clean_states.astype("<f4").tobytes())
            zf.writestr("clean_actions.f32", demos.clean_actions.astype("<f4").tobytes())
        if demos.state_mask is not None:
            zf.writestr("state_mask.u8", demos.state_mask.astype(np.uint8).tobytes())
            zf.writestr("action_mask.u8", demos.action_mask.astype(np.uint8).tobytes())


def load_demos(path: str | Path) -> DemoSet:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != DEMO_FORMAT_VERSION:
            raise ValueError(f"unknown demo format version {meta.get('format_version')!r}")
        n, d_s, d_a = meta["n_pairs"], meta["d_s"], meta["d_a"]

        def block(name, dtype, shape):
            return np.frombuffer(zf.read(name), dtype=dtype).reshape(shape).copy()

        traj_lengths = block("traj_lengths.u32", "<u4", (meta["n_trajectories"],)).astype(np.int64)
        states = block("states.f32", "<f4", (n, d_s)).astype(np.float32)
        actions = block("actions.f32", "<f4", (n, d_a)).astype(np.float32)
        clean_states = clean_actions = state_mask = action_mask = None
        if meta["has_ground_truth"]:
            clean_states = block("clean_states.f32", "<f4", (n, d_s)).astype(np.float32)
            clean_actions = block("clean_actions.f32", "<f4", (n, d_a)).astype(np.float32)
        if meta["has_masks"]:
            state_mask = block("state_mask.u8", np.uint8, (n,)).astype(bool)
            action_mask = block("action_mask.u8", np.uint8, (n,)).astype(bool)
    noise = NoiseSpec.from_dict(meta["noise"]) if meta.get("noise") else None
    return DemoSet(
        states=states,
        actions=actions,
        traj_lengths=traj_lengths,
        clean_states=clean_states,
        clean_actions=clean_actions,
        state_mask=state_mask,
        action_mask=action_mask,
        env_kind=meta["env_kind"],
        noise=noise,
    )
