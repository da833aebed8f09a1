"""RL on adapted observations: weak augmentation, frame stacking, de-noising,
the training loop and the evaluation protocol.

Per environment step the observation pipeline is

    raw frame -> [moving-average de-noising] -> adapter -> [weak augmentation] -> stack

where de-noising is an optional evaluation-time wrapper and weak augmentation
runs only while training.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from vai.augment import multicolorout
from vai.obs_data import to_uint8
from vai.sac import SacAgent, SacConfig, sac_update

logger = logging.getLogger(__name__)

Transform = Callable[[np.ndarray], np.ndarray]


# ----------------------------------------------------------------------------
# observation transforms

def weak_augment(frame: np.ndarray, rng: np.random.Generator, noise_std: float = 0.01,
                 n_boxes: tuple[int, int] = (0, 1), box_size: tuple[int, int] = (2, 8)) -> np.ndarray:
    """Light Gaussian pixel noise plus a few small colour boxes."""
    out = np.asarray(frame, dtype=np.float32)
    if noise_std > 0:
        out = out + rng.normal(0.0, noise_std, size=out.shape).astype(np.float32)
    if n_boxes[1] > 0:
        out = multicolorout(out, rng, n_boxes, box_size)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class DenoiseState:
    running_average: np.ndarray
    alpha: float = 0.5
    beta: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


def denoise_moving_average(frame: np.ndarray, state: DenoiseState) -> tuple[np.ndarray, DenoiseState]:
    """Subtract the alpha-scaled running average, add back its scaled mean colour.

    ``alpha = 0`` leaves the frame untouched. The running average is then
    moved toward the current frame with rate ``beta``.
    """
    avg = state.running_average
    mean_color = avg.mean(axis=(0, 1), keepdims=True)
    out = np.clip(frame - state.alpha * (avg - mean_color), 0.0, 1.0).astype(np.float32)
    new_avg = (1.0 - state.beta) * avg + state.beta * np.asarray(frame, dtype=np.float32)
    return out, DenoiseState(new_avg.astype(np.float32), state.alpha, state.beta)


class FrameStack:
    """Sliding window over the last ``k`` frames, padded by repetition."""

    def __init__(self, k: int = 3):
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        self.k = k
        self.frames: deque = deque(maxlen=k)

    def reset(self, frame: np.ndarray) -> np.ndarray:
        self.frames.clear()
        for _ in range(self.k):
            self.frames.append(frame)
        return self.observation()

    def push(self, frame: np.ndarray) -> np.ndarray:
        if not self.frames:
            return self.reset(frame)
        self.frames.append(frame)
        return self.observation()

    def observation(self) -> np.ndarray:
        return np.concatenate(list(self.frames), axis=-1)


def stack(history: list[np.ndarray], frame: np.ndarray, k: int = 3) -> tuple[list[np.ndarray], np.ndarray]:
    """Functional form of ``FrameStack``: returns (new history, stacked frame)."""
    history = (list(history) or [frame] * (k - 1))[-(k - 1):] if k > 1 else []
    window = history + [frame]
    while len(window) < k:
        window.insert(0, window[0])
    return window[1:] if k > 1 else [], np.concatenate(window, axis=-1)


class ObservationPipeline:
    """raw -> [denoise] -> adapt -> [augment, training only] -> stack."""

    def __init__(self, adapt: Transform | None = None, augment: Callable | None = None, k: int = 3,
                 denoise_alpha: float | None = None, denoise_beta: float = 0.05, seed: int = 0):
        self.adapt = adapt or (lambda f: f)
        self.augment = augment
        self.stacker = FrameStack(k)
        self.denoise_alpha = denoise_alpha
        self.denoise_beta = denoise_beta
        self.rng = np.random.default_rng(seed)
        self.augment_calls = 0
        self._denoise: DenoiseState | None = None

    def _process(self, frame: np.ndarray, training: bool) -> np.ndarray:
        if self.denoise_alpha is not None:
            if self._denoise is None:
                self._denoise = DenoiseState(np.asarray(frame, np.float32), self.denoise_alpha, self.denoise_beta)
            frame, self._denoise = denoise_moving_average(frame, self._denoise)
        frame = self.adapt(frame)
        if training and self.augment is not None:
            self.augment_calls += 1
            frame = self.augment(frame, self.rng)
        return to_uint8(np.asarray(frame))

    def reset(self, frame: np.ndarray, training: bool) -> np.ndarray:
        self._denoise = None
        return self.stacker.reset(self._process(frame, training))

    def step(self, frame: np.ndarray, training: bool) -> np.ndarray:
        return self.stacker.push(self._process(frame, training))


def adapter_transform(adapter) -> Transform:
    if adapter is None:
        return lambda f: f
    from vai.invariance import adapt_observation
    return lambda f: adapt_observation(adapter, f)


# ----------------------------------------------------------------------------
# replay + training

class ReplayBuffer:
    def __init__(self, obs_shape, action_dim: int, capacity: int):
        self.obs = np.zeros((capacity, *obs_shape), np.uint8)
        self.next_obs = np.zeros((capacity, *obs_shape), np.uint8)
        self.action = np.zeros((capacity, action_dim), np.float32)
        self.reward = np.zeros(capacity, np.float32)
        self.done = np.zeros(capacity, np.float32)
        self.capacity = capacity
        self.size = 0
        self.pos = 0

    def add(self, obs, action, reward, next_obs, done):
        i = self.pos
        self.obs[i], self.action[i], self.reward[i], self.next_obs[i], self.done[i] = obs, action, reward, next_obs, done
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=batch_size)
        return self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx], self.done[idx]


@dataclass
class PolicyConfig:
    steps: int = 10000
    seed_steps: int = 1000
    action_repeat: int = 4
    frame_stack: int = 3
    weak_noise_std: float = 0.01
    weak_boxes: tuple[int, int] = (0, 1)
    weak_box_size: tuple[int, int] = (2, 8)
    weak_augment: bool = True
    use_adapter: bool = True
    replay_capacity: int = 100000
    log_every: int = 1000
    sac: SacConfig = field(default_factory=SacConfig)


def env_step_repeat(env, action, repeat: int):
    """Repeat ``action``; returns (frame, summed reward, done)."""
    total = 0.0
    frame, done = None, False
    for _ in range(repeat):
        _, frame, reward, done = env.step(action)
        total += reward
        if done:
            break
    return frame, total, done


def make_pipeline(adapter, cfg: PolicyConfig, seed: int, denoise_alpha: float | None = None,
                  adapt: Transform | None = None, augment: Callable | None = None) -> ObservationPipeline:
    if augment is None and cfg.weak_augment:
        def augment(f, rng):
            return weak_augment(f, rng, cfg.weak_noise_std, cfg.weak_boxes, cfg.weak_box_size)
    return ObservationPipeline(adapt or adapter_transform(adapter), augment, cfg.frame_stack,
                               denoise_alpha=denoise_alpha, seed=seed)


def train_policy(env, adapter, cfg: PolicyConfig, seed: int = 0, pipeline: ObservationPipeline | None = None,
                 record: Callable[[dict], None] | None = None) -> SacAgent:
    """Train SAC on adapted, weakly augmented, stacked observations.

    ``adapter=None`` runs the ablation without foreground extraction. The
    returned agent carries ``reward_log``: one cumulative reward per episode.
    """
    pipeline = pipeline or make_pipeline(adapter, cfg, seed)
    rng = np.random.default_rng(seed)
    h, w, c = env.frame_shape
    obs_shape = (h, w, c * cfg.frame_stack)
    agent = SacAgent(obs_shape, env.config.action_dim, cfg.sac, seed=seed)
    agent.reward_log = []
    buffer = ReplayBuffer(obs_shape, env.config.action_dim, min(cfg.replay_capacity, cfg.steps))
    episode = 0
    _, frame = env.reset(seed=int(rng.integers(2**31)))
    obs = pipeline.reset(frame, training=True)
    ep_reward = 0.0
    for step in range(cfg.steps):
        if step < cfg.seed_steps:
            action = rng.uniform(-1.0, 1.0, size=env.config.action_dim)
        else:
            action = agent.act(obs, deterministic=False)
        frame, reward, done = env_step_repeat(env, action, cfg.action_repeat)
        next_obs = pipeline.step(frame, training=True)
        # episodes end on the time limit only, so the bootstrap is kept
        buffer.add(obs, action, reward, next_obs, 0.0)
        obs = next_obs
        ep_reward += reward
        if step >= cfg.seed_steps:
            metrics = sac_update(agent, buffer.sample(cfg.sac.batch_size, rng))
            if record and cfg.log_every and step % cfg.log_every == 0:
                record({"step": step, **metrics})
        if done:
            agent.reward_log.append(ep_reward)
            if record:
                record({"step": step, "episode": episode, "episode_reward": ep_reward})
            episode += 1
            ep_reward = 0.0
            _, frame = env.reset(seed=int(rng.integers(2**31)))
            obs = pipeline.reset(frame, training=True)
    return agent


# ----------------------------------------------------------------------------
# evaluation

class RandomAgent:
    def __init__(self, action_dim: int, seed: int = 0):
        self.action_dim = action_dim
        self.rng = np.random.default_rng(seed)

    def act(self, obs, deterministic: bool = True):
        return self.rng.uniform(-1.0, 1.0, size=self.action_dim)


def episode_seed(seed: int, episode: int) -> int:
    return (int(seed) * 1_000_003 + int(episode)) % (2**31)


def run_episode(env, agent, pipeline: ObservationPipeline, init_seed: int, action_repeat: int):
    _, frame = env.reset(seed=init_seed)
    obs = pipeline.reset(frame, training=False)
    total, done = 0.0, False
    while not done:
        action = agent.act(obs, deterministic=True)
        frame, reward, done = env_step_repeat(env, action, action_repeat)
        obs = pipeline.step(frame, training=False)
        total += reward
    success = bool(env.is_success()) if hasattr(env, "is_success") else None
    return total, success


def aggregate_rewards(rewards_by_seed: dict[int, list[float]]) -> dict:
    """Per-seed mean/std, then mean and std across the per-seed means."""
    seeds = sorted(rewards_by_seed)
    per_seed_mean = [float(np.mean(rewards_by_seed[s])) for s in seeds]
    per_seed_std = [float(np.std(rewards_by_seed[s])) for s in seeds]
    return {
        "seeds": seeds,
        "per_seed_mean": per_seed_mean,
        "per_seed_std": per_seed_std,
        "mean": float(np.mean(per_seed_mean)),
        "std": float(np.std(per_seed_mean)),
        "episodes": int(sum(len(rewards_by_seed[s]) for s in seeds)),
    }


def evaluate_policy(env, agent, adapter, episodes: int, seeds: list[int], denoise: float | None = None,
                    action_repeat: int = 4, frame_stack: int = 3, adapt: Transform | None = None) -> dict:
    """Deterministic evaluation: no exploration noise, no weak augmentation."""
    rewards: dict[int, list[float]] = {}
    successes = []
    pipelines = []
    for s in seeds:
        pipeline = ObservationPipeline(adapt or adapter_transform(adapter), None, frame_stack,
                                       denoise_alpha=denoise, seed=s)
        pipelines.append(pipeline)
        rewards[s] = []
        for e in range(episodes):
            total, success = run_episode(env, agent, pipeline, episode_seed(s, e), action_repeat)
            rewards[s].append(total)
            if success is not None:
                successes.append(success)
    assert all(p.augment_calls == 0 for p in pipelines)
    out = aggregate_rewards(rewards)
    out["rewards"] = {str(s): rewards[s] for s in seeds}
    if successes:
        out["success_rate"] = float(np.mean(successes))
    return out


def format_summary(rows: dict[str, dict]) -> str:
    """Plain-text table of mean +/- std per row label."""
    width = max([len(k) for k in rows] + [7])
    lines = [f"{'texture':<{width}}  reward (mean +/- std over seeds)  success"]
    for name, m in rows.items():
        succ = f"{m['success_rate']:.2f}" if "success_rate" in m else "-"
        lines.append(f"{name:<{width}}  {m['mean']:10.2f} +/- {m['std']:<8.2f}             {succ}")
    return "\n".join(lines)


class RecordWriter:
    """Append-only JSON-lines metrics file."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self._fh.close()
