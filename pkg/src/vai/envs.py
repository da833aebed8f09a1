"""SpriteWorld: a small 2-D reaching task with exact foreground masks.

An articulated sprite (a head dragging two tail segments) moves in the unit
square and has to reach a target disk. Rendering is plain compositing without
anti-aliasing, so the ground-truth foreground mask is exact. The background
texture only affects pixels, never the dynamics or rewards.

The DrawerWorld reward and success functions live here too as pure math.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vai.textures import TRAIN_TEXTURE, make_texture


@dataclass
class SpriteWorldConfig:
    height: int = 84
    width: int = 84
    episode_length: int = 100
    action_dim: int = 2
    accel: float = 0.02
    damping: float = 0.7
    head_radius: float = 0.095
    segment_length: float = 0.16
    segment_width: float = 0.09
    target_radius: float = 0.085
    target_distance: float = 0.3
    margin: float = 0.08
    draw_sprite: bool = True
    draw_target: bool = True


@dataclass
class SpriteWorldState:
    head: np.ndarray            # (2,) position in [0, 1]^2
    velocity: np.ndarray        # (2,)
    joint_angles: np.ndarray    # (2,) absolute tail segment angles
    joint_velocities: np.ndarray
    target: np.ndarray          # (2,)
    texture_id: str
    step: int = 0

    def copy(self) -> "SpriteWorldState":
        return dataclasses.replace(
            self,
            head=self.head.copy(),
            velocity=self.velocity.copy(),
            joint_angles=self.joint_angles.copy(),
            joint_velocities=self.joint_velocities.copy(),
            target=self.target.copy(),
        )


HEAD_COLOR = np.array([242, 51, 51], np.uint8)
SEG1_COLOR = np.array([255, 153, 26], np.uint8)
SEG2_COLOR = np.array([255, 217, 51], np.uint8)
TARGET_COLOR = np.array([51, 230, 77], np.uint8)


def _wrap(angle):
    return (angle + np.pi) % (2 * np.pi) - np.pi


class SpriteWorld:
    """Gym-style environment: ``reset(seed)`` and ``step(action)``."""

    env_id = "spriteworld-reach"

    def __init__(self, config: SpriteWorldConfig | None = None, texture: str | Path | np.ndarray = TRAIN_TEXTURE,
                 texture_seed: int = 0):
        self.config = config or SpriteWorldConfig()
        c = self.config
        ys, xs = np.mgrid[0:c.height, 0:c.width]
        # pixel centers in normalized coordinates
        self._px = (xs + 0.5) / c.width
        self._py = (ys + 0.5) / c.height
        self.state: SpriteWorldState | None = None
        self.clamped_actions = 0
        self.last_render_stats: dict[str, int] = {}
        self.texture_seed = texture_seed
        self.set_texture(texture)

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.config.height, self.config.width, 3)

    def set_texture(self, texture: str | Path | np.ndarray, seed: int | None = None) -> None:
        seed = self.texture_seed if seed is None else seed
        self.texture = make_texture(texture, (self.config.height, self.config.width), seed)
        self.texture_id = "array" if isinstance(texture, np.ndarray) else str(texture)
        if self.state is not None:
            self.state.texture_id = self.texture_id

    def reset(self, seed: int | None = None) -> tuple[SpriteWorldState, np.ndarray]:
        rng = np.random.default_rng(seed)
        angle = rng.uniform(-np.pi, np.pi)
        tail = rng.uniform(-np.pi, np.pi)
        c = self.config
        self.state = SpriteWorldState(
            head=np.array([0.5, 0.5]),
            velocity=np.zeros(2),
            joint_angles=np.array([tail, tail]),
            joint_velocities=np.zeros(2),
            target=0.5 + c.target_distance * np.array([math.cos(angle), math.sin(angle)]),
            texture_id=self.texture_id,
        )
        return self.state, self.render(self.state)

    def step(self, action) -> tuple[SpriteWorldState, np.ndarray, float, bool]:
        if self.state is None:
            raise RuntimeError("step() called before reset()")
        self.state = transition(self.state, self._clamp(action), self.config)
        reward = sprite_reward(self.state)
        done = self.state.step >= self.config.episode_length
        return self.state, self.render(self.state), reward, done

    def is_success(self, state: SpriteWorldState | None = None) -> bool:
        state = self.state if state is None else state
        return -sprite_reward(state) < self.config.target_radius

    def _clamp(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64).reshape(self.config.action_dim)
        if np.any(np.abs(a) > 1.0):
            self.clamped_actions += 1
            a = np.clip(a, -1.0, 1.0)
        return a

    def _layers(self, state: SpriteWorldState):
        c = self.config
        layers = []
        if c.draw_target:
            layers.append((self._disk(state.target, c.target_radius), TARGET_COLOR))
        if c.draw_sprite:
            a1, a2 = state.joint_angles
            j1 = state.head + c.segment_length * np.array([math.cos(a1), math.sin(a1)])
            j2 = j1 + c.segment_length * np.array([math.cos(a2), math.sin(a2)])
            layers.append((self._capsule(j1, j2, c.segment_width / 2), SEG2_COLOR))
            layers.append((self._capsule(state.head, j1, c.segment_width / 2), SEG1_COLOR))
            layers.append((self._disk(state.head, c.head_radius), HEAD_COLOR))
        return layers

    def _disk(self, center, radius):
        return (self._px - center[0]) ** 2 + (self._py - center[1]) ** 2 <= radius ** 2

    def _capsule(self, a, b, radius):
        d = b - a
        denom = float(d @ d) or 1.0
        t = np.clip(((self._px - a[0]) * d[0] + (self._py - a[1]) * d[1]) / denom, 0.0, 1.0)
        qx = a[0] + t * d[0] - self._px
        qy = a[1] + t * d[1] - self._py
        return qx * qx + qy * qy <= radius ** 2

    def render(self, state: SpriteWorldState) -> np.ndarray:
        """Composite the sprite over the texture; returns float32 in [0, 1]."""
        img = self.texture.copy()
        written = np.zeros(img.shape[:2], bool)
        for mask, color in self._layers(state):
            img[mask] = color
            written |= mask
        self.last_render_stats = {"sprite_pixels": int(written.sum())}
        return img.astype(np.float32) / 255.0

    def ground_truth_mask(self, state: SpriteWorldState | None = None) -> np.ndarray:
        """Exact {0, 1} mask of every sprite and target pixel."""
        state = self.state if state is None else state
        mask = np.zeros((self.config.height, self.config.width), bool)
        for layer, _ in self._layers(state):
            mask |= layer
        return mask.astype(np.uint8)


def transition(state: SpriteWorldState, action: np.ndarray, c: SpriteWorldConfig) -> SpriteWorldState:
    s = state.copy()
    s.velocity = c.damping * s.velocity + c.accel * action
    s.head = s.head + s.velocity
    lo, hi = c.margin, 1.0 - c.margin
    for i in range(2):
        if s.head[i] < lo or s.head[i] > hi:
            s.head[i] = min(max(s.head[i], lo), hi)
            s.velocity[i] = 0.0
    # the tail trails the head; joints relax toward the direction of travel
    speed = float(np.hypot(*s.velocity))
    pull = np.zeros(2)
    if speed > 1e-9:
        trail = math.atan2(-s.velocity[1], -s.velocity[0])
        pull[0] = _wrap(trail - s.joint_angles[0]) * min(1.0, speed / 0.02)
    pull[1] = _wrap(s.joint_angles[0] - s.joint_angles[1]) * (1.0 if speed > 1e-9 else 0.0)
    s.joint_velocities = 0.5 * s.joint_velocities + 0.3 * pull
    s.joint_angles = _wrap(s.joint_angles + s.joint_velocities)
    s.step += 1
    return s


def sprite_reward(state: SpriteWorldState) -> float:
    """Negative distance from the sprite tip (head) to the target."""
    return -float(np.linalg.norm(state.head - state.target))


# ----------------------------------------------------------------------------
# DrawerWorld reward math

@dataclass(frozen=True)
class RewardParams:
    eps_reach: float = 0.08
    c1: float = 1000.0
    c2: float = 0.01
    eps_success: float = 0.08


@dataclass(frozen=True)
class DrawerGeometry:
    h: np.ndarray = field(default_factory=lambda: np.zeros(3))  # effector
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))  # object
    g: np.ndarray = field(default_factory=lambda: np.zeros(3))  # goal


def drawer_reward(geom: DrawerGeometry, params: RewardParams = RewardParams(), exponent_sign: int = -1) -> float:
    """Reach-plus-push reward.

    ``exponent_sign=+1`` reproduces the published (unbounded) exponent; the
    default ``-1`` gives the bounded push term that peaks at ``c1``.
    """
    if exponent_sign not in (1, -1):
        raise ValueError(f"exponent_sign must be +1 or -1, got {exponent_sign}")
    h, p, g = (np.asarray(v, dtype=np.float64) for v in (geom.h, geom.p, geom.g))
    reach_dist = float(np.linalg.norm(h - p))
    reward = -reach_dist
    if reach_dist < params.eps_reach:
        push_sq = float(np.sum((p - g) ** 2))
        reward += params.c1 * math.exp(exponent_sign * push_sq / params.c2)
    return reward


def drawer_success(p, g, eps_success: float = 0.08) -> bool:
    return bool(np.linalg.norm(np.asarray(p, float) - np.asarray(g, float)) < eps_success)
