"""Episode-grouped observation storage and frame-pair sampling.

Frames are kept as uint8 internally (the environments render 8-bit colour), so
the PNG directory layout on disk round-trips bit-exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
FORMAT_VERSION = 1


class StoreError(ValueError):
    pass


def to_uint8(frame: np.ndarray) -> np.ndarray:
    if frame.dtype == np.uint8:
        return frame
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_float(frame: np.ndarray) -> np.ndarray:
    if frame.dtype == np.uint8:
        return frame.astype(np.float32) / 255.0
    return np.asarray(frame, dtype=np.float32)


@dataclass
class EpisodeStore:
    """Frames grouped by episode, in temporal order.

    ``episodes[i]`` is a ``(T_i, H, W, C)`` uint8 array. ``gt_masks`` is an
    optional parallel list of ``(T_i, H, W)`` uint8 arrays (only synthetic
    environments can provide them); ``masks`` holds extracted foreground masks.
    """

    episodes: list[np.ndarray]
    env_id: str = "unknown"
    texture_id: str = "unknown"
    seed: int = 0
    gt_masks: list[np.ndarray] | None = None
    masks: list[np.ndarray] | None = None
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        shapes = {ep.shape[1:] for ep in self.episodes}
        if len(shapes) > 1:
            raise StoreError(f"episodes have mixed frame shapes {sorted(shapes)}")
        for name in ("gt_masks", "masks"):
            arrs = getattr(self, name)
            if arrs is not None:
                if [len(m) for m in arrs] != self.episode_lengths:
                    raise StoreError(f"{name} lengths do not match episode lengths")

    @property
    def episode_lengths(self) -> list[int]:
        return [len(ep) for ep in self.episodes]

    @property
    def num_frames(self) -> int:
        return sum(self.episode_lengths)

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return tuple(self.episodes[0].shape[1:])

    def frame(self, episode: int, index: int) -> np.ndarray:
        return to_float(self.episodes[episode][index])

    def index(self) -> list[tuple[int, int]]:
        """(episode, step) for every frame, in storage order."""
        return [(e, t) for e, n in enumerate(self.episode_lengths) for t in range(n)]

    def all_frames(self) -> np.ndarray:
        return np.concatenate(self.episodes, axis=0)

    def __eq__(self, other):
        if not isinstance(other, EpisodeStore):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return len(a) == len(b) and all(np.array_equal(x, y) and x.dtype == y.dtype for x, y in zip(a, b))

        return (
            (self.env_id, self.texture_id, self.seed, self.extra)
            == (other.env_id, other.texture_id, other.seed, other.extra)
            and same(self.episodes, other.episodes)
            and same(self.gt_masks, other.gt_masks)
            and same(self.masks, other.masks)
        )


@dataclass
class FramePair:
    source: np.ndarray
    target: np.ndarray
    same_episode: bool
    source_index: tuple[int, int] = (0, 0)
    target_index: tuple[int, int] = (0, 0)


def collect_random_transitions(env, count: int, seed: int, record_gt: bool = True) -> EpisodeStore:
    """Roll out a uniform-random policy until ``count`` frames are recorded.

    Each episode starts with its reset frame. The last episode is truncated if
    ``count`` runs out mid-episode.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    episodes, gts = [], []
    total = 0
    ep = 0
    while total < count:
        frames, masks = [], []
        try:
            _, frame = env.reset(seed=int(rng.integers(2**31)))
        except Exception as exc:
            raise RuntimeError(f"environment reset failed at episode {ep}: {exc}") from exc
        frames.append(to_uint8(frame))
        if record_gt:
            masks.append(env.ground_truth_mask())
        step = 0
        done = False
        while not done and total + len(frames) < count:
            action = rng.uniform(-1.0, 1.0, size=env.config.action_dim)
            try:
                _, frame, _, done = env.step(action)
            except Exception as exc:
                raise RuntimeError(f"environment step failed at episode {ep}, step {step}: {exc}") from exc
            step += 1
            frames.append(to_uint8(frame))
            if record_gt:
                masks.append(env.ground_truth_mask())
        episodes.append(np.stack(frames))
        if record_gt:
            gts.append(np.stack(masks).astype(np.uint8))
        total += len(frames)
        ep += 1
    return EpisodeStore(
        episodes=episodes,
        env_id=getattr(env, "env_id", type(env).__name__),
        texture_id=getattr(env, "texture_id", "unknown"),
        seed=seed,
        gt_masks=gts if record_gt else None,
    )


def sample_frame_pair(store: EpisodeStore, cross_episode_prob: float, rng: np.random.Generator) -> FramePair:
    """Draw a (source, target) pair.

    Same-episode pairs are uniform over all index pairs ``i <= j`` in the
    whole store; cross-episode pairs pick two distinct episodes uniformly.
    """
    if not 0.0 <= cross_episode_prob <= 1.0:
        raise ValueError(f"cross_episode_prob must be in [0, 1], got {cross_episode_prob}")
    n_eps = len(store.episodes)
    if n_eps < 1:
        raise StoreError("cannot sample from an empty store")
    if cross_episode_prob > 0 and n_eps < 2:
        raise StoreError(f"cross-episode sampling needs >= 2 episodes, store has {n_eps}")
    if cross_episode_prob > 0 and rng.random() < cross_episode_prob:
        e1, e2 = rng.choice(n_eps, size=2, replace=False)
        i = int(rng.integers(store.episode_lengths[e1]))
        j = int(rng.integers(store.episode_lengths[e2]))
        return FramePair(store.frame(e1, i), store.frame(e2, j), False, (int(e1), i), (int(e2), j))
    lengths = np.array(store.episode_lengths)
    n_pairs = lengths * (lengths + 1) // 2
    e = int(rng.choice(n_eps, p=n_pairs / n_pairs.sum()))
    # k-th pair in row-major order over the upper triangle
    k = int(rng.integers(n_pairs[e]))
    n = int(lengths[e])
    i = 0
    while k >= n - i:
        k -= n - i
        i += 1
    j = i + k
    return FramePair(store.frame(e, i), store.frame(e, j), True, (e, i), (e, j))


def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im).copy()
    except OSError as exc:
        raise StoreError(f"cannot read frame file {path}: {exc}") from exc


def save_store(store: EpisodeStore, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h, w, c = store.frame_shape
    lines = [
        f"format_version = {FORMAT_VERSION}",
        f"env_id = {store.env_id}",
        f"texture_id = {store.texture_id}",
        f"seed = {store.seed}",
        f"height = {h}",
        f"width = {w}",
        f"channels = {c}",
        f"num_episodes = {len(store.episodes)}",
        f"has_gt_masks = {str(store.gt_masks is not None).lower()}",
        f"has_masks = {str(store.masks is not None).lower()}",
    ]
    for key in sorted(store.extra):
        lines.append(f"extra.{key} = {store.extra[key]}")
    for e, ep in enumerate(store.episodes):
        lines.append(f"episode_{e:04d} = {len(ep)}")
        d = path / f"episode_{e:04d}"
        d.mkdir(exist_ok=True)
        for t, frame in enumerate(ep):
            _write_png(d / f"frame_{t:04d}.png", frame if c != 1 else frame[..., 0])
            if store.gt_masks is not None:
                _write_png(d / f"gt_{t:04d}.png", store.gt_masks[e][t] * np.uint8(255))
            if store.masks is not None:
                _write_png(d / f"mask_{t:04d}.png", store.masks[e][t] * np.uint8(255))
    (path / MANIFEST).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> dict[str, str]:
    manifest = Path(path) / MANIFEST
    if not manifest.is_file():
        raise StoreError(f"missing manifest {manifest}")
    out = {}
    for n, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise StoreError(f"corrupt manifest {manifest}, line {n}: {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_store(path: str | Path) -> EpisodeStore:
    path = Path(path)
    m = read_manifest(path)
    try:
        n_eps = int(m["num_episodes"])
        lengths = [int(m[f"episode_{e:04d}"]) for e in range(n_eps)]
        channels = int(m["channels"])
        seed = int(m["seed"])
    except (KeyError, ValueError) as exc:
        raise StoreError(f"corrupt manifest {path / MANIFEST}: {exc}") from exc
    has_gt = m.get("has_gt_masks", "false") == "true"
    has_masks = m.get("has_masks", "false") == "true"
    episodes, gts, masks = [], [], []
    for e, n in enumerate(lengths):
        d = path / f"episode_{e:04d}"
        frames = [_read_png(d / f"frame_{t:04d}.png") for t in range(n)]
        arr = np.stack(frames)
        if channels == 1:
            arr = arr[..., None]
        episodes.append(arr)
        if has_gt:
            gts.append(np.stack([_read_png(d / f"gt_{t:04d}.png") for t in range(n)]) // 255)
        if has_masks:
            masks.append(np.stack([_read_png(d / f"mask_{t:04d}.png") for t in range(n)]) // 255)
    extra = {k[len("extra."):]: v for k, v in m.items() if k.startswith("extra.")}
    return EpisodeStore(
        episodes=episodes,
        env_id=m.get("env_id", "unknown"),
        texture_id=m.get("texture_id", "unknown"),
        seed=seed,
        gt_masks=gts if has_gt else None,
        masks=masks if has_masks else None,
        extra=extra,
    )
