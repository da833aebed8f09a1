"""Strong augmentations for building (noisy, clean) adapter training pairs.

All functions take frames as float arrays in [0, 1] with layout (H, W, C) and
an explicit ``numpy.random.Generator``; none of them touch global state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

BASE_BACKGROUNDS = ("train_background", "random_color", "perturbed_fg_mean")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


@dataclass
class AugmentConfig:
    """Crop, foreground and background augmentation settings.

    ``base_weights`` picks exactly one background replacement per call
    (weights are normalized); an empty mapping leaves the background black.
    The remaining ``p_*`` fields are independent per-op probabilities.
    """

    crop_size: tuple[int, int] = (84, 84)
    pad: int = 8
    # foreground
    color_jitter: float = 0.2
    brightness: tuple[float, float] = (0.7, 1.3)
    # background
    base_weights: dict[str, float] = field(
        default_factory=lambda: {"train_background": 1.0, "random_color": 1.0, "perturbed_fg_mean": 1.0})
    fg_mean_perturbation: float = 0.05
    p_gaussian_noise: float = 0.5
    noise_std: float = 0.05
    p_multicolorout: float = 0.5
    boxes: tuple[int, int] = (1, 4)
    box_size: tuple[int, int] = (6, 30)
    p_darkened_copy: float = 0.5
    dark_scale: float = 0.3
    p_image_overlay: float = 0.0
    overlay_dir: str | None = None

    def __post_init__(self):
        for name in ("p_gaussian_noise", "p_multicolorout", "p_darkened_copy", "p_image_overlay"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        unknown = set(self.base_weights) - set(BASE_BACKGROUNDS)
        if unknown:
            raise ValueError(f"unknown background ops {sorted(unknown)}")
        if any(w < 0 for w in self.base_weights.values()):
            raise ValueError("background weights must be nonnegative")

    @classmethod
    def none(cls, crop_size=(84, 84), pad: int = 8) -> "AugmentConfig":
        """Identity foreground and background transforms; crop only."""
        return cls(crop_size=crop_size, pad=pad, color_jitter=0.0, brightness=(1.0, 1.0),
                   base_weights={"train_background": 1.0}, p_gaussian_noise=0.0, p_multicolorout=0.0,
                   p_darkened_copy=0.0, p_image_overlay=0.0)


@dataclass
class TrainingPair:
    noisy: np.ndarray           # I_s, (h, w, C)
    clean: np.ndarray           # I_t, (h, w, C)
    target_mask: np.ndarray     # cropped mask, (h, w) in {0, 1}
    offset: tuple[int, int] = (0, 0)


def list_overlay_images(directory: str | Path | None) -> list[Path]:
    if directory is None:
        return []
    d = Path(directory)
    if not d.is_dir():
        return []
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def multicolorout(frame: np.ndarray, rng: np.random.Generator, n_boxes: tuple[int, int] = (1, 4),
                  size: tuple[int, int] = (6, 30), region: np.ndarray | None = None) -> np.ndarray:
    """Paste a random number of uniformly coloured axis-aligned boxes.

    ``region`` restricts which pixels boxes may overwrite (1 = allowed).
    """
    out = frame.copy()
    h, w = frame.shape[:2]
    n = int(rng.integers(n_boxes[0], n_boxes[1] + 1))
    for _ in range(n):
        bh = int(rng.integers(size[0], size[1] + 1))
        bw = int(rng.integers(size[0], size[1] + 1))
        bh, bw = min(bh, h), min(bw, w)
        y = int(rng.integers(0, h - bh + 1))
        x = int(rng.integers(0, w - bw + 1))
        color = rng.uniform(0.0, 1.0, size=frame.shape[2])
        if region is None:
            out[y:y + bh, x:x + bw] = color
        else:
            sel = region[y:y + bh, x:x + bw].astype(bool)
            out[y:y + bh, x:x + bw][sel] = color
    return out


def _shift(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate with zero fill."""
    out = np.zeros_like(arr)
    h, w = arr.shape[:2]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = arr[ys, xs]
    return out


def _load_overlay(path: Path, shape) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB").resize((shape[1], shape[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def augment_background(background: np.ndarray, fg_region_mask: np.ndarray, train_bg: np.ndarray,
                       cfg: AugmentConfig, rng: np.random.Generator, foreground: np.ndarray | None = None,
                       applied: list[str] | None = None) -> np.ndarray:
    """Strong background transform; pixels with ``fg_region_mask == 1`` are kept.

    ``background`` is the frame with the foreground blanked out, ``train_bg``
    the original (unmasked) background to fall back to, and ``foreground`` the
    clean foreground image used for mean-colour and darkened-copy ops. Names of
    the ops actually applied are appended to ``applied`` when given.
    """
    fg = fg_region_mask.astype(bool)
    bg = ~fg
    h, w, c = background.shape
    out = np.zeros_like(background, dtype=np.float32)
    names = [n for n in BASE_BACKGROUNDS if cfg.base_weights.get(n, 0.0) > 0]
    ops = []
    if names:
        weights = np.array([cfg.base_weights[n] for n in names], dtype=np.float64)
        base = names[int(rng.choice(len(names), p=weights / weights.sum()))]
        ops.append(base)
        if base == "train_background":
            out[:] = train_bg
        elif base == "random_color":
            out[:] = rng.uniform(0.0, 1.0, size=c)
        else:
            if foreground is not None and fg.any():
                mean = foreground[fg].mean(axis=0)
            else:
                mean = np.full(c, 0.5)
            out[:] = mean + rng.uniform(-cfg.fg_mean_perturbation, cfg.fg_mean_perturbation, size=c)
    if rng.random() < cfg.p_gaussian_noise:
        ops.append("gaussian_noise")
        out = out + rng.normal(0.0, cfg.noise_std, size=out.shape)
    if rng.random() < cfg.p_multicolorout:
        ops.append("multicolorout")
        out = multicolorout(out, rng, cfg.boxes, cfg.box_size)
    if rng.random() < cfg.p_darkened_copy:
        ops.append("darkened_fg_copy")
        if foreground is not None and fg.any():
            dy = int(rng.integers(-h // 2, h // 2 + 1))
            dx = int(rng.integers(-w // 2, w // 2 + 1))
            copy_mask = _shift(fg, dy, dx)
            copy = _shift(foreground * cfg.dark_scale, dy, dx)
            out[copy_mask] = copy[copy_mask]
    if rng.random() < cfg.p_image_overlay:
        images = list_overlay_images(cfg.overlay_dir)
        if not images:
            raise ValueError(f"image overlay selected but no images found in {cfg.overlay_dir!r}")
        ops.append("image_overlay")
        img = _load_overlay(images[int(rng.integers(len(images)))], (h, w))
        alpha = rng.uniform(0.5, 1.0)
        out = (1 - alpha) * out + alpha * img
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    result = np.asarray(background, dtype=np.float32).copy()
    result[bg] = out[bg]
    if applied is not None:
        applied.extend(ops)
    return result


def augment_foreground(clean: np.ndarray, mask: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-channel colour jitter and a brightness change on foreground pixels."""
    c = clean.shape[2]
    scale = rng.uniform(1 - cfg.color_jitter, 1 + cfg.color_jitter, size=c)
    scale = scale * rng.uniform(cfg.brightness[0], cfg.brightness[1])
    out = clean.astype(np.float32).copy()
    sel = mask.astype(bool)
    out[sel] = np.clip(out[sel] * scale, 0.0, 1.0)
    return out


def random_crop_offset(shape: tuple[int, int], cfg: AugmentConfig, rng: np.random.Generator) -> tuple[int, int]:
    ph, pw = shape[0] + 2 * cfg.pad, shape[1] + 2 * cfg.pad
    ch, cw = cfg.crop_size
    if ch > ph or cw > pw:
        raise ValueError(f"crop {cfg.crop_size} larger than padded frame {(ph, pw)}")
    return int(rng.integers(0, ph - ch + 1)), int(rng.integers(0, pw - cw + 1))


def crop(arr: np.ndarray, offset: tuple[int, int], cfg: AugmentConfig, mode: str = "edge") -> np.ndarray:
    """Pad by ``cfg.pad`` and cut a ``cfg.crop_size`` window at ``offset``."""
    p = cfg.pad
    widths = ((p, p), (p, p)) + ((0, 0),) * (arr.ndim - 2)
    padded = np.pad(arr, widths, mode=mode) if p else arr
    y, x = offset
    return padded[y:y + cfg.crop_size[0], x:x + cfg.crop_size[1]]


def make_training_pair(frame: np.ndarray, mask: np.ndarray, cfg: AugmentConfig,
                       rng: np.random.Generator, applied: list[str] | None = None) -> TrainingPair:
    """Build (noisy source, clean target, cropped mask) from one frame.

    The frame and its mask share a single crop window. The clean image keeps
    foreground pixels only; the noisy image adds foreground jitter and a
    strong background transform of the cropped frame's background.
    """
    frame = np.asarray(frame)
    frame = frame.astype(np.float32) / 255.0 if frame.dtype == np.uint8 else frame.astype(np.float32)
    mask = np.asarray(mask).astype(np.uint8)
    if frame.shape[:2] != mask.shape[:2]:
        raise ValueError(f"frame {frame.shape[:2]} and mask {mask.shape[:2]} shapes differ")
    offset = random_crop_offset(frame.shape[:2], cfg, rng)
    frame_c = crop(frame, offset, cfg, mode="edge")
    mask_c = crop(mask, offset, cfg, mode="constant")
    m = mask_c[..., None].astype(np.float32)
    clean = frame_c * m
    background = frame_c * (1 - m)
    noisy_fg = augment_foreground(clean, mask_c, cfg, rng)
    noisy_bg = augment_background(background, mask_c, frame_c, cfg, rng, foreground=clean, applied=applied)
    noisy = np.clip(noisy_fg + noisy_bg, 0.0, 1.0).astype(np.float32)
    return TrainingPair(noisy, clean.astype(np.float32), mask_c, offset)
