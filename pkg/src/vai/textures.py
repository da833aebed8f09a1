"""Background textures for SpriteWorld.

Every texture is an ``(H, W, 3)`` uint8 image. Built-ins are procedural so no
assets ship with the package; photo textures are read from disk and resized.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

TRAIN_TEXTURE = "grid"


def _grid(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    img = np.empty((h, w, 3), np.float64)
    img[:] = (0.15, 0.18, 0.22)
    yy, xx = np.mgrid[0:h, 0:w]
    lines = (yy % 12 == 0) | (xx % 12 == 0)
    img[lines] = (0.35, 0.38, 0.45)
    return img


def _black(h, w, rng):
    return np.zeros((h, w, 3))


def _white(h, w, rng):
    return np.ones((h, w, 3))


def _blue(h, w, rng):
    return np.broadcast_to(np.array([0.1, 0.25, 0.8]), (h, w, 3)).copy()


def _noise(h, w, rng):
    return rng.uniform(0.0, 1.0, size=(h, w, 3))


def _wood(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    cx, cy = rng.uniform(-0.5, 1.5, size=2)
    r = np.hypot(xx - cx, (yy - cy) * 0.3) * 30 + 2.0 * np.sin(xx * 9)
    ring = 0.5 + 0.5 * np.sin(r)
    base = np.array([0.55, 0.33, 0.16])
    dark = np.array([0.35, 0.2, 0.08])
    return dark + ring[..., None] * (base - dark)


def _marble(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    turb = np.zeros((h, w))
    for octave in range(4):
        f = 2 ** octave * 3
        phase = rng.uniform(0, 2 * np.pi, size=2)
        turb += np.sin(xx * f + phase[0]) * np.cos(yy * f + phase[1]) / (2 ** octave)
    vein = np.abs(np.sin((xx + yy) * 12 + 3 * turb)) ** 0.3
    return 0.7 + 0.28 * vein[..., None] * np.ones(3)


def _fabric(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w]
    weave = ((yy // 2 + xx // 2) % 2).astype(np.float64)
    warp = 0.5 + 0.5 * np.sin(xx * 0.8)
    c1 = np.array([0.55, 0.1, 0.35])
    c2 = np.array([0.3, 0.05, 0.45])
    t = (0.6 * weave + 0.4 * warp)[..., None]
    return c2 + t * (c1 - c2)


def _metal(h, w, rng):
    streaks = rng.normal(0.0, 1.0, size=(h, 1)) * 0.06
    streaks = np.repeat(streaks, w, axis=1)
    streaks += rng.normal(0.0, 0.02, size=(h, w))
    return np.clip(0.6 + streaks, 0, 1)[..., None] * np.array([0.95, 0.97, 1.0])


def _blanket(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w]
    palette = rng.uniform(0.2, 1.0, size=(4, 3))
    band = ((yy // 10) % 2) * 2 + (xx // 10) % 2
    img = palette[band]
    img[(yy % 10 < 2) | (xx % 10 < 2)] *= 0.6
    return img


BUILTIN = {
    "grid": _grid,
    "black": _black,
    "white": _white,
    "blue": _blue,
    "noise": _noise,
    "wood": _wood,
    "marble": _marble,
    "fabric": _fabric,
    "metal": _metal,
    "blanket": _blanket,
}


def load_image_texture(path: str | Path, size: tuple[int, int]) -> np.ndarray:
    """Read an image file and resize it to ``size`` = (H, W)."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise ValueError(f"unreadable texture image {path}: {exc}") from exc


def make_texture(spec: str | Path | np.ndarray, size: tuple[int, int] = (84, 84), seed: int = 0) -> np.ndarray:
    """Resolve a texture name, image path or array into a uint8 image."""
    h, w = size
    if isinstance(spec, np.ndarray):
        arr = spec
        if arr.dtype != np.uint8:
            arr = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
        if arr.shape[:2] != (h, w):
            arr = np.asarray(Image.fromarray(arr[..., :3]).resize((w, h), Image.BILINEAR))
        return np.ascontiguousarray(arr[..., :3])
    name = str(spec)
    if name in BUILTIN:
        rng = np.random.default_rng(seed)
        img = BUILTIN[name](h, w, rng)
        return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return load_image_texture(name, size)
