"""Image grids: raw vs adapted frames, and keypoint / mask overlays."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

from vai.obs_data import to_uint8

logger = logging.getLogger(__name__)

KEYPOINT_COLOR = np.array([0, 255, 255], np.uint8)
MASK_TINT = np.array([255, 0, 255], np.float32)


def tile(rows: list[list[np.ndarray]], pad: int = 2, fill: int = 255) -> np.ndarray:
    """Arrange equally sized (H, W, 3) uint8 images in a padded grid."""
    if not rows or not rows[0]:
        raise ValueError("nothing to tile")
    h, w = rows[0][0].shape[:2]
    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    out = np.full((n_rows * (h + pad) + pad, n_cols * (w + pad) + pad, 3), fill, np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y:y + h, x:x + w] = to_uint8(img)
    return out


def comparison_grid(raw: np.ndarray, adapted: np.ndarray, pad: int = 2) -> np.ndarray:
    """Top row raw frames, bottom row adapted frames."""
    if len(raw) == 0:
        raise ValueError("no frames to visualize")
    return tile([list(raw), list(adapted)], pad)


def draw_keypoints(frame: np.ndarray, keypoints: np.ndarray, radius: int = 2) -> np.ndarray:
    """Mark normalized (x, y) keypoints with small crosses."""
    img = to_uint8(frame).copy()
    h, w = img.shape[:2]
    for kx, ky in np.asarray(keypoints):
        cx, cy = int(kx * w), int(ky * h)
        for d in range(-radius, radius + 1):
            if 0 <= cy < h and 0 <= cx + d < w:
                img[cy, cx + d] = KEYPOINT_COLOR
            if 0 <= cy + d < h and 0 <= cx < w:
                img[cy + d, cx] = KEYPOINT_COLOR
    return img


def tint_mask(frame: np.ndarray, mask: np.ndarray, strength: float = 0.6) -> np.ndarray:
    img = to_uint8(frame).astype(np.float32)
    m = np.asarray(mask, bool)
    img[m] = (1 - strength) * img[m] + strength * MASK_TINT
    return img.round().astype(np.uint8)


def overlay_grid(frames: np.ndarray, keypoints: list[np.ndarray], masks: list[np.ndarray], pad: int = 2) -> np.ndarray:
    """Top row detected keypoints, bottom row foreground masks."""
    if len(frames) == 0:
        raise ValueError("no frames to visualize")
    top = [draw_keypoints(f, k) for f, k in zip(frames, keypoints)]
    bottom = [tint_mask(f, m) for f, m in zip(frames, masks)]
    return tile([top, bottom], pad)


def save_png(img: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_frames(paths: list[str | Path], shape: tuple[int, int]) -> tuple[np.ndarray, list[str]]:
    """Read image files as uint8 frames resized to ``shape``.

    Unreadable files are skipped with a warning; returns (frames, warnings).
    """
    frames, warnings = [], []
    for p in paths:
        try:
            with Image.open(p) as im:
                im = im.convert("RGB")
                if im.size != (shape[1], shape[0]):
                    im = im.resize((shape[1], shape[0]), Image.BILINEAR)
                frames.append(np.asarray(im, np.uint8))
        except (OSError, ValueError) as exc:
            msg = f"skipping unreadable input {p}: {exc}"
            logger.warning(msg)
            warnings.append(msg)
    arr = np.stack(frames) if frames else np.zeros((0, *shape, 3), np.uint8)
    return arr, warnings
