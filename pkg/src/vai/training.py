"""Small helpers shared by the training loops."""

from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


class TrainingDivergence(RuntimeError):
    def __init__(self, what: str, step: int, value: float):
        super().__init__(f"{what} diverged at step {step}: loss={value}")
        self.step = step
        self.value = value


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def check_finite(what: str, step: int, loss: torch.Tensor | float) -> float:
    value = float(loss.detach()) if isinstance(loss, torch.Tensor) else float(loss)
    if not np.isfinite(value):
        raise TrainingDivergence(what, step, value)
    return value


def frames_to_tensor(frames) -> torch.Tensor:
    """(B, H, W, C) floats or uint8 -> (B, C, H, W) float32 tensor."""
    arr = np.asarray(frames)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def tensor_to_frames(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy()


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
