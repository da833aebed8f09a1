"""Observation adapter: an encoder/mask-decoder pair that strips distractors.

The encoder ``E`` and mask decoder ``D`` are trained on augmented pairs so
that ``D(E(noisy))`` reproduces the clean foreground mask while ``E`` maps the
noisy and clean images to matching features. At deployment every frame is
multiplied by its predicted mask.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from vai.attention import MaskedDataset
from vai.augment import AugmentConfig, TrainingPair, make_training_pair
from vai.checkpoint import load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from vai.training import check_finite, frames_to_tensor, seed_everything, tensor_to_frames

logger = logging.getLogger(__name__)


@dataclass
class AdapterConfig:
    lam: float = 1.0
    hidden: int = 32
    feature_channels: int = 32
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 32


class AdapterModel(nn.Module):
    def __init__(self, config: AdapterConfig, channels: int = 3):
        super().__init__()
        self.config = config
        self.channels = channels
        h, f = config.hidden, config.feature_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, h // 2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(h // 2, h, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(h, h, 3, padding=1), nn.ReLU(),
            nn.Conv2d(h, f, 3, padding=1),
        )
        self.mask_decoder = nn.Sequential(
            nn.ReLU(),
            nn.Conv2d(f, h, 3, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(h, h // 2, 4, stride=2, padding=1), nn.ReLU(),
            # linear head: a sigmoid saturates on foreground and stalls training
            nn.ConvTranspose2d(h // 2, 1, 4, stride=2, padding=1),
        )
        self.trained = False
        self.history: list[dict[str, float]] = []

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (unclipped mask estimate (B, 1, H, W), encoder features)."""
        feat = self.encoder(x)
        return self.mask_decoder(feat), feat


def adapter_loss_terms(mask_pred, mask_target, feat_noisy, feat_clean, lam: float):
    """(total, mask term, feature term); squared norms summed per sample."""
    mask_pred, mask_target, feat_noisy, feat_clean = map(
        torch.as_tensor, (mask_pred, mask_target, feat_noisy, feat_clean))
    mask_term = ((mask_pred - mask_target) ** 2).sum()
    feat_term = ((feat_noisy - feat_clean) ** 2).sum()
    return mask_term + lam * feat_term, mask_term, feat_term


def _pair_tensors(pairs: list[TrainingPair]):
    noisy = frames_to_tensor(np.stack([p.noisy for p in pairs]))
    clean = frames_to_tensor(np.stack([p.clean for p in pairs]))
    target = torch.from_numpy(np.stack([p.target_mask for p in pairs]).astype(np.float32))[:, None]
    return noisy, clean, target


def adapter_loss(model: AdapterModel, pair: TrainingPair | list[TrainingPair], lam: float | None = None) -> torch.Tensor:
    """Mask reconstruction error plus ``lam`` times encoder feature mismatch."""
    pairs = pair if isinstance(pair, list) else [pair]
    lam = model.config.lam if lam is None else lam
    noisy, clean, target = _pair_tensors(pairs)
    pred, f_noisy = model(noisy)
    f_clean = model.encoder(clean)
    total, _, _ = adapter_loss_terms(pred, target, f_noisy, f_clean, lam)
    return total


def train_adapter(dataset: MaskedDataset, aug: AugmentConfig, config: AdapterConfig, seed: int = 0,
                  log_every: int = 0) -> AdapterModel:
    store = dataset.store
    if store.num_frames == 0:
        raise ValueError("cannot train an adapter on an empty dataset")
    seed_everything(seed)
    model = AdapterModel(config, channels=store.frame_shape[-1])
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(seed)
    index = store.index()
    model.train()
    for step in range(config.steps):
        picks = rng.integers(len(index), size=config.batch_size)
        pairs = []
        for k in picks:
            e, t = index[k]
            pairs.append(make_training_pair(store.episodes[e][t], store.masks[e][t], aug, rng))
        noisy, clean, target = _pair_tensors(pairs)
        pred, f_noisy = model(noisy)
        f_clean = model.encoder(clean)
        total, mask_term, feat_term = adapter_loss_terms(pred, target, f_noisy, f_clean, config.lam)
        n = noisy.shape[0]
        loss = total / n
        value = check_finite("adapter", step, loss)
        opt.zero_grad()
        loss.backward()
        opt.step()
        m_val, f_val = float(mask_term.detach()) / n, float(feat_term.detach()) / n
        model.history.append({"loss": value, "mask": m_val, "feature": f_val})
        if log_every and step % log_every == 0:
            logger.info("adapter step %d loss %.4f (mask %.4f, feature %.4f)", step, value, m_val, f_val)
    model.trained = True
    model.eval()
    return model


def predict_mask(model: AdapterModel, frames: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Soft foreground mask in [0, 1], shape (H, W) or (B, H, W)."""
    frames = np.asarray(frames)
    if frames.shape[-1] != model.channels:
        raise ValueError(f"frame shape mismatch: expected {model.channels} channels, got shape {frames.shape}")
    x = frames_to_tensor(frames)
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            out.append(model(x[i:i + batch_size])[0][:, 0])
    m = torch.cat(out).clamp(0.0, 1.0).numpy()
    return m[0] if frames.ndim == 3 else m


def adapt_observation(model: AdapterModel, frame: np.ndarray) -> np.ndarray:
    """Frame multiplied pixelwise by the adapter's predicted mask."""
    frame = np.asarray(frame)
    if frame.dtype == np.uint8:
        frame = frame.astype(np.float32) / 255.0
    mask = predict_mask(model, frame)
    return np.clip(frame * mask[..., None], 0.0, 1.0).astype(np.float32)


def save_adapter(model: AdapterModel, path) -> None:
    hist = model.history
    arrays = module_arrays(model, "model.")
    for key in ("loss", "mask", "feature"):
        arrays[f"history.{key}"] = np.array([h[key] for h in hist], dtype=np.float64)
    save_checkpoint(path, "adapter", {**dataclasses.asdict(model.config), "channels": model.channels}, arrays)


def load_adapter(path) -> AdapterModel:
    meta, arrays = load_checkpoint(path, kind="adapter")
    cfg = dict(meta["config"])
    channels = cfg.pop("channels")
    model = AdapterModel(AdapterConfig(**cfg), channels=channels)
    load_module_arrays(model, arrays, "model.")
    model.history = [
        {"loss": a, "mask": b, "feature": c}
        for a, b, c in zip(arrays["history.loss"], arrays["history.mask"], arrays["history.feature"])
    ]
    model.trained = True
    model.eval()
    return model
