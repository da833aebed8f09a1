"""Unsupervised keypoints trained by transporter-style target reconstruction.

Three networks share one ``H' x W'`` grid (a quarter of the input resolution):

* ``keynet`` maps a frame to K detector channels; a spatial soft-argmax turns
  each channel into a 2-D location in normalized ``[0, 1]^2`` coordinates.
* ``feature_net`` maps a frame to an F-channel feature map.
* ``decoder`` maps a feature map back to an image.

Training reconstructs a target frame from the source features with the target
keypoint regions swapped in, which forces keypoints onto moving foreground.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from vai.checkpoint import load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from vai.obs_data import EpisodeStore, sample_frame_pair
from vai.training import check_finite, frames_to_tensor, seed_everything, tensor_to_frames

logger = logging.getLogger(__name__)


@dataclass
class TransporterConfig:
    num_keypoints: int = 4
    sigma: float = 0.1
    height: int = 84
    width: int = 84
    channels: int = 3
    feature_channels: int = 32
    hidden: int = 32
    softmax_temperature: float = 1.0
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 32
    cross_episode_prob: float = 0.5

    @property
    def grid(self) -> tuple[int, int]:
        return (self.height // 4, self.width // 4)


# ----------------------------------------------------------------------------
# closed-form pieces

def grid_coordinates(grid: tuple[int, int]) -> torch.Tensor:
    """Normalized (x, y) of each grid cell centre, shape (H', W', 2)."""
    h, w = grid
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def render_heatmap(keypoints, grid: tuple[int, int], sigma: float) -> torch.Tensor:
    """Max over per-keypoint Gaussians evaluated on the grid.

    ``keypoints`` is (K, 2) or (B, K, 2) in normalized (x, y); the result is
    (H', W') or (B, H', W') with the same dtype as the input tensor.
    """
    kp = torch.as_tensor(keypoints)
    if not kp.is_floating_point():
        kp = kp.double()
    squeeze = kp.dim() == 2
    if squeeze:
        kp = kp[None]
    if kp.shape[1] == 0:
        raise ValueError("cannot render a heatmap from an empty keypoint set")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    coords = grid_coordinates(grid).to(kp.dtype)                     # (H', W', 2)
    diff = coords[None, None] - kp[:, :, None, None, :]               # (B, K, H', W', 2)
    gauss = torch.exp(-(diff ** 2).sum(-1) / (2.0 * sigma ** 2))
    heat = gauss.max(dim=1).values
    return heat[0] if squeeze else heat


def transport_features(feat_s, feat_t, heat_s, heat_t) -> torch.Tensor:
    """Source features on shared background, target features at target keypoints.

    Features are (..., F, H', W') and heatmaps (..., H', W'); the heatmap gate
    is applied to every channel at each location.
    """
    feat_s, feat_t, heat_s, heat_t = map(torch.as_tensor, (feat_s, feat_t, heat_s, heat_t))
    grids = {tuple(feat_s.shape[-2:]), tuple(feat_t.shape[-2:]), tuple(heat_s.shape[-2:]), tuple(heat_t.shape[-2:])}
    if len(grids) != 1:
        raise ValueError(f"transport inputs disagree on the grid: {sorted(grids)}")
    hs = heat_s.unsqueeze(-3)
    ht = heat_t.unsqueeze(-3)
    return feat_s * (1 - hs) * (1 - ht) + feat_t * ht


def reconstruction_loss(target, reconstruction) -> torch.Tensor:
    """Sum of squared pixel differences (per sample when batched)."""
    target = torch.as_tensor(target)
    reconstruction = torch.as_tensor(reconstruction)
    if target.shape != reconstruction.shape:
        raise ValueError(f"shape mismatch: target {tuple(target.shape)} vs reconstruction {tuple(reconstruction.shape)}")
    return ((target - reconstruction) ** 2).sum()


# ----------------------------------------------------------------------------
# networks

def _encoder(in_ch: int, hidden: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, hidden // 2, 3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(hidden // 2, hidden, 3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(hidden, hidden, 3, stride=1, padding=1), nn.ReLU(),
        nn.Conv2d(hidden, out_ch, 1),
    )


class Decoder(nn.Module):
    """Upsampling decoder with a learned per-pixel output bias.

    The bias map is where static background appearance ends up during
    training; it is part of the decoder's bias path.
    """

    def __init__(self, in_ch: int, hidden: int, out_ch: int, out_size: tuple[int, int]):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, hidden, 3, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(hidden, hidden // 2, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(hidden // 2, out_ch, 4, stride=2, padding=1),
        )
        self.bias_map = nn.Parameter(torch.zeros(out_ch, *out_size))

    def forward(self, x):
        return self.body(x) + self.bias_map


def spatial_soft_argmax(logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """(B, K, H', W') detector maps -> (B, K, 2) expected (x, y) in [0, 1]."""
    b, k, h, w = logits.shape
    probs = F.softmax(logits.reshape(b, k, h * w) / temperature, dim=-1).reshape(b, k, h, w)
    coords = grid_coordinates((h, w)).to(logits.dtype)
    x = (probs * coords[..., 0]).sum(dim=(-2, -1))
    y = (probs * coords[..., 1]).sum(dim=(-2, -1))
    return torch.stack([x, y], dim=-1)


class TransporterModel(nn.Module):
    def __init__(self, config: TransporterConfig):
        super().__init__()
        if config.height % 4 or config.width % 4:
            raise ValueError(f"frame size must be divisible by 4, got {config.height}x{config.width}")
        self.config = config
        c = config
        self.keynet = _encoder(c.channels, c.hidden, c.num_keypoints)
        self.feature_net = nn.Sequential(_encoder(c.channels, c.hidden, c.feature_channels), nn.ReLU())
        self.va_decoder = Decoder(c.feature_channels, c.hidden, c.channels, (c.height, c.width))
        self.trained = False
        self.history: list[float] = []

    def keypoints(self, x: torch.Tensor) -> torch.Tensor:
        return spatial_soft_argmax(self.keynet(x), self.config.softmax_temperature)

    def heatmap(self, keypoints: torch.Tensor) -> torch.Tensor:
        return render_heatmap(keypoints, self.config.grid, self.config.sigma)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature_net(x)

    def forward(self, source: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        n = source.shape[0]
        both = torch.cat([source, target])
        heat = self.heatmap(self.keypoints(both))
        feat = self.features(both)
        transported = transport_features(feat[:n], feat[n:], heat[:n], heat[n:])
        return self.va_decoder(transported)

    def check_frame(self, frame: np.ndarray) -> None:
        c = self.config
        expected = (c.height, c.width, c.channels)
        if tuple(frame.shape[-3:]) != expected:
            raise ValueError(f"frame shape mismatch: expected {expected}, got {tuple(frame.shape[-3:])}")


def detect_keypoints(model: TransporterModel, frame: np.ndarray) -> np.ndarray:
    """K keypoint locations (x, y) in [0, 1]^2 for one frame or a batch."""
    frame = np.asarray(frame)
    model.check_frame(frame)
    model.eval()
    with torch.no_grad():
        kp = model.keypoints(frames_to_tensor(frame))
    kp = kp.numpy().astype(np.float64)
    return kp[0] if frame.ndim == 3 else kp


def _sample_batch(store: EpisodeStore, cfg: TransporterConfig, rng: np.random.Generator):
    pairs = [sample_frame_pair(store, cfg.cross_episode_prob, rng) for _ in range(cfg.batch_size)]
    src = frames_to_tensor(np.stack([p.source for p in pairs]))
    tgt = frames_to_tensor(np.stack([p.target for p in pairs]))
    return src, tgt


def train_transporter(store: EpisodeStore, config: TransporterConfig, seed: int = 0,
                      log_every: int = 0) -> TransporterModel:
    if store.num_frames == 0:
        raise ValueError("cannot train on an empty store")
    h, w, c = store.frame_shape
    config = dataclasses.replace(config, height=h, width=w, channels=c)
    if len(store.episodes) < 2 and config.cross_episode_prob > 0:
        logger.warning("single-episode store: disabling cross-episode sampling")
        config = dataclasses.replace(config, cross_episode_prob=0.0)
    seed_everything(seed)
    model = TransporterModel(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(seed)
    model.train()
    for step in range(config.steps):
        src, tgt = _sample_batch(store, config, rng)
        recon = model(src, tgt)
        loss = reconstruction_loss(tgt, recon) / src.shape[0]
        value = check_finite("transporter", step, loss)
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.history.append(value)
        if log_every and step % log_every == 0:
            logger.info("transporter step %d loss %.4f", step, value)
    model.trained = True
    model.eval()
    return model


def save_transporter(model: TransporterModel, path) -> None:
    save_checkpoint(
        path, "transporter", dataclasses.asdict(model.config),
        {**module_arrays(model, "model."), "history": np.asarray(model.history, dtype=np.float64)},
    )


def load_transporter(path) -> TransporterModel:
    meta, arrays = load_checkpoint(path, kind="transporter")
    model = TransporterModel(TransporterConfig(**meta["config"]))
    load_module_arrays(model, arrays, "model.")
    model.history = arrays["history"].tolist()
    model.trained = True
    model.eval()
    return model
