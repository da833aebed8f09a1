"""Foreground masks from a trained transporter, with decoder bias removed.

Decoding the heatmap-gated feature of a frame gives a blurry foreground image
that still carries background remnants baked into the decoder biases. The
controlled direct effect contrasts that decode with the decode of an all-zero
feature, keeping every decoder parameter untouched in both branches, so the
bias image cancels out.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from vai.keypoint import TransporterModel
from vai.obs_data import EpisodeStore
from vai.training import frames_to_tensor, tensor_to_frames


@dataclass
class BinaryMask:
    values: np.ndarray          # (H, W) uint8 in {0, 1}
    threshold_used: float


def _check_model(model: TransporterModel) -> None:
    if not getattr(model, "trained", False):
        raise ValueError("transporter model is untrained")


def gated_feature(model: TransporterModel, x: torch.Tensor) -> torch.Tensor:
    heat = model.heatmap(model.keypoints(x))
    return model.features(x) * heat.unsqueeze(1)


def _decode_pair(model: TransporterModel, frames: np.ndarray, batch_size: int = 64):
    """Decodes of the gated feature and of the null feature, (B, C, H, W) each."""
    frames = np.asarray(frames)
    model.check_frame(frames)
    single = frames.ndim == 3
    x = frames_to_tensor(frames)
    outs, nulls = [], []
    model.eval()
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            a_t = gated_feature(model, x[i:i + batch_size])
            outs.append(model.va_decoder(a_t))
            nulls.append(model.va_decoder(torch.zeros_like(a_t)))
    return torch.cat(outs), torch.cat(nulls), single


def masked_decode(model: TransporterModel, frame: np.ndarray) -> np.ndarray:
    """Decoder output for the heatmap-gated feature, in frame layout."""
    _check_model(model)
    out, _, single = _decode_pair(model, frame)
    arr = tensor_to_frames(out)
    return arr[0] if single else arr


def bias_image(model: TransporterModel) -> np.ndarray:
    """Decode of the null feature; independent of any frame."""
    c = model.config
    grid = c.grid
    with torch.no_grad():
        out = model.va_decoder(torch.zeros(1, c.feature_channels, *grid))
    return tensor_to_frames(out)[0]


def cde_from_decodes(decoded: np.ndarray, decoded_null: np.ndarray) -> np.ndarray:
    """Channel-mean of the difference of two decodes in frame layout."""
    return (np.asarray(decoded, dtype=np.float64) - np.asarray(decoded_null, dtype=np.float64)).mean(axis=-1)


def compute_cde(model: TransporterModel, frame: np.ndarray) -> np.ndarray:
    """(H, W) controlled-direct-effect map (or (B, H, W) for a batch)."""
    _check_model(model)
    out, null, single = _decode_pair(model, frame)
    cde = cde_from_decodes(tensor_to_frames(out), tensor_to_frames(null))
    return cde[0] if single else cde


def threshold_mask(cde: np.ndarray, epsilon: float) -> BinaryMask:
    """1 where the signed CDE is >= epsilon, else 0."""
    return BinaryMask((np.asarray(cde) >= epsilon).astype(np.uint8), float(epsilon))


def calibrate_epsilon(cde_maps: np.ndarray, quantile: float) -> float:
    """Threshold below which ``quantile`` of the calibration CDE values fall."""
    if not 0.0 <= quantile <= 1.0:
        raise ValueError(f"quantile must be in [0, 1], got {quantile}")
    return float(np.quantile(np.asarray(cde_maps, dtype=np.float64), quantile))


@dataclass
class MaskedDataset:
    """A store whose ``masks`` field holds one extracted mask per frame."""

    store: EpisodeStore
    epsilon: float

    def __len__(self):
        return self.store.num_frames

    def pairs(self):
        for e, ep in enumerate(self.store.episodes):
            for t in range(len(ep)):
                yield ep[t], self.store.masks[e][t]


def extract_masked_dataset(model: TransporterModel, store: EpisodeStore, epsilon: float | None = None,
                           quantile: float = 0.9, calibration_frames: int = 256,
                           batch_size: int = 64) -> MaskedDataset:
    """Pair every stored frame with its thresholded CDE mask.

    With ``epsilon=None`` the threshold is calibrated as the ``quantile`` of
    CDE values over the first ``calibration_frames`` frames.
    """
    _check_model(model)
    if store.num_frames == 0:
        raise ValueError("cannot extract masks from an empty store")
    cdes = []
    for e, ep in enumerate(store.episodes):
        ep_cde = []
        for i in range(0, len(ep), batch_size):
            try:
                ep_cde.append(compute_cde(model, ep[i:i + batch_size].astype(np.float32) / 255.0))
            except Exception as exc:
                raise RuntimeError(f"mask extraction failed at episode {e}, frame {i}: {exc}") from exc
        cdes.append(np.concatenate(ep_cde).astype(np.float32))
    if epsilon is None:
        calib = np.concatenate(cdes)[:calibration_frames]
        epsilon = calibrate_epsilon(calib, quantile)
    masks = [threshold_mask(c, epsilon).values for c in cdes]
    out = dataclasses.replace(store, masks=masks, extra={**store.extra, "epsilon": repr(float(epsilon))})
    return MaskedDataset(out, float(epsilon))


def load_masked_dataset(store: EpisodeStore) -> MaskedDataset:
    if store.masks is None:
        raise ValueError("store has no extracted masks")
    return MaskedDataset(store, float(store.extra.get("epsilon", "nan")))
