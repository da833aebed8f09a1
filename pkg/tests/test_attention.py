import numpy as np
import pytest
import torch

from vai.attention import (
    bias_image,
    calibrate_epsilon,
    cde_from_decodes,
    compute_cde,
    extract_masked_dataset,
    load_masked_dataset,
    masked_decode,
    threshold_mask,
)
from vai.envs import SpriteWorld, SpriteWorldConfig
from vai.keypoint import TransporterConfig, TransporterModel, train_transporter
from vai.obs_data import EpisodeStore, collect_random_transitions


@pytest.fixture(scope="module")
def store():
    env = SpriteWorld(SpriteWorldConfig(height=32, width=32, episode_length=20))
    return collect_random_transitions(env, 40, seed=0)


@pytest.fixture(scope="module")
def model(store):
    cfg = TransporterConfig(height=32, width=32, hidden=16, feature_channels=8, steps=10, batch_size=4)
    return train_transporter(store, cfg, seed=0)


def test_untrained_model_rejected():
    m = TransporterModel(TransporterConfig(height=32, width=32, hidden=16, feature_channels=8))
    with pytest.raises(ValueError, match="untrained"):
        compute_cde(m, np.zeros((32, 32, 3), np.float32))
    with pytest.raises(ValueError, match="untrained"):
        masked_decode(m, np.zeros((32, 32, 3), np.float32))


def test_shape_mismatch(model):
    with pytest.raises(ValueError, match="shape mismatch"):
        compute_cde(model, np.zeros((84, 84, 3), np.float32))


def test_masked_decode_shape_and_determinism(model, store):
    f = store.frame(0, 4)
    a = masked_decode(model, f)
    assert a.shape == f.shape and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, masked_decode(model, f))


def test_cde_self_cancellation(model):
    null = model.va_decoder(torch.zeros(1, 8, 8, 8)).detach()
    out = null.permute(0, 2, 3, 1).numpy()
    assert np.all(cde_from_decodes(out, out) == 0.0)


def test_bias_image_frame_independent(model, store):
    rng = np.random.default_rng(0)
    b = bias_image(model)
    for _ in range(3):
        f = rng.uniform(size=(32, 32, 3)).astype(np.float32)
        cde = compute_cde(model, f)
        assert np.all(np.isfinite(cde))
        np.testing.assert_allclose(cde, (masked_decode(model, f) - b).mean(-1), atol=1e-6)
    np.testing.assert_array_equal(b, bias_image(model))


def test_cde_batch_matches_single(model, store):
    frames = store.episodes[0][:5].astype(np.float32) / 255.0
    batch = compute_cde(model, frames)
    for i in range(5):
        np.testing.assert_allclose(batch[i], compute_cde(model, frames[i]), atol=1e-6)


class TestThreshold:
    def test_zero_map(self):
        assert threshold_mask(np.zeros((5, 5)), 0.1).values.sum() == 0

    def test_boundary_inclusive(self):
        m = threshold_mask(np.full((5, 5), 0.5), 0.5)
        assert np.all(m.values == 1) and m.threshold_used == 0.5

    def test_monotone_and_binary(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            cde = rng.normal(size=(16, 16))
            e1, e2 = np.sort(rng.normal(size=2))
            m1, m2 = threshold_mask(cde, e1).values, threshold_mask(cde, e2).values
            assert set(np.unique(m1)) <= {0, 1}
            assert np.all(m2 <= m1)


def test_calibrate_epsilon_quantile():
    vals = np.arange(101, dtype=float) / 100
    assert calibrate_epsilon(vals, 0.9) == pytest.approx(0.9)
    with pytest.raises(ValueError):
        calibrate_epsilon(vals, 1.5)


def test_extract_cardinality_and_order(model, store):
    ds = extract_masked_dataset(model, store, epsilon=0.0)
    assert len(ds) == store.num_frames
    assert [len(m) for m in ds.store.masks] == store.episode_lengths
    frames = [f for f, _ in ds.pairs()]
    np.testing.assert_array_equal(frames[3], store.episodes[0][3])
    cde3 = compute_cde(model, store.frame(0, 3))
    np.testing.assert_array_equal(ds.store.masks[0][3], threshold_mask(cde3.astype(np.float32), 0.0).values)


def test_extract_single_frame(model, store):
    one = EpisodeStore(episodes=[store.episodes[0][:1]])
    ds = extract_masked_dataset(model, one, quantile=0.9)
    assert len(list(ds.pairs())) == 1
    # a 0.9 quantile threshold keeps about a tenth of the pixels
    assert 0.05 < ds.store.masks[0][0].mean() <= 0.15


def test_extract_reports_frame_index(model, store, monkeypatch):
    import vai.attention as att

    def boom(m, frames):
        raise RuntimeError("bad frame")

    monkeypatch.setattr(att, "compute_cde", boom)
    with pytest.raises(RuntimeError, match="episode 0, frame 0"):
        extract_masked_dataset(model, store)


def test_load_masked_dataset(model, store):
    ds = extract_masked_dataset(model, store, epsilon=0.25)
    assert load_masked_dataset(ds.store).epsilon == 0.25
    with pytest.raises(ValueError):
        load_masked_dataset(store)
