import math

import numpy as np
import pytest
import torch

from vai.envs import SpriteWorld, SpriteWorldConfig
from vai.keypoint import (
    TransporterConfig,
    TransporterModel,
    detect_keypoints,
    grid_coordinates,
    load_transporter,
    reconstruction_loss,
    render_heatmap,
    save_transporter,
    train_transporter,
    transport_features,
)
from vai.obs_data import EpisodeStore, collect_random_transitions


def scalar_heatmap(keypoints, grid, sigma):
    """Reference: plain-Python loops over cells and keypoints."""
    h, w = grid
    out = np.zeros(grid)
    for i in range(h):
        for j in range(w):
            x, y = (j + 0.5) / w, (i + 0.5) / h
            out[i, j] = max(math.exp(-((x - kx) ** 2 + (y - ky) ** 2) / (2 * sigma ** 2)) for kx, ky in keypoints)
    return out


def test_heatmap_center_is_one():
    heat = render_heatmap(np.array([[0.5, 0.5]]), (21, 21), 0.1)
    assert heat[10, 10].item() == 1.0
    assert heat.max().item() == 1.0


def test_heatmap_duplicate_keypoints_idempotent():
    one = render_heatmap(np.array([[0.3, 0.7]]), (21, 21), 0.1)
    two = render_heatmap(np.array([[0.3, 0.7], [0.3, 0.7]]), (21, 21), 0.1)
    assert torch.equal(one, two)


def test_heatmap_closed_form_value():
    kp = torch.tensor([[[0.25, 0.25]]], dtype=torch.float64)
    coords = torch.tensor([0.25, 0.35], dtype=torch.float64)
    value = torch.exp(-((coords - kp[0, 0]) ** 2).sum() / (2 * 0.1 ** 2))
    assert value.item() == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert math.exp(-0.5) == pytest.approx(0.6065, abs=1e-4)
    # 10 columns x 20 rows: cell (6, 2) is centred at (0.25, 0.325), 0.1 below the keypoint
    heat = render_heatmap(np.array([[0.25, 0.225]]), (20, 10), 0.1)
    cell = heat[6, 2].item()
    assert cell == pytest.approx(math.exp(-0.5), abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_heatmap_matches_scalar_reference(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 6))
    kps = rng.uniform(0, 1, size=(k, 2))
    sigma = float(rng.uniform(0.05, 0.3))
    ours = render_heatmap(kps, (9, 7), sigma).numpy()
    ref = scalar_heatmap(kps, (9, 7), sigma)
    np.testing.assert_allclose(ours, ref, atol=1e-6)
    assert ours.max() <= 1.0 and ours.min() > 0.0


def test_heatmap_lower_bound_from_nearest_grid_point():
    rng = np.random.default_rng(3)
    kps = rng.uniform(0, 1, size=(3, 2))
    sigma = 0.1
    heat = render_heatmap(kps, (21, 21), sigma).numpy()
    coords = grid_coordinates((21, 21)).numpy().reshape(-1, 2)
    d = min(np.linalg.norm(coords - kp, axis=1).min() for kp in kps)
    assert heat.max() >= math.exp(-d ** 2 / (2 * sigma ** 2)) - 1e-12


def test_heatmap_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        render_heatmap(np.zeros((0, 2)), (4, 4), 0.1)


def test_transport_degenerate_heatmaps():
    rng = np.random.default_rng(0)
    fs = torch.tensor(rng.normal(size=(4, 5, 5)))
    ft = torch.tensor(rng.normal(size=(4, 5, 5)))
    zero = torch.zeros(5, 5, dtype=torch.float64)
    one = torch.ones(5, 5, dtype=torch.float64)
    assert torch.equal(transport_features(fs, ft, zero, zero), fs)
    assert torch.equal(transport_features(fs, ft, torch.tensor(rng.uniform(size=(5, 5))), one), ft)


@pytest.mark.parametrize("seed", range(5))
def test_transport_matches_cellwise_evaluation(seed):
    rng = np.random.default_rng(seed)
    fs, ft = rng.normal(size=(2, 1, 2, 2))
    hs, ht = rng.uniform(size=(2, 2, 2))
    out = transport_features(torch.tensor(fs), torch.tensor(ft), torch.tensor(hs), torch.tensor(ht)).numpy()
    for c in range(1):
        for i in range(2):
            for j in range(2):
                expected = fs[c, i, j] * (1 - hs[i, j]) * (1 - ht[i, j]) + ft[c, i, j] * ht[i, j]
                assert out[c, i, j] == pytest.approx(expected, abs=1e-6)


def test_transport_grid_mismatch():
    with pytest.raises(ValueError, match="grid"):
        transport_features(torch.zeros(2, 3, 3), torch.zeros(2, 3, 3), torch.zeros(3, 3), torch.zeros(4, 4))


def test_reconstruction_loss_values():
    a = np.zeros((4, 4, 3))
    assert reconstruction_loss(a, a).item() == 0.0
    b = a.copy()
    b[0, 0, 0] += 0.5
    b[2, 3, 1] += 0.5
    assert reconstruction_loss(a, b).item() == pytest.approx(0.5, abs=1e-12)
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=(2, 4, 4, 3))
    assert reconstruction_loss(x, y).item() == reconstruction_loss(y, x).item()
    with pytest.raises(ValueError, match="shape mismatch"):
        reconstruction_loss(np.zeros((4, 4)), np.zeros((4, 5)))


def test_reconstruction_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    target = torch.tensor(rng.uniform(size=(4, 4)))
    recon = torch.tensor(rng.uniform(size=(4, 4)), requires_grad=True)
    reconstruction_loss(target, recon).backward()
    h = 1e-4
    fd = np.zeros((4, 4))
    for idx in np.ndindex(4, 4):
        plus = recon.detach().clone()
        minus = recon.detach().clone()
        plus[idx] += h
        minus[idx] -= h
        fd[idx] = (reconstruction_loss(target, plus) - reconstruction_loss(target, minus)).item() / (2 * h)
    rel = np.abs(recon.grad.numpy() - fd) / np.maximum(np.abs(fd), 1e-12)
    assert rel.max() < 1e-3


def small_config(**kw):
    base = dict(height=32, width=32, hidden=16, feature_channels=8, steps=5, batch_size=4)
    base.update(kw)
    return TransporterConfig(**base)


def test_detect_keypoints_range_and_determinism():
    torch.manual_seed(0)
    model = TransporterModel(small_config())
    zero = np.zeros((32, 32, 3), np.float32)
    kp = detect_keypoints(model, zero)
    assert kp.shape == (4, 2)
    assert np.all((kp >= 0) & (kp <= 1))
    rng = np.random.default_rng(0)
    for _ in range(10):
        f = rng.uniform(size=(32, 32, 3)).astype(np.float32)
        a, b = detect_keypoints(model, f), detect_keypoints(model, f[:, ::-1].copy())
        assert np.all((a >= 0) & (a <= 1)) and np.all((b >= 0) & (b <= 1))
        np.testing.assert_array_equal(a, detect_keypoints(model, f))


def test_detect_keypoints_shape_error():
    model = TransporterModel(small_config())
    with pytest.raises(ValueError, match=r"expected \(32, 32, 3\)"):
        detect_keypoints(model, np.zeros((84, 84, 3), np.float32))


def test_static_frames_loss_drops_fast():
    frame = np.zeros((32, 32, 3), np.uint8)
    frame[8:16, 8:16] = (200, 40, 40)
    store = EpisodeStore(episodes=[np.stack([frame] * 5), np.stack([frame] * 5)])
    model = train_transporter(store, small_config(steps=150, lr=3e-3), seed=0)
    assert np.mean(model.history[-10:]) < 0.05 * np.mean(model.history[:10])


def test_training_is_deterministic(tmp_path):
    env = SpriteWorld(SpriteWorldConfig(height=32, width=32))
    store = collect_random_transitions(env, 60, 0)
    a = train_transporter(store, small_config(steps=8), seed=3)
    b = train_transporter(store, small_config(steps=8), seed=3)
    assert a.history == b.history
    save_transporter(a, tmp_path / "a.ckpt")
    save_transporter(b, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    loaded = load_transporter(tmp_path / "a.ckpt")
    f = store.frame(0, 3)
    np.testing.assert_array_equal(detect_keypoints(loaded, f), detect_keypoints(a, f))


def test_divergence_aborts_with_step(monkeypatch):
    import vai.keypoint as kpmod
    from vai.training import TrainingDivergence

    orig = kpmod.reconstruction_loss
    monkeypatch.setattr(kpmod, "reconstruction_loss", lambda t, r: orig(t, r) * float("nan"))
    store = EpisodeStore(episodes=[np.zeros((3, 32, 32, 3), np.uint8)] * 2)
    with pytest.raises(TrainingDivergence, match="step 0"):
        train_transporter(store, small_config(steps=3), seed=0)
