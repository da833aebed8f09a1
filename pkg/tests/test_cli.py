import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from vai.cli import content_hash, main
from vai.obs_data import load_store

STAGES = ["collect", "train-keypoints", "extract-masks", "train-adapter", "train-policy", "evaluate", "visualize"]

TINY = """\
env.height = 32
env.width = 32
env.episode_length = 12
dataset.count = 40
transporter.steps = 3
transporter.hidden = 16
transporter.feature_channels = 8
transporter.batch_size = 4
adapter.steps = 3
adapter.hidden = 8
adapter.feature_channels = 8
adapter.batch_size = 4
augment.pad = 2
policy.steps = 12
policy.seed_steps = 4
policy.action_repeat = 2
sac.batch_size = 4
sac.hidden = 32
sac.feature_dim = 8
sac.downsample = 1
evaluation.textures = grid,wood
evaluation.seeds = 2
evaluation.episodes = 1
visualize.count = 6
"""


def write_config(tmp_path: Path, out: Path, extra: str = "") -> Path:
    cfg = tmp_path / f"{out.name}.cfg"
    cfg.write_text(TINY + f"run.output_dir = {out}\n" + extra)
    return cfg


def run_pipeline(cfg: Path) -> None:
    for stage in STAGES:
        assert main([stage, "--config", str(cfg)]) == 0, stage


def artifact_hashes(out: Path) -> dict[str, str]:
    # run logs carry wall time, everything else must be reproducible
    return {str(p.relative_to(out)): content_hash(p) for p in sorted(out.rglob("*"))
            if p.is_file() and p.parent.name != "logs"}


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    outs = []
    for name in ("a", "b"):
        out = base / name
        run_pipeline(write_config(base, out))
        outs.append(out)
    return outs


def test_pipeline_completes(pipeline_runs):
    out = pipeline_runs[0]
    for name in ("dataset/manifest.txt", "transporter.ckpt", "masked/manifest.txt", "adapter.ckpt", "agent.ckpt",
                 "evaluation/records.jsonl", "evaluation/summary.txt", "visualize/adapted_grid.png",
                 "visualize/overlay_grid.png"):
        assert (out / name).is_file(), name
    for stage in STAGES:
        log = (out / "logs" / f"{stage}.run.log").read_text()
        assert f"command = {stage}" in log and "wall_time_seconds" in log and "run.seed = 0" in log


def test_pipeline_byte_identical(pipeline_runs):
    a, b = (artifact_hashes(o) for o in pipeline_runs)
    assert a.keys() == b.keys() and len(a) > 50
    assert a == b


def test_visualize_grid_layout(pipeline_runs):
    img = np.asarray(Image.open(pipeline_runs[0] / "visualize" / "adapted_grid.png"))
    pad = 2
    assert img.shape == (2 * (32 + pad) + pad, 6 * (32 + pad) + pad, 3)


def test_evaluate_records(pipeline_runs):
    lines = (pipeline_runs[0] / "evaluation" / "records.jsonl").read_text().splitlines()
    recs = [json.loads(x) for x in lines]
    assert len(recs) == 2 * 2 * 1
    assert {r["texture"] for r in recs} == {"grid", "wood"}


def test_count_flag(tmp_path):
    cfg = write_config(tmp_path, tmp_path / "out")
    assert main(["collect", "--config", str(cfg), "--count", "10"]) == 0
    assert load_store(tmp_path / "out" / "dataset").num_frames == 10


def test_generic_key_override(tmp_path):
    cfg = write_config(tmp_path, tmp_path / "out")
    assert main(["collect", "--config", str(cfg), "--dataset.count", "7"]) == 0
    assert load_store(tmp_path / "out" / "dataset").num_frames == 7
    assert main(["collect", "--config", str(cfg), "--set", "dataset.count=5"]) == 0
    assert load_store(tmp_path / "out" / "dataset").num_frames == 5


def test_missing_upstream_artifact(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = write_config(tmp_path, out)
    assert main(["collect", "--config", str(cfg)]) == 0
    assert main(["extract-masks", "--config", str(cfg)]) == 2
    assert str(out / "transporter.ckpt") in capsys.readouterr().err


def test_unknown_key_is_usage_error(tmp_path, capsys):
    cfg = write_config(tmp_path, tmp_path / "out", "adapter.lamda = 2\n")
    assert main(["collect", "--config", str(cfg)]) == 1
    assert "adapter.lamda" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["collect", "--bogus", "1"]) == 1
    assert main(["collect", "--config", str(tmp_path / "missing.cfg")]) == 1


def test_divergence_exit_code(tmp_path, monkeypatch):
    import vai.keypoint as kp
    from vai.training import TrainingDivergence

    cfg = write_config(tmp_path, tmp_path / "out")
    assert main(["collect", "--config", str(cfg)]) == 0

    def diverge(*a, **k):
        raise TrainingDivergence("transporter", 0, float("nan"))

    monkeypatch.setattr(kp, "train_transporter", diverge)
    assert main(["train-keypoints", "--config", str(cfg)]) == 3


@pytest.fixture(scope="module")
def trained_dir(pipeline_runs):
    return pipeline_runs[0]


def test_lambda_zero_isolates_mask_term(tmp_path, trained_dir):
    import shutil

    out = tmp_path / "out"
    shutil.copytree(trained_dir / "masked", out / "masked")
    cfg = write_config(tmp_path, out)
    assert main(["train-adapter", "--config", str(cfg), "--lambda", "0"]) == 0
    for line in (out / "metrics" / "adapter.jsonl").read_text().splitlines():
        r = json.loads(line)
        assert r["loss"] == pytest.approx(r["mask"], rel=1e-6)


def test_denoise_alpha_zero_matches_disabled(tmp_path, trained_dir):
    import shutil

    out = tmp_path / "out"
    out.mkdir()
    for name in ("agent.ckpt", "adapter.ckpt"):
        shutil.copy(trained_dir / name, out / name)
    cfg = write_config(tmp_path, out)
    assert main(["evaluate", "--config", str(cfg)]) == 0
    plain = (out / "evaluation" / "records.jsonl").read_bytes()
    assert main(["evaluate", "--config", str(cfg), "--denoise-alpha", "0"]) == 0
    assert (out / "evaluation" / "records.jsonl").read_bytes() == plain


class TestVisualizeInputs:
    @pytest.fixture()
    def setup(self, tmp_path, trained_dir):
        import shutil

        out = tmp_path / "out"
        out.mkdir()
        shutil.copy(trained_dir / "adapter.ckpt", out / "adapter.ckpt")
        return write_config(tmp_path, out), out

    def test_empty_input(self, setup):
        cfg, _ = setup
        assert main(["visualize", "--config", str(cfg), "--input"]) == 1

    def test_all_unreadable(self, setup, tmp_path):
        cfg, _ = setup
        bad = tmp_path / "bad.png"
        bad.write_text("nope")
        assert main(["visualize", "--config", str(cfg), "--input", str(bad)]) == 2

    def test_partial_failure_warns(self, setup, tmp_path, capsys):
        cfg, out = setup
        good = tmp_path / "good.png"
        Image.fromarray(np.full((32, 32, 3), 90, np.uint8)).save(good)
        bad = tmp_path / "bad.png"
        bad.write_text("nope")
        assert main(["visualize", "--config", str(cfg), "--input", str(good), str(bad)]) == 0
        assert "bad.png" in capsys.readouterr().err
        first = (out / "visualize" / "adapted_grid.png").read_bytes()
        assert main(["visualize", "--config", str(cfg), "--input", str(good), str(bad)]) == 0
        assert (out / "visualize" / "adapted_grid.png").read_bytes() == first
