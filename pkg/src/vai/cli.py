"""Command-line entry point: ``vai <command> --config PATH [--key value ...]``.

Every command reads and writes artifacts under ``run.output_dir``:

    dataset/            collected frames (collect)
    transporter.ckpt    keypoint model (train-keypoints)
    masked/             frames plus extracted masks (extract-masks)
    adapter.ckpt        observation adapter (train-adapter)
    agent.ckpt          SAC agent (train-policy)
    evaluation/         records.jsonl, summary.txt, summary.json (evaluate)
    visualize/          adapted_grid.png, overlay_grid.png (visualize)
    logs/<command>.run.log

Exit codes: 0 success, 1 usage or config error, 2 missing or unreadable
artifact, 3 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from vai.checkpoint import CheckpointError
from vai.config import ConfigError, PipelineConfig, load_config, serialize_config, set_key
from vai.obs_data import StoreError, to_float

logger = logging.getLogger("vai")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class MissingArtifact(Exception):
    def __init__(self, path: Path, what: str):
        super().__init__(f"missing {what}: {path}")
        self.path = path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ----------------------------------------------------------------------------
# artifact helpers

class Run:
    def __init__(self, command: str, cfg: PipelineConfig):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.run.output_dir)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.start = time.perf_counter()

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str, what: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifact(p, what)
        self.inputs[name] = content_hash(p)
        return p

    def produced(self, name: str) -> Path:
        p = self.path(name)
        self.outputs[name] = content_hash(p)
        return p

    def write_log(self) -> Path:
        log = self.path(f"logs/{self.command}.run.log")
        log.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"command = {self.command}"]
        lines += [f"input {k} = {v}" for k, v in sorted(self.inputs.items())]
        lines += [f"output {k} = {v}" for k, v in sorted(self.outputs.items())]
        lines.append(f"wall_time_seconds = {time.perf_counter() - self.start:.3f}")
        lines.append("")
        lines.append(serialize_config(self.cfg))
        log.write_text("\n".join(lines))
        return log


def content_hash(path: Path) -> str:
    """sha256 over a file, or over every file (name and bytes) under a directory."""
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _write_jsonl(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _make_env(cfg: PipelineConfig, texture: str | None = None):
    from vai.envs import SpriteWorld
    return SpriteWorld(cfg.env, texture=texture or cfg.dataset.texture, texture_seed=cfg.run.seed)


def _load_store(run: Run, name: str, what: str):
    from vai.obs_data import load_store
    return load_store(run.require(name, what))


# ----------------------------------------------------------------------------
# commands

def cmd_collect(run: Run, args) -> None:
    from vai.obs_data import collect_random_transitions, save_store

    cfg = run.cfg
    store = collect_random_transitions(_make_env(cfg), cfg.dataset.count, cfg.run.seed)
    save_store(store, _fresh_dir(run.path("dataset")))
    run.produced("dataset")
    print(f"collected {store.num_frames} frames in {len(store.episodes)} episodes -> {run.path('dataset')}")


def cmd_train_keypoints(run: Run, args) -> None:
    from vai.keypoint import save_transporter, train_transporter

    store = _load_store(run, "dataset", "dataset (run `vai collect` first)")
    h, w, c = store.frame_shape
    tcfg = dataclasses.replace(run.cfg.transporter, height=h, width=w, channels=c)
    model = train_transporter(store, tcfg, seed=run.cfg.run.seed, log_every=max(1, tcfg.steps // 20))
    run.out.mkdir(parents=True, exist_ok=True)
    save_transporter(model, run.path("transporter.ckpt"))
    _write_jsonl(run.path("metrics/keypoints.jsonl"), ({"step": i, "loss": v} for i, v in enumerate(model.history)))
    run.produced("transporter.ckpt")
    print(f"transporter trained for {tcfg.steps} steps, final loss {model.history[-1]:.4f}")


def cmd_extract_masks(run: Run, args) -> None:
    from vai.attention import extract_masked_dataset
    from vai.keypoint import load_transporter
    from vai.obs_data import save_store

    model = load_transporter(run.require("transporter.ckpt", "transporter checkpoint"))
    store = _load_store(run, "dataset", "dataset")
    a = run.cfg.attention
    ds = extract_masked_dataset(model, store, epsilon=a.epsilon, quantile=a.quantile,
                                calibration_frames=a.calibration_frames)
    save_store(ds.store, _fresh_dir(run.path("masked")))
    run.produced("masked")
    fg = float(np.mean([m.mean() for m in ds.store.masks]))
    print(f"extracted {len(ds)} masks at epsilon {ds.epsilon:.5f} (mean foreground fraction {fg:.3f})")


def cmd_train_adapter(run: Run, args) -> None:
    from vai.attention import load_masked_dataset
    from vai.invariance import save_adapter, train_adapter

    ds = load_masked_dataset(_load_store(run, "masked", "masked dataset (run `vai extract-masks` first)"))
    cfg = run.cfg
    h, w, _ = ds.store.frame_shape
    aug = cfg.augment
    if tuple(aug.crop_size) != (h, w):
        aug = dataclasses.replace(aug, crop_size=(h, w))
    model = train_adapter(ds, aug, cfg.adapter, seed=cfg.run.seed, log_every=max(1, cfg.adapter.steps // 20))
    run.out.mkdir(parents=True, exist_ok=True)
    save_adapter(model, run.path("adapter.ckpt"))
    _write_jsonl(run.path("metrics/adapter.jsonl"), ({"step": i, **r} for i, r in enumerate(model.history)))
    run.produced("adapter.ckpt")
    last = model.history[-1]
    print(f"adapter trained (lambda={cfg.adapter.lam}): loss {last['loss']:.4f} "
          f"= mask {last['mask']:.4f} + lambda * feature {last['feature']:.4f}")


def cmd_train_policy(run: Run, args) -> None:
    from vai.invariance import load_adapter
    from vai.policy import train_policy
    from vai.sac import save_agent

    cfg = run.cfg
    pcfg = cfg.policy_config()
    adapter = load_adapter(run.require("adapter.ckpt", "adapter checkpoint")) if pcfg.use_adapter else None
    records = []
    agent = train_policy(_make_env(cfg), adapter, pcfg, seed=cfg.run.seed, record=records.append)
    run.out.mkdir(parents=True, exist_ok=True)
    save_agent(agent, run.path("agent.ckpt"), {
        "use_adapter": pcfg.use_adapter, "frame_stack": pcfg.frame_stack, "action_repeat": pcfg.action_repeat})
    _write_jsonl(run.path("metrics/policy.jsonl"), records)
    run.produced("agent.ckpt")
    tail = agent.reward_log[-10:]
    print(f"policy trained for {pcfg.steps} steps over {len(agent.reward_log)} episodes; "
          f"last {len(tail)} episode rewards mean {np.mean(tail) if tail else float('nan'):.2f}")


def cmd_evaluate(run: Run, args) -> None:
    from vai.invariance import load_adapter
    from vai.policy import evaluate_policy, format_summary
    from vai.sac import load_agent

    cfg = run.cfg
    ev = cfg.evaluation
    agent, meta = load_agent(run.require("agent.ckpt", "agent checkpoint (run `vai train-policy` first)"))
    adapter = load_adapter(run.require("adapter.ckpt", "adapter checkpoint")) if meta.get("use_adapter") else None
    seeds = list(range(ev.seeds))
    env = _make_env(cfg)
    rows, records = {}, []
    for texture in ev.textures:
        env.set_texture(texture)
        res = evaluate_policy(env, agent, adapter, ev.episodes, seeds, denoise=ev.denoise_alpha,
                              action_repeat=meta.get("action_repeat", 4), frame_stack=meta.get("frame_stack", 3))
        rows[texture] = res
        for s in seeds:
            for e, r in enumerate(res["rewards"][str(s)]):
                records.append({"texture": texture, "seed": s, "episode": e, "reward": r})
    out = _fresh_dir(run.path("evaluation"))
    _write_jsonl(out / "records.jsonl", records)
    summary = format_summary(rows)
    (out / "summary.txt").write_text(summary + "\n")
    (out / "summary.json").write_text(json.dumps(
        {t: {k: v for k, v in r.items() if k != "rewards"} for t, r in rows.items()}, indent=2, sort_keys=True))
    run.produced("evaluation")
    print(summary)


def _input_paths(items: list[str]) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.rglob("*") if q.is_file() and not q.name.startswith(("gt_", "mask_"))
                                and q.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp"}))
        else:
            paths.append(p)
    return paths


def cmd_visualize(run: Run, args) -> None:
    from vai.attention import calibrate_epsilon, compute_cde, threshold_mask
    from vai.invariance import adapt_observation, load_adapter
    from vai.keypoint import detect_keypoints, load_transporter
    from vai.visualize import comparison_grid, load_frames, overlay_grid, save_png

    cfg = run.cfg
    adapter = load_adapter(run.require("adapter.ckpt", "adapter checkpoint"))
    shape = (cfg.env.height, cfg.env.width)
    if args.input is not None:
        paths = _input_paths(args.input)
        if not paths:
            raise UsageError("no input frames given")
        frames, warnings = load_frames(paths, shape)
        for w in warnings:
            print(f"warning: {w}", file=sys.stderr)
        if len(frames) == 0:
            raise MissingArtifact(paths[0], "readable input frame (all inputs failed)")
    else:
        store = _load_store(run, "dataset", "dataset")
        frames = store.all_frames()[:cfg.visualize.count]
        if len(frames) == 0:
            raise UsageError("dataset holds no frames")
    frames = frames[:cfg.visualize.count] if cfg.visualize.count > 0 else frames
    raw = np.stack([to_float(f) for f in frames])
    adapted = np.stack([adapt_observation(adapter, f) for f in raw])
    out = _fresh_dir(run.path("visualize"))
    save_png(comparison_grid(raw, adapted), out / "adapted_grid.png")
    tp = run.path("transporter.ckpt")
    if tp.exists():
        run.require("transporter.ckpt", "transporter checkpoint")
        model = load_transporter(tp)
        if model.config.height == raw.shape[1] and model.config.width == raw.shape[2]:
            cdes = compute_cde(model, raw)
            eps = cfg.attention.epsilon
            if eps is None:
                eps = calibrate_epsilon(cdes, cfg.attention.quantile)
            kps = [detect_keypoints(model, f) for f in raw]
            masks = [threshold_mask(c, eps).values for c in cdes]
            save_png(overlay_grid(raw, kps, masks), out / "overlay_grid.png")
        else:
            print("warning: transporter frame size differs from inputs; skipping overlay", file=sys.stderr)
    run.produced("visualize")
    print(f"wrote {len(raw)} raw/adapted pairs -> {out}")


COMMANDS = {
    "collect": cmd_collect,
    "train-keypoints": cmd_train_keypoints,
    "extract-masks": cmd_extract_masks,
    "train-adapter": cmd_train_adapter,
    "train-policy": cmd_train_policy,
    "evaluate": cmd_evaluate,
    "visualize": cmd_visualize,
}

# command flag -> config key
FLAG_KEYS = {
    "count": "dataset.count",
    "lam": "adapter.lam",
    "denoise_alpha": "evaluation.denoise_alpha",
    "seeds": "evaluation.seeds",
    "episodes": "evaluation.episodes",
    "seed": "run.seed",
    "output_dir": "run.output_dir",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vai", description="Visual-distractor-robust RL pipeline.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="config file of 'section.key = value' lines")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--seed")
        if name == "collect":
            p.add_argument("--count")
            p.add_argument("--texture")
        if name == "train-adapter":
            p.add_argument("--lambda", dest="lam")
        if name == "evaluate":
            p.add_argument("--texture", help="texture name(s), comma-separated")
            p.add_argument("--denoise-alpha", dest="denoise_alpha")
            p.add_argument("--seeds", help="number of evaluation seeds")
            p.add_argument("--episodes", help="episodes per seed")
        if name == "visualize":
            p.add_argument("--input", nargs="*", help="image files or directories")
    return parser


def resolve_config(args, extra: list[str]) -> PipelineConfig:
    cfg = load_config(args.config)
    overrides = []
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides.append(tuple(item.split("=", 1)))
    # any leftover --section.key value pairs are config overrides too
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            value = extra[i + 1]
            i += 2
        else:
            raise UsageError(f"missing value for {tok}")
        if "." not in key:
            raise UsageError(f"unknown option {tok}")
        overrides.append((key.replace("-", "_"), value))
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append((key, value))
    texture = getattr(args, "texture", None)
    if texture is not None:
        overrides.append(("dataset.texture" if args.command == "collect" else "evaluation.textures", texture))
    for key, value in overrides:
        set_key(cfg, key.strip(), value)
    return cfg


def main(argv: list[str] | None = None) -> int:
    from vai.training import TrainingDivergence

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        cfg = resolve_config(args, extra)
    except (UsageError, ConfigError) as exc:
        print(f"vai: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    run = Run(args.command, cfg)
    try:
        COMMANDS[args.command](run, args)
    except (UsageError, ConfigError) as exc:
        print(f"vai: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifact, StoreError, CheckpointError, FileNotFoundError) as exc:
        print(f"vai: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDivergence as exc:
        print(f"vai: error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    run.write_log()
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
