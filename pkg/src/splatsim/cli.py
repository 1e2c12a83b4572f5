"""Command-line entry point tying the pipeline stages together.

Stages share one checkpoint format: train-background writes a background-only
checkpoint, train-foreground adds objects next to an existing background (when
given one), fuse finetunes the combination, and render / simulate / eval /
serve consume the result.

Exit codes: 0 success, 1 usage error, 2 input validation failure, 3 runtime
failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch

from .background import BackgroundTrainConfig, train_background
from .errors import SplatError
from .foreground import ForegroundObject, ForegroundTrainConfig, train_foreground
from .fusion import (FusedScene, FusionTrainConfig, apply_camera_edits, compose,
                     evaluate, fuse_finetune, load_edits, simulate)
from .losses import LossWeights
from .optim import DEFAULT_LRS, DensifyConfig
from .rasterizer import render, save_png
from .scene_io import load_checkpoint, load_scene, save_checkpoint, save_scene
from .synthetic import (BlinkSpec, SceneConfig, VehicleSpec,
                        generate_synthetic_scene)

# Iteration defaults at --iters-scale 1.0.
BACKGROUND_PHASE_ITERS = 15000
FOREGROUND_ITERS = 5000
FUSION_ITERS = 10000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); remap to exit code 1
        raise UsageError(message)


def _scaled(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise SplatError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise SplatError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(cfg, dict):
        raise SplatError(f"{path}: config must be a JSON object")
    return cfg


def _dataclass_update(instance, overrides: dict, where: str):
    names = {f.name for f in dataclasses.fields(instance)}
    for key, value in overrides.items():
        if key not in names:
            raise SplatError(f"{where}: unknown field {key!r}")
        setattr(instance, key, value)
    return instance


def _weights(cfg: dict) -> LossWeights:
    return _dataclass_update(LossWeights(), cfg.get("weights", {}), "config.weights")


def _densify(cfg: dict, default: DensifyConfig | None) -> DensifyConfig | None:
    if "densify" not in cfg:
        return default
    spec = cfg["densify"]
    if spec is None:
        return None
    return _dataclass_update(default or DensifyConfig(), spec, "config.densify")


def _lrs(cfg: dict) -> dict:
    lrs = cfg.get("lrs", {})
    for key in lrs:
        if key not in DEFAULT_LRS:
            raise SplatError(f"config.lrs: unknown parameter group {key!r}")
    return lrs


def _require(args, *names):
    for name in names:
        if getattr(args, name.replace("-", "_")) is None:
            raise UsageError(f"--{name} is required for this command")


def _load_fused(args) -> tuple:
    bundle = load_scene(args.scene)
    background, objects, config = load_checkpoint(args.checkpoint)
    if background is None:
        raise SplatError(f"{args.checkpoint}: checkpoint has no background")
    return bundle, FusedScene(background=background, objects=objects,
                              config=config)


def _edits(args) -> list:
    if getattr(args, "edits", None) is None:
        return []
    if not Path(args.edits).exists():
        raise SplatError(f"edits file not found: {args.edits}")
    return load_edits(args.edits)


# --- subcommands ------------------------------------------------------------

def cmd_generate_scene(args, cfg):
    _require(args, "out")
    scene_cfg = SceneConfig(seed=args.seed or 0)
    overrides = dict(cfg.get("scene", {}))
    vehicles = overrides.pop("vehicles", None)
    _dataclass_update(scene_cfg, overrides, "config.scene")
    if args.seed is not None:
        scene_cfg.seed = args.seed
    if vehicles is not None:
        scene_cfg.vehicles = []
        for v in vehicles:
            v = dict(v)
            blink = v.pop("blink", None)
            spec = _dataclass_update(VehicleSpec(object_id=v.pop("object_id")),
                                     v, "config.scene.vehicles")
            if blink is not None:
                spec.blink = _dataclass_update(BlinkSpec(), blink,
                                               "config.scene.vehicles.blink")
            scene_cfg.vehicles.append(spec)
    elif not scene_cfg.vehicles:
        scene_cfg.vehicles = [VehicleSpec(object_id=1)]
    bundle = generate_synthetic_scene(scene_cfg, args.out)
    print(json.dumps({"out": str(args.out), "frames": len(bundle.frames),
                      "points": int(len(bundle.points_xyz))}))
    return 0


def cmd_train_background(args, cfg):
    _require(args, "scene", "out")
    bundle = load_scene(args.scene)
    iters = _scaled(BACKGROUND_PHASE_ITERS, args.iters_scale)
    config = BackgroundTrainConfig(
        phase1_iters=iters, phase2_iters=iters, weights=_weights(cfg),
        seed=args.seed or 0, densify=_densify(cfg, DensifyConfig()),
        lrs=_lrs(cfg))
    cloud = train_background(bundle, config)
    save_checkpoint(args.out, background=cloud,
                    config={"stage": "background"})
    print(json.dumps({"out": str(args.out), "gaussians": cloud.count}))
    return 0


def cmd_train_foreground(args, cfg):
    _require(args, "scene", "out")
    bundle = load_scene(args.scene)
    config = ForegroundTrainConfig(
        iters=_scaled(FOREGROUND_ITERS, args.iters_scale),
        weights=_weights(cfg), seed=args.seed or 0,
        densify=_densify(cfg, ForegroundTrainConfig().densify), lrs=_lrs(cfg))
    objects = train_foreground(bundle, config)
    background = None
    if args.checkpoint is not None:
        background, prior_objects, _ = load_checkpoint(args.checkpoint)
        objects = {**prior_objects, **objects}
    save_checkpoint(args.out, background=background, objects=objects,
                    config={"stage": "foreground"})
    print(json.dumps({"out": str(args.out), "objects": sorted(objects)}))
    return 0


def cmd_fuse(args, cfg):
    _require(args, "scene", "checkpoint", "out")
    bundle, fused = _load_fused(args)
    config = FusionTrainConfig(iters=_scaled(FUSION_ITERS, args.iters_scale),
                               weights=_weights(cfg), seed=args.seed or 0,
                               lrs=_lrs(cfg))
    fused = fuse_finetune(bundle, fused, config)
    save_checkpoint(args.out, background=fused.background,
                    objects=fused.objects, config={"stage": "fused"})
    print(json.dumps({"out": str(args.out)}))
    return 0


def cmd_render(args, cfg):
    _require(args, "scene", "checkpoint", "out")
    bundle, fused = _load_fused(args)
    frame = bundle.frame_by_index(args.frame)
    cloud, view = compose(fused, frame.index, bundle.view(frame), _edits(args))
    with torch.no_grad():
        out = render(cloud, view, threads=args.threads)
    save_png(out.image, args.out)
    print(json.dumps({"out": str(args.out), "frame": frame.index}))
    return 0


def cmd_simulate(args, cfg):
    _require(args, "scene", "checkpoint", "out")
    bundle, fused = _load_fused(args)
    metrics = simulate(fused, bundle, _edits(args), args.out,
                       threads=args.threads)
    print(json.dumps({"out": str(args.out),
                      "frames": len(metrics["frames"])}))
    return 0


def cmd_eval(args, cfg):
    _require(args, "scene", "checkpoint")
    bundle, fused = _load_fused(args)
    result = evaluate(fused, bundle, split=args.split, threads=args.threads)
    print(json.dumps(result, indent=1, sort_keys=True))
    if args.out is not None:
        Path(args.out).write_text(json.dumps(result, indent=1, sort_keys=True))
    return 0


def cmd_serve(args, cfg):
    _require(args, "scene", "checkpoint")
    import uvicorn

    from .service import create_app
    bundle, fused = _load_fused(args)
    static = args.static
    if static is not None and not Path(static).is_dir():
        raise SplatError(f"static directory not found: {static}")
    app = create_app(bundle, fused, threads=args.threads, static_dir=static)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


COMMANDS = {
    "generate-scene": cmd_generate_scene,
    "train-background": cmd_train_background,
    "train-foreground": cmd_train_foreground,
    "fuse": cmd_fuse,
    "render": cmd_render,
    "simulate": cmd_simulate,
    "eval": cmd_eval,
    "serve": cmd_serve,
}


def build_parser() -> _Parser:
    parser = _Parser(prog="splatsim",
                     description="Constrained Gaussian-splat scene toolkit.")
    sub = parser.add_subparsers(dest="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scene", help="scene bundle directory")
        p.add_argument("--checkpoint", help="input checkpoint path")
        p.add_argument("--out", help="output path (file or directory)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--iters-scale", type=float, default=1.0,
                       help="multiply all iteration defaults by this factor")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--config", default=None,
                       help="JSON file overriding loss weights, densification "
                            "settings, and learning rates")
        if name in ("render", "simulate"):
            p.add_argument("--edits", default=None,
                           help="scenario edits JSON file")
        if name == "render":
            p.add_argument("--frame", type=int, default=0)
        if name == "eval":
            p.add_argument("--split", default="test")
        if name == "serve":
            p.add_argument("--host", default="127.0.0.1")
            p.add_argument("--port", type=int, default=8000)
            p.add_argument("--static", default=None,
                           help="directory of built UI assets to serve at /")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        if args.iters_scale <= 0:
            raise UsageError("--iters-scale must be positive")
        torch.set_num_threads(max(1, args.threads))
        return COMMANDS[args.command](args, _load_config(args.config))
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SplatError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        raise
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
