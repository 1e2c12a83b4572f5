"""Scene fusion and scenario editing.

A fused scene combines the trained background cloud with per-object clouds,
learned pose corrections, and appearance models. Composition is a pure
function from (scene, frame, edits) to a world-space cloud and camera, so
edit previews and the finetuning loop share one code path.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidParameterError, UnknownObjectError
from .foreground import (ForegroundObject, quat_multiply, transform_cloud)
from .gaussians import CameraView, GaussianCloud, concat_clouds
from .losses import (LossLogger, LossWeights, masked_dssim, masked_l1, psnr,
                     ssim)
from .optim import DEFAULT_LRS, Adam, ParamGroupConfig
from .rasterizer import render, save_png
from .scene_io import SceneBundle

log = logging.getLogger(__name__)


def so3_exp(w: torch.Tensor) -> torch.Tensor:
    """Axis-angle (3,) -> rotation matrix, differentiable (Rodrigues)."""
    theta = w.norm()
    K = torch.zeros(3, 3, dtype=w.dtype)
    K[0, 1], K[0, 2] = -w[2], w[1]
    K[1, 0], K[1, 2] = w[2], -w[0]
    K[2, 0], K[2, 1] = -w[1], w[0]
    if float(theta.detach()) < 1e-8:
        return torch.eye(3, dtype=w.dtype) + K
    A = torch.sin(theta) / theta
    B = (1 - torch.cos(theta)) / theta ** 2
    return torch.eye(3, dtype=w.dtype) + A * K + B * (K @ K)


def axis_angle_to_quat(w: torch.Tensor) -> torch.Tensor:
    """Axis-angle (3,) -> wxyz quaternion, differentiable near zero."""
    theta2 = (w * w).sum()
    theta = torch.sqrt(theta2 + 1e-32)
    half = 0.5 * theta
    # sin(x)/x is smooth; use its series when the angle underflows.
    if float(theta.detach()) < 1e-8:
        s = 0.5 - theta2 / 48.0
    else:
        s = torch.sin(half) / theta
    return torch.cat([torch.cos(half).reshape(1), s * w])


def correction_pose(correction: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(6,) translation + axis-angle -> (4x4 pose, wxyz quaternion)."""
    R = so3_exp(correction[3:])
    pose = torch.cat([
        torch.cat([R, correction[:3].reshape(3, 1)], dim=1),
        torch.tensor([[0.0, 0, 0, 1]], dtype=correction.dtype)])
    return pose, axis_angle_to_quat(correction[3:])


# --- edits ------------------------------------------------------------------

@dataclass
class EgoLateralShift:
    meters: float
    kind: str = "ego_lateral_shift"


@dataclass
class EgoPoseOverride:
    frame: int
    cam_to_world: np.ndarray
    kind: str = "ego_pose_override"


@dataclass
class ObjectOffset:
    object_id: int
    offset: tuple = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    kind: str = "object_offset"


@dataclass
class ObjectRemove:
    object_id: int
    kind: str = "object_remove"


@dataclass
class ObjectClone:
    object_id: int
    new_id: int
    offset: tuple = (0.0, 0.0, 0.0)
    kind: str = "object_clone"


@dataclass
class TimeOverride:
    frame: int
    kind: str = "time_override"


EDIT_KINDS = {
    "ego_lateral_shift": EgoLateralShift,
    "ego_pose_override": EgoPoseOverride,
    "object_offset": ObjectOffset,
    "object_remove": ObjectRemove,
    "object_clone": ObjectClone,
    "time_override": TimeOverride,
}


def edit_to_json(edit) -> dict:
    d = {"kind": edit.kind}
    if isinstance(edit, EgoLateralShift):
        d["meters"] = float(edit.meters)
    elif isinstance(edit, EgoPoseOverride):
        d["frame"] = int(edit.frame)
        d["cam_to_world"] = np.asarray(edit.cam_to_world).tolist()
    elif isinstance(edit, ObjectOffset):
        d.update(object_id=int(edit.object_id),
                 offset=[float(v) for v in edit.offset], yaw=float(edit.yaw))
    elif isinstance(edit, ObjectRemove):
        d["object_id"] = int(edit.object_id)
    elif isinstance(edit, ObjectClone):
        d.update(object_id=int(edit.object_id), new_id=int(edit.new_id),
                 offset=[float(v) for v in edit.offset])
    elif isinstance(edit, TimeOverride):
        d["frame"] = int(edit.frame)
    else:
        raise InvalidParameterError(f"unknown edit type {type(edit).__name__}")
    return d


def edit_from_json(d: dict):
    kind = d.get("kind")
    if kind not in EDIT_KINDS:
        raise InvalidParameterError(f"unknown edit kind {kind!r}")
    if kind == "ego_lateral_shift":
        return EgoLateralShift(meters=float(d["meters"]))
    if kind == "ego_pose_override":
        return EgoPoseOverride(frame=int(d["frame"]),
                               cam_to_world=np.asarray(d["cam_to_world"],
                                                       dtype=np.float64))
    if kind == "object_offset":
        return ObjectOffset(object_id=int(d["object_id"]),
                            offset=tuple(float(v) for v in d.get("offset", (0, 0, 0))),
                            yaw=float(d.get("yaw", 0.0)))
    if kind == "object_remove":
        return ObjectRemove(object_id=int(d["object_id"]))
    if kind == "object_clone":
        return ObjectClone(object_id=int(d["object_id"]), new_id=int(d["new_id"]),
                           offset=tuple(float(v) for v in d.get("offset", (0, 0, 0))))
    return TimeOverride(frame=int(d["frame"]))


def load_edits(path) -> list:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("edits", [])
    return [edit_from_json(d) for d in data]


def save_edits(path, edits: list):
    Path(path).write_text(json.dumps({"edits": [edit_to_json(e) for e in edits]},
                                     indent=1, sort_keys=True))


# --- fused scene ------------------------------------------------------------

@dataclass
class FusedScene:
    background: GaussianCloud
    objects: dict            # object_id -> ForegroundObject
    config: dict = field(default_factory=dict)

    def valid_ids(self):
        return set(self.objects.keys())


def _nearest_pose(track, t: int) -> np.ndarray:
    if t in track.poses:
        return track.poses[t]
    keys = sorted(track.poses.keys())
    nearest = min(keys, key=lambda k: abs(k - t))
    return track.poses[nearest]


def object_world_cloud(obj: ForegroundObject, t: int,
                       offset: ObjectOffset | None = None,
                       training: bool = False) -> GaussianCloud:
    """Object cloud at frame t in world space: appearance residual baked into
    the SH, then track pose, learned correction, and any offset edit."""
    cloud = obj.cloud
    if obj.appearance is not None:
        cloud = obj.appearance.apply(cloud, t, training=training)
    base = torch.tensor(_nearest_pose(obj.track, t), dtype=cloud.dtype)
    corr, corr_quat = correction_pose(obj.correction.to(cloud.dtype))
    pose = base @ corr
    q_base = _pose_quat(base)
    q = quat_multiply(q_base, corr_quat)
    if offset is not None:
        yaw = torch.tensor(float(offset.yaw), dtype=cloud.dtype)
        ce, se = torch.cos(yaw), torch.sin(yaw)
        Rz = torch.eye(4, dtype=cloud.dtype)
        Rz[0, 0], Rz[0, 1], Rz[1, 0], Rz[1, 1] = ce, -se, se, ce
        shift = torch.eye(4, dtype=cloud.dtype)
        shift[:3, 3] = torch.tensor(offset.offset, dtype=cloud.dtype)
        # Rotate about the object's own origin, then translate in world.
        pose = shift @ pose @ Rz
        q_yaw = torch.tensor([float(torch.cos(yaw / 2)), 0.0, 0.0,
                              float(torch.sin(yaw / 2))], dtype=cloud.dtype)
        q = quat_multiply(q, q_yaw)
    return transform_cloud(cloud, pose, rot_quat=q)


def _pose_quat(pose: torch.Tensor) -> torch.Tensor:
    from .gaussians import matrix_to_quat
    return matrix_to_quat(pose[:3, :3])[0].to(pose.dtype)


def apply_camera_edits(view: CameraView, t: int, edits: list) -> CameraView:
    cam = np.array(view.cam_to_world, dtype=np.float64)
    for e in edits:
        if isinstance(e, EgoPoseOverride) and e.frame == t:
            cam = np.asarray(e.cam_to_world, dtype=np.float64)
        elif isinstance(e, EgoLateralShift):
            cam = cam.copy()
            cam[:3, 3] += e.meters * cam[:3, 0]  # camera right axis
    return CameraView(K=view.K, cam_to_world=cam, width=view.width,
                      height=view.height, frame_index=view.frame_index)


def compose(fused: FusedScene, t: int, view: CameraView,
            edits: list = (), training: bool = False):
    """World cloud and edited camera for frame t. Pure; raises
    UnknownObjectError for edits naming absent objects."""
    valid = fused.valid_ids()
    for e in edits:
        oid = getattr(e, "object_id", None)
        if oid is not None and oid not in valid:
            raise UnknownObjectError(oid, valid)

    removed = {e.object_id for e in edits if isinstance(e, ObjectRemove)}
    offsets = {e.object_id: e for e in edits if isinstance(e, ObjectOffset)}
    clones = [e for e in edits if isinstance(e, ObjectClone)]
    t_obj = t
    for e in edits:
        if isinstance(e, TimeOverride):
            t_obj = e.frame

    parts = [fused.background]
    for oid in sorted(fused.objects):
        if oid in removed:
            continue
        parts.append(object_world_cloud(fused.objects[oid], t_obj,
                                        offsets.get(oid), training=training))
    for e in clones:
        src = fused.objects[e.object_id]
        part = object_world_cloud(
            src, t_obj, ObjectOffset(e.object_id, offset=e.offset),
            training=training)
        part.object_id = torch.full_like(part.object_id, e.new_id)
        parts.append(part)

    deg = max(p.sh_degree for p in parts)
    parts = [_pad_to_degree(p, deg) for p in parts]
    return concat_clouds(parts), apply_camera_edits(view, t, edits)


def _pad_to_degree(cloud: GaussianCloud, degree: int) -> GaussianCloud:
    if cloud.sh_degree == degree:
        return cloud
    from .gaussians import sh_coeff_count
    extra = sh_coeff_count(degree) - cloud.sh.shape[1]
    pad = torch.zeros(cloud.count, extra, 3, dtype=cloud.dtype)
    return GaussianCloud(
        mu=cloud.mu, rot=cloud.rot, log_scale=cloud.log_scale,
        opacity_logit=cloud.opacity_logit,
        sh=torch.cat([cloud.sh, pad], dim=1),
        class_tag=cloud.class_tag, object_id=cloud.object_id,
        sh_degree=degree)


# --- finetuning -------------------------------------------------------------

@dataclass
class FusionTrainConfig:
    iters: int = 10000
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    lrs: dict = field(default_factory=dict)
    log_every: int = 50


def fuse_finetune(bundle: SceneBundle, fused: FusedScene,
                  config: FusionTrainConfig,
                  logger: LossLogger | None = None) -> FusedScene:
    """Joint whole-image refinement.

    Trainable: every foreground attribute, pose corrections, appearance
    models, and background opacity. Background geometry and color stay
    bitwise-frozen; densification never runs here.
    """
    rng = np.random.default_rng(config.seed)
    frames = bundle.train_frames()
    cache = [(f.index, bundle.view(f), bundle.load_image(f)) for f in frames]
    lrs = {**DEFAULT_LRS, **config.lrs}

    params = {"bg.opacity_logit": fused.background.opacity_logit}
    configs = {"bg.opacity_logit": ParamGroupConfig(lr=lrs["opacity_logit"])}
    for name in ("mu", "rot", "log_scale", "sh"):
        getattr(fused.background, name).requires_grad_(False)
    for oid, obj in fused.objects.items():
        for name in ("mu", "rot", "log_scale", "opacity_logit", "sh"):
            params[f"obj{oid}.{name}"] = getattr(obj.cloud, name)
            configs[f"obj{oid}.{name}"] = ParamGroupConfig(lr=lrs[name])
        params[f"obj{oid}.correction"] = obj.correction
        configs[f"obj{oid}.correction"] = ParamGroupConfig(lr=lrs["correction_pose"])
        if obj.appearance is not None:
            params[f"obj{oid}.embeddings"] = obj.appearance.embeddings
            configs[f"obj{oid}.embeddings"] = ParamGroupConfig(
                lr=lrs["temporal_embedding"])
            for w in ("w1", "b1", "w2", "b2", "w3", "b3"):
                params[f"obj{oid}.{w}"] = getattr(obj.appearance, w)
                configs[f"obj{oid}.{w}"] = ParamGroupConfig(lr=lrs["mlp"])
    opt = Adam(params, configs)

    lam = config.weights.lam
    full_mask = torch.ones(bundle.height, bundle.width, dtype=torch.bool)
    for it in range(config.iters):
        t, view, gt = cache[rng.integers(len(cache))]
        cloud, view = compose(fused, t, view, training=True)
        out = render(cloud, view)
        gt_t = gt.to(cloud.dtype)
        loss = (1 - lam) * masked_l1(gt_t, out.raw_image, full_mask) \
            + lam * masked_dssim(gt_t, out.raw_image, full_mask)
        opt.zero_grad()
        loss.backward()
        opt.step()
        for obj in fused.objects.values():
            obj.cloud.renormalize_rotations()
        if logger is not None and it % config.log_every == 0:
            logger.log(it, "fusion.loss", float(loss.detach()))
    return fused


# --- simulation -------------------------------------------------------------

def simulate(fused: FusedScene, bundle: SceneBundle, edits: list,
             out_dir, frames: list | None = None, threads: int = 1) -> dict:
    """Render each frame with edits applied; writes PNGs and metrics.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = frames if frames is not None else bundle.frames
    metrics = {"frames": []}
    for f in records:
        cloud, view = compose(fused, f.index, bundle.view(f), edits)
        with torch.no_grad():
            img = render(cloud, view, threads=threads).image
        path = out / f"frame_{f.index:05d}.png"
        save_png(img, path)
        entry = {"frame": f.index, "image": path.name, "split": f.split}
        if not edits:
            gt = bundle.load_image(f)
            entry["psnr"] = psnr(gt, img)
            entry["ssim"] = ssim(gt, img)
        metrics["frames"].append(entry)
    scored = [e for e in metrics["frames"] if "psnr" in e]
    if scored:
        metrics["mean_psnr"] = float(np.mean([e["psnr"] for e in scored]))
        metrics["mean_ssim"] = float(np.mean([e["ssim"] for e in scored]))
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    return metrics


def evaluate(fused: FusedScene, bundle: SceneBundle, split: str = "test",
             threads: int = 1) -> dict:
    """Held-out PSNR / SSIM over a split."""
    frames = [f for f in bundle.frames if f.split == split]
    rows = []
    for f in frames:
        cloud, view = compose(fused, f.index, bundle.view(f))
        with torch.no_grad():
            img = render(cloud, view, threads=threads).image
        gt = bundle.load_image(f)
        rows.append({"frame": f.index, "psnr": psnr(gt, img),
                     "ssim": ssim(gt, img)})
    return {"frames": rows,
            "mean_psnr": float(np.mean([r["psnr"] for r in rows])) if rows else None,
            "mean_ssim": float(np.mean([r["ssim"] for r in rows])) if rows else None}
