"""Foreground objects: template instancing, reflection consistency, dynamic
appearance via residual SH, and per-object training.

Object frame convention: x forward, y lateral (the default symmetry-plane
normal), z up, origin at the 3D bounding-box center.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidParameterError
from .gaussians import (CLASS_FOREGROUND, GaussianCloud, matrix_to_quat,
                        normalize_quat, sh_coeff_count, sh_reflection_signs)
from .losses import LossWeights, masked_dssim, masked_l1
from .optim import (DEFAULT_LRS, Adam, DensifyConfig, DensifyState,
                    ParamGroupConfig, densify_and_prune)
from .rasterizer import render
from .seeding import cloud_from_points

log = logging.getLogger(__name__)


@dataclass
class ObjectTrack:
    object_id: int
    poses: dict                  # frame index -> 4x4 object-to-world
    bbox_dims: np.ndarray        # (length, width, height) meters
    symmetry_axis: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 1.0, 0.0]))

    def __post_init__(self):
        self.bbox_dims = np.asarray(self.bbox_dims, dtype=np.float64)
        self.symmetry_axis = np.asarray(self.symmetry_axis, dtype=np.float64)
        if (self.bbox_dims <= 0).any():
            raise InvalidParameterError("bbox_dims must be positive")

    def observed_frames(self):
        return sorted(self.poses.keys())


@dataclass
class TemplateModel:
    points: np.ndarray            # (N, 3) canonical frame, centered at origin
    colors: np.ndarray | None = None

    def aabb_dims(self) -> np.ndarray:
        return self.points.max(axis=0) - self.points.min(axis=0)


def make_car_template(n_points: int = 2000, dims=(4.2, 1.9, 1.6),
                      seed: int = 0, colors: bool = False) -> TemplateModel:
    """Procedural symmetric car-like point set (box body + chamfered cabin).

    Points are sampled by casting rays from the center to the convex surface;
    directions are mirrored across the lateral plane so the set is exactly
    bilaterally symmetric.
    """
    from .synthetic import car_planes

    rng = np.random.default_rng(seed)
    half = n_points // 2
    dirs = rng.normal(size=(half, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    mirrored = dirs * np.array([1.0, -1.0, 1.0])
    dirs = np.concatenate([dirs, mirrored])
    planes = car_planes(dims)
    t_exit = np.full(len(dirs), np.inf)
    for n, d in planes:
        denom = dirs @ n
        with np.errstate(divide="ignore"):
            tt = np.where(denom > 1e-12, d / denom, np.inf)
        t_exit = np.minimum(t_exit, tt)
    pts = dirs * t_exit[:, None]
    cols = np.full((len(pts), 3), 0.5) if colors else None
    return TemplateModel(points=pts, colors=cols)


def save_template(path, template: TemplateModel):
    from .scene_io import save_points
    save_points(path, template.points, template.colors,
                extra_header={"kind": "template"})


def load_template(path) -> TemplateModel:
    from .scene_io import load_points
    xyz, rgb = load_points(path)
    return TemplateModel(points=xyz, colors=rgb)


def instantiate_template(template: TemplateModel, track: ObjectTrack,
                         sh_degree: int = 1, dtype=torch.float32,
                         surfel_flatten: float | None = 0.1) -> GaussianCloud:
    """Object-frame cloud: template scaled per axis to the 3D bbox dims."""
    if len(template.points) == 0:
        raise InvalidParameterError("empty template")
    aabb = template.aabb_dims()
    if (aabb <= 1e-9).any():
        raise InvalidParameterError("degenerate template AABB")
    factors = track.bbox_dims / aabb
    xyz = template.points * factors
    n = len(xyz)
    return cloud_from_points(
        xyz, template.colors,
        class_tag=np.full(n, CLASS_FOREGROUND, dtype=np.int8),
        object_id=np.full(n, track.object_id, dtype=np.int32),
        sh_degree=sh_degree, dtype=dtype, surfel_flatten=surfel_flatten)


# --- reflection -------------------------------------------------------------

def reflection_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    norm2 = float(a @ a)
    if norm2 < 1e-20:
        raise InvalidParameterError("reflection axis must be non-zero")
    return np.eye(3) - 2.0 * np.outer(a, a) / norm2


def _axis_index(a) -> int:
    a = np.asarray(a, dtype=np.float64)
    a = a / np.linalg.norm(a)
    for k in range(3):
        if abs(abs(a[k]) - 1.0) < 1e-9:
            return k
    raise InvalidParameterError(
        "SH reflection is only defined for coordinate-axis symmetry planes")


def reflect_gaussians(cloud: GaussianCloud, axis) -> GaussianCloud:
    """Mirror a cloud across the plane through the origin with normal `axis`.

    Rotations are reflected by conjugation (R -> M R M), which is the proper
    rotation whose covariance is exactly M Sigma M^T; in quaternion form the
    vector part maps to -M q_vec, so the whole op is differentiable and an
    exact involution. SH coefficients pick up the per-band parity signs.
    """
    k = _axis_index(axis)
    M = torch.tensor(reflection_matrix(axis), dtype=cloud.dtype)
    mu = cloud.mu @ M.T
    qw = cloud.rot[:, :1]
    qv = -(cloud.rot[:, 1:] @ M.T)
    rot = torch.cat([qw, qv], dim=-1)
    signs = sh_reflection_signs(k, cloud.sh_degree, dtype=cloud.dtype)
    sh = cloud.sh * signs[None, :, None]
    return GaussianCloud(
        mu=mu, rot=rot, log_scale=cloud.log_scale,
        opacity_logit=cloud.opacity_logit, sh=sh,
        class_tag=cloud.class_tag, object_id=cloud.object_id,
        sh_degree=cloud.sh_degree)


def transform_cloud(cloud: GaussianCloud, pose: np.ndarray | torch.Tensor,
                    rot_quat: torch.Tensor | None = None) -> GaussianCloud:
    """Rigidly move a cloud by a 4x4 pose; differentiable in the attributes.

    `rot_quat` optionally supplies the pose rotation as a (possibly in-graph)
    quaternion so pose corrections can be optimized.
    """
    pose = torch.as_tensor(pose, dtype=cloud.dtype)
    R, t = pose[:3, :3], pose[:3, 3]
    mu = cloud.mu @ R.T + t
    q_pose = rot_quat if rot_quat is not None else matrix_to_quat(R)[0].to(cloud.dtype)
    rot = quat_multiply(q_pose.expand_as(cloud.rot), cloud.rot)
    return GaussianCloud(
        mu=mu, rot=rot, log_scale=cloud.log_scale,
        opacity_logit=cloud.opacity_logit, sh=cloud.sh,
        class_tag=cloud.class_tag, object_id=cloud.object_id,
        sh_degree=cloud.sh_degree)


def quat_multiply(q1: torch.Tensor, q2: torch.Tensor) -> torch.Tensor:
    w1, x1, y1, z1 = q1.unbind(-1)
    w2, x2, y2, z2 = q2.unbind(-1)
    return torch.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2], dim=-1)


# --- dynamic appearance -----------------------------------------------------

class DynamicAppearanceModel:
    """Residual SH from (temporal embedding, position, static SH) via a 2x64 MLP.

    The output layer is zero-initialized so training starts from the static
    model. Forward is a pure function of its inputs.
    """

    TENSOR_NAMES = ("embeddings", "w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, n_frames: int, sh_degree: int, embed_dim: int = 16,
                 hidden: int = 64, seed: int = 0, dtype=torch.float32):
        self.n_frames = n_frames
        self.sh_degree = sh_degree
        self.embed_dim = embed_dim
        self.hidden = hidden
        k = sh_coeff_count(sh_degree)
        in_dim = embed_dim + 3 + 3 * k
        g = torch.Generator().manual_seed(seed)
        def init(shape, fan_in):
            return torch.randn(*shape, generator=g, dtype=dtype) * math.sqrt(2.0 / fan_in)
        self.embeddings = 0.1 * torch.randn(n_frames, embed_dim, generator=g, dtype=dtype)
        self.w1 = init((in_dim, hidden), in_dim)
        self.b1 = torch.zeros(hidden, dtype=dtype)
        self.w2 = init((hidden, hidden), hidden)
        self.b2 = torch.zeros(hidden, dtype=dtype)
        self.w3 = torch.zeros(hidden, 3 * k, dtype=dtype)
        self.b3 = torch.zeros(3 * k, dtype=dtype)
        self.clamped_query = False

    def named_tensors(self):
        return [(name, getattr(self, name)) for name in self.TENSOR_NAMES]

    def parameters(self):
        return {name: getattr(self, name) for name in self.TENSOR_NAMES}

    def meta(self):
        return {"n_frames": self.n_frames, "sh_degree": self.sh_degree,
                "embed_dim": self.embed_dim, "hidden": self.hidden}

    @classmethod
    def from_tensors(cls, meta: dict, tensors: dict) -> "DynamicAppearanceModel":
        model = cls(meta["n_frames"], meta["sh_degree"], meta["embed_dim"],
                    meta["hidden"])
        for name in cls.TENSOR_NAMES:
            setattr(model, name, tensors[name])
        return model

    def residual(self, t: int, mu: torch.Tensor, sh: torch.Tensor,
                 training: bool = False) -> torch.Tensor:
        """Delta f_SH for every Gaussian at frame t; shape matches `sh`."""
        if t < 0 or t >= self.n_frames:
            if training:
                raise InvalidParameterError(
                    f"frame {t} outside embedding table [0, {self.n_frames})")
            self.clamped_query = True
            t = min(max(t, 0), self.n_frames - 1)
        n, k, _ = sh.shape
        dt = sh.dtype
        emb = self.embeddings.to(dt)[t].unsqueeze(0).expand(n, -1)
        x = torch.cat([emb, mu.to(dt), sh.reshape(n, -1)], dim=-1)
        h = torch.clamp(x @ self.w1.to(dt) + self.b1.to(dt), min=0.0)
        h = torch.clamp(h @ self.w2.to(dt) + self.b2.to(dt), min=0.0)
        out = h @ self.w3.to(dt) + self.b3.to(dt)
        return out.reshape(n, k, 3)

    def apply(self, cloud: GaussianCloud, t: int,
              training: bool = False) -> GaussianCloud:
        delta = self.residual(t, cloud.mu, cloud.sh, training=training)
        return GaussianCloud(
            mu=cloud.mu, rot=cloud.rot, log_scale=cloud.log_scale,
            opacity_logit=cloud.opacity_logit, sh=cloud.sh + delta,
            class_tag=cloud.class_tag, object_id=cloud.object_id,
            sh_degree=cloud.sh_degree)


def dynamic_sh(model: DynamicAppearanceModel, t: int, cloud: GaussianCloud,
               training: bool = False):
    """Residual and final SH at frame t: (delta, f_SH + delta)."""
    delta = model.residual(t, cloud.mu, cloud.sh, training=training)
    return delta, cloud.sh + delta


@dataclass
class ForegroundObject:
    object_id: int
    cloud: GaussianCloud            # object frame
    track: ObjectTrack
    correction: torch.Tensor = None  # (6,) translation + axis-angle
    appearance: DynamicAppearanceModel | None = None

    def __post_init__(self):
        if self.correction is None:
            self.correction = torch.zeros(6, dtype=torch.float32)


# --- training ---------------------------------------------------------------

@dataclass
class ForegroundTrainConfig:
    iters: int = 5000
    weights: LossWeights = field(default_factory=LossWeights)
    sh_degree: int = 1
    seed: int = 0
    reflection: bool = True
    dynamic_appearance: bool = True
    # Pushes rendered alpha toward 1 inside the instance mask; without it the
    # object-only render can fade to black to match dark pixels.
    alpha_weight: float = 0.2
    densify: DensifyConfig | None = field(default_factory=lambda: DensifyConfig(
        split_scale_threshold=0.4, growth_cap=2.0))
    lrs: dict = field(default_factory=dict)
    log_every: int = 50


def train_foreground_object(bundle, track: ObjectTrack, template: TemplateModel,
                            config: ForegroundTrainConfig,
                            logger=None) -> ForegroundObject | None:
    """Optimize one object's Gaussians (and appearance model) against its
    instance-masked views; the reflected cloud is supervised on alternate
    iterations."""
    rng = np.random.default_rng(config.seed + track.object_id)
    frames = [f for f in bundle.train_frames() if f.index in track.poses]
    usable = []
    for f in frames:
        _, inst = bundle.load_masks(f)
        if (inst == track.object_id).sum() >= 16:
            usable.append((f, bundle.load_image(f),
                           torch.tensor(inst == track.object_id)))
    if not usable:
        log.warning("object %d never visible; skipped", track.object_id)
        return None

    cloud = instantiate_template(template, track, sh_degree=config.sh_degree)
    n_frames = max(track.poses.keys()) + 1
    appearance = DynamicAppearanceModel(n_frames, config.sh_degree,
                                        seed=config.seed) \
        if config.dynamic_appearance else None

    lrs = {**DEFAULT_LRS, **config.lrs}
    params = {"mu": cloud.mu, "rot": cloud.rot, "log_scale": cloud.log_scale,
              "opacity_logit": cloud.opacity_logit, "sh": cloud.sh}
    configs = {name: ParamGroupConfig(lr=lrs[name]) for name in params}
    if appearance is not None:
        params["temporal_embedding"] = appearance.embeddings
        configs["temporal_embedding"] = ParamGroupConfig(lr=lrs["temporal_embedding"])
        for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
            params[f"mlp.{name}"] = getattr(appearance, name)
            configs[f"mlp.{name}"] = ParamGroupConfig(lr=lrs["mlp"])
    opt = Adam(params, configs)
    dstate = DensifyState(cloud.count) if config.densify else None
    initial_count = cloud.count

    for it in range(config.iters):
        f, gt, mask = usable[rng.integers(len(usable))]
        t = f.index
        view = bundle.view(f)

        if appearance is not None:
            delta, sh_t = dynamic_sh(appearance, t, cloud, training=True)
            obj_cloud = GaussianCloud(
                mu=cloud.mu, rot=cloud.rot, log_scale=cloud.log_scale,
                opacity_logit=cloud.opacity_logit, sh=sh_t,
                class_tag=cloud.class_tag, object_id=cloud.object_id,
                sh_degree=cloud.sh_degree)
        else:
            delta, obj_cloud = None, cloud

        reflected_pass = config.reflection and (it % 2 == 1)
        if reflected_pass:
            obj_cloud = reflect_gaussians(obj_cloud, track.symmetry_axis)
        world = transform_cloud(obj_cloud, track.poses[t])
        out = render(world, view, track_means2d=dstate is not None)

        gt_t = gt.to(cloud.dtype)
        lam = config.weights.lam
        loss = (1 - lam) * masked_l1(gt_t, out.raw_image, mask, "foreground") \
            + lam * masked_dssim(gt_t, out.raw_image, mask, "foreground") \
            + config.alpha_weight * (1.0 - out.alpha[mask]).mean()
        if delta is not None:
            loss = loss + config.weights.gamma * delta.abs().mean()

        opt.zero_grad()
        loss.backward()
        if dstate is not None and out.means2d is not None and out.means2d.grad is not None:
            # Map visible world-splat indices back to cloud rows (identity here).
            dstate.record(out.visible_index, out.means2d.grad)
        opt.step()
        cloud.renormalize_rotations()

        if logger is not None and it % config.log_every == 0:
            logger.log(it, f"fg{track.object_id}.loss", float(loss.detach()))

        if dstate is not None and (it + 1) % config.densify.interval == 0 \
                and it < config.iters - config.densify.interval:
            cloud = densify_and_prune(cloud, opt, dstate.mean_grads(),
                                      config.densify, initial_count)
            dstate.reset(cloud.count)

    return ForegroundObject(object_id=track.object_id, cloud=cloud, track=track,
                            appearance=appearance)


def train_foreground(bundle, config: ForegroundTrainConfig,
                     template: TemplateModel | None = None,
                     logger=None) -> dict:
    """Train every tracked object independently; returns object_id -> ForegroundObject."""
    template = template or make_car_template(seed=config.seed)
    objects = {}
    for oid, track in sorted(bundle.tracks.items()):
        obj = train_foreground_object(bundle, track, template, config, logger)
        if obj is not None:
            objects[oid] = obj
    return objects
