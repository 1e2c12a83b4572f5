"""Background reconstruction: semantic seeding and the two-phase constrained
training loop.

Phase 1 renders the road / sky / other sub-clouds in isolation and supervises
each on its own region mask, so no class ever receives gradients from another
class's pixels. Phase 2 renders the union on all non-foreground pixels. Road
and sky positions are frozen throughout, and the flatness constraint keeps
them as horizontal discs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import SceneValidationError
from .gaussians import (CLASS_OTHER, CLASS_ROAD, CLASS_SKY, GaussianCloud)
from .losses import LossLogger, LossWeights, flatness_penalty, masked_dssim, masked_l1
from .optim import (DEFAULT_LRS, DensifyConfig, DensifyState, cloud_optimizer,
                    densify_and_prune, exp_lr)
from .rasterizer import render
from .scene_io import LABEL_OTHER, LABEL_ROAD, LABEL_SKY, SceneBundle
from .seeding import cloud_from_points

log = logging.getLogger(__name__)

LABEL_TO_CLASS = {LABEL_OTHER: CLASS_OTHER, LABEL_ROAD: CLASS_ROAD,
                  LABEL_SKY: CLASS_SKY}
REGIONS = ((CLASS_ROAD, LABEL_ROAD, "road"), (CLASS_SKY, LABEL_SKY, "sky"),
           (CLASS_OTHER, LABEL_OTHER, "other"))


@dataclass
class SemanticMask:
    labels: np.ndarray    # HxW in {0 other, 1 road, 2 sky}
    instance: np.ndarray  # HxW, 0 = none, k = foreground object k

    def __post_init__(self):
        if self.labels.shape != self.instance.shape:
            raise SceneValidationError("label and instance maps must share dimensions")

    def background_mask(self) -> np.ndarray:
        return self.instance == 0

    def region_mask(self, label: int) -> np.ndarray:
        return (self.labels == label) & (self.instance == 0)


def _project_points(points: np.ndarray, view) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    w2c = view.world_to_cam()
    p = points @ w2c[:3, :3].T + w2c[:3, 3]
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = view.fx * p[:, 0] / z + view.cx
        v = view.fy * p[:, 1] / z + view.cy
    visible = (z > 0.05) & (u >= 0) & (u <= view.width - 1) \
        & (v >= 0) & (v <= view.height - 1)
    return np.round(u).astype(int), np.round(v).astype(int), visible


def assign_classes(points: np.ndarray, frames: list) -> np.ndarray:
    """Majority vote over per-frame mask labels; ties and unobserved -> other.

    `frames` is a list of (CameraView, SemanticMask).
    """
    votes = np.zeros((len(points), 3), dtype=np.int64)
    for view, mask in frames:
        u, v, visible = _project_points(points, view)
        idx = np.nonzero(visible)[0]
        labels = mask.labels[v[idx], u[idx]]
        fg = mask.instance[v[idx], u[idx]] > 0
        idx, labels = idx[~fg], labels[~fg]
        for lab in (LABEL_OTHER, LABEL_ROAD, LABEL_SKY):
            np.add.at(votes[:, lab], idx[labels == lab], 1)
    out = np.full(len(points), CLASS_OTHER, dtype=np.int8)
    best = votes.max(axis=1)
    observed = best > 0
    # Strict majority required; any tie falls back to other.
    unique_best = (votes == best[:, None]).sum(axis=1) == 1
    decided = observed & unique_best
    winner = votes.argmax(axis=1)
    out[decided] = np.array([LABEL_TO_CLASS[l] for l in winner[decided]], dtype=np.int8)
    return out


def inject_sky_plane(bounds_min, bounds_max, density: float = 0.25,
                     margin: float = 20.0) -> np.ndarray:
    """Horizontal point grid above the scene, extended 1.5x the horizontal bounds."""
    bounds_min = np.asarray(bounds_min, dtype=np.float64)
    bounds_max = np.asarray(bounds_max, dtype=np.float64)
    if not (np.isfinite(bounds_min).all() and np.isfinite(bounds_max).all()):
        raise SceneValidationError("scene bounds must be finite")
    z = bounds_max[2] + margin
    center = 0.5 * (bounds_min[:2] + bounds_max[:2])
    half = 0.75 * (bounds_max[:2] - bounds_min[:2])  # 1.5x extent total
    spacing = 1.0 / np.sqrt(density)
    nx = max(2, int(np.ceil(2 * half[0] / spacing)) + 1)
    ny = max(2, int(np.ceil(2 * half[1] / spacing)) + 1)
    xs = np.linspace(center[0] - half[0], center[0] + half[0], nx)
    ys = np.linspace(center[1] - half[1], center[1] + half[1], ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.reshape(-1), gy.reshape(-1),
                            np.full(gx.size, z)])


def sample_point_colors(points: np.ndarray, frames: list,
                        default=(0.5, 0.5, 0.5)) -> np.ndarray:
    """Nearest-frame pixel color per point; gray when never visible.

    `frames` is a list of (CameraView, image HxWx3 ndarray).
    """
    colors = np.tile(np.asarray(default, dtype=np.float64), (len(points), 1))
    filled = np.zeros(len(points), dtype=bool)
    for view, image in frames:
        u, v, visible = _project_points(points, view)
        take = visible & ~filled
        idx = np.nonzero(take)[0]
        colors[idx] = image[v[idx], u[idx]]
        filled[idx] = True
    return colors


@dataclass
class BackgroundTrainConfig:
    phase1_iters: int = 15000
    phase2_iters: int = 15000
    weights: LossWeights = field(default_factory=LossWeights)
    sh_degree: int = 1
    seed: int = 0
    sky_density: float = 0.25
    sky_margin: float = 20.0
    surfel_flatten: float = 0.1
    densify: DensifyConfig | None = field(default_factory=DensifyConfig)
    lrs: dict = field(default_factory=dict)
    log_every: int = 50


@dataclass
class BackgroundTrainState:
    cloud: GaussianCloud
    phase: int
    iteration: int


def seed_background_cloud(bundle: SceneBundle,
                          config: BackgroundTrainConfig) -> GaussianCloud:
    """Initial cloud: bundle points classified by mask votes + injected sky plane."""
    frames = bundle.train_frames()
    sem = []
    imgs = []
    for f in frames:
        labels, instance = bundle.load_masks(f)
        sem.append((bundle.view(f), SemanticMask(labels, instance)))
        imgs.append((bundle.view(f), bundle.load_image(f).numpy()))

    classes = assign_classes(bundle.points_xyz, sem)
    sky_xyz = inject_sky_plane(bundle.bounds_min, bundle.bounds_max,
                               density=config.sky_density, margin=config.sky_margin)
    xyz = np.concatenate([bundle.points_xyz, sky_xyz])
    classes = np.concatenate([classes, np.full(len(sky_xyz), CLASS_SKY, dtype=np.int8)])
    if bundle.points_rgb is not None:
        sky_rgb = sample_point_colors(sky_xyz, imgs)
        rgb = np.concatenate([bundle.points_rgb, sky_rgb])
    else:
        rgb = sample_point_colors(xyz, imgs)
    return cloud_from_points(xyz, rgb, classes, sh_degree=config.sh_degree,
                             surfel_flatten=config.surfel_flatten)


def train_background(bundle: SceneBundle, config: BackgroundTrainConfig,
                     logger: LossLogger | None = None,
                     cloud: GaussianCloud | None = None) -> GaussianCloud:
    for f in bundle.train_frames():
        if not (bundle.root / f.label_mask_path).exists() \
                or not (bundle.root / f.instance_mask_path).exists():
            raise SceneValidationError(f"frame {f.index}: masks missing")

    rng = np.random.default_rng(config.seed)
    if cloud is None:
        cloud = seed_background_cloud(bundle, config)

    frames = bundle.train_frames()
    cache = []
    for f in frames:
        labels, instance = bundle.load_masks(f)
        cache.append((bundle.view(f), bundle.load_image(f),
                      SemanticMask(labels, instance)))

    frozen_rows = (cloud.class_tag == CLASS_ROAD) | (cloud.class_tag == CLASS_SKY)
    opt = cloud_optimizer(cloud, lrs=config.lrs, frozen_mu_rows=frozen_rows)
    dstate = DensifyState(cloud.count) if config.densify else None
    initial_count = cloud.count
    total_iters = config.phase1_iters + config.phase2_iters
    mu_lr0 = {**DEFAULT_LRS, **config.lrs}["mu"]

    for it in range(total_iters):
        phase = 1 if it < config.phase1_iters else 2
        opt.set_lr("mu", exp_lr(mu_lr0, it, total_iters))
        view, gt, sem = cache[rng.integers(len(cache))]
        gt = gt.to(cloud.dtype)

        opt.zero_grad()
        total = torch.zeros((), dtype=cloud.dtype)
        pending = []
        if phase == 1:
            for class_code, label, name in REGIONS:
                cmask = cloud.class_tag == class_code
                pmask = torch.tensor(sem.region_mask(label))
                if not bool(cmask.any()) or not bool(pmask.any()):
                    continue
                sub = cloud.subset(cmask)
                out = render(sub, view, track_means2d=dstate is not None)
                lam = config.weights.lam
                loss = (1 - lam) * masked_l1(gt, out.raw_image, pmask, name) \
                    + lam * masked_dssim(gt, out.raw_image, pmask, name)
                if class_code in (CLASS_ROAD, CLASS_SKY):
                    loss = loss + config.weights.beta * flatness_penalty(
                        sub.rot, sub.log_scale)
                total = total + loss
                pending.append((out, torch.nonzero(cmask, as_tuple=False).squeeze(-1)))
        else:
            pmask = torch.tensor(sem.background_mask())
            out = render(cloud, view, track_means2d=dstate is not None)
            lam = config.weights.lam
            loss = (1 - lam) * masked_l1(gt, out.raw_image, pmask, "union") \
                + lam * masked_dssim(gt, out.raw_image, pmask, "union")
            flat_mask = (cloud.class_tag == CLASS_ROAD) | (cloud.class_tag == CLASS_SKY)
            loss = loss + config.weights.beta * flatness_penalty(
                cloud.rot[flat_mask], cloud.log_scale[flat_mask])
            total = loss
            pending.append((out, torch.arange(cloud.count)))

        if total.requires_grad:
            total.backward()
        if dstate is not None:
            for out, rows in pending:
                if out.means2d is not None and out.means2d.grad is not None:
                    dstate.record(rows[out.visible_index], out.means2d.grad)
        opt.step()
        cloud.renormalize_rotations()

        if logger is not None and it % config.log_every == 0:
            logger.log(it, f"bg.phase{phase}.loss", float(total.detach()))

        if dstate is not None and (it + 1) % config.densify.interval == 0 \
                and it < total_iters - config.densify.interval:
            cloud = densify_and_prune(cloud, opt, dstate.mean_grads(),
                                      config.densify, initial_count)
            dstate.reset(cloud.count)

    return cloud
