"""Synthetic driving-scene generator: the independent ground-truth oracle.

Images are produced by an analytic raycaster over textured planes, a sky
gradient, and convex lambertian car solids. The Gaussian rasterizer is never
invoked here, so these images can serve as ground truth for training and for
regression tests. Everything is deterministic for a fixed seed.

World frame: +Z up, +X along the road, +Y to the left. The ego camera uses
the usual CV convention (x right, y down, z forward).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .scene_io import (LABEL_OTHER, LABEL_ROAD, LABEL_SKY, FrameRecord,
                       SceneBundle, save_scene)

SUN_DIR = np.array([0.3, 0.2, 0.9]) / np.linalg.norm([0.3, 0.2, 0.9])
CABIN_COLOR = np.array([0.12, 0.13, 0.16])
LIGHT_ON = np.array([1.0, 0.85, 0.25])
LIGHT_OFF = np.array([0.25, 0.08, 0.05])


@dataclass
class BlinkSpec:
    period: int = 2        # frames per on/off cycle
    on_frames: int = 1     # first on_frames of each period are lit


@dataclass
class VehicleSpec:
    object_id: int
    dims: tuple = (4.2, 1.9, 1.6)          # length, width, height (m)
    body_color: tuple = (0.75, 0.1, 0.1)
    start_xy: tuple = (15.0, -2.0)
    velocity_xy: tuple = (1.0, 0.0)        # m per frame
    yaw: float = 0.0
    blink: BlinkSpec | None = None


@dataclass
class EgoPose:
    position: tuple
    yaw: float = 0.0


@dataclass
class SceneConfig:
    seed: int = 0
    width: int = 128
    height: int = 128
    n_frames: int = 8
    focal: float = 110.0
    ego_start: tuple = (-4.0, 0.0, 1.6)
    ego_velocity: float = 1.2              # m per frame along +x
    ego_poses: list | None = None          # explicit EgoPose list overrides
    extra_views: list = field(default_factory=list)  # EgoPose, appended as test frames
    test_frames: tuple = ()                # indices into the ego path marked test
    road_half_width: float = 4.0
    wall_y: float = 10.0
    wall_height: float = 6.0
    # End walls close the corridor so every ray terminates on geometry that
    # points can be sampled from; without them the sky near the horizon would
    # be unreachable by any finite sky plane.
    end_wall_height: float = 12.0
    x_range: tuple = (-12.0, 70.0)
    vehicles: list = field(default_factory=list)
    point_density: float = 1.0             # points per m^2
    point_noise: float = 0.01              # position noise sigma (m)
    texture_amp: float = 0.05


def ego_camera_pose(pos, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    forward = np.array([c, s, 0.0])
    right = np.array([s, -c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    M = np.eye(4)
    M[:3, 0], M[:3, 1], M[:3, 2] = right, down, forward
    M[:3, 3] = pos
    return M


def camera_poses(config: SceneConfig):
    if config.ego_poses is not None:
        return [(ego_camera_pose(np.asarray(p.position, dtype=np.float64), p.yaw),
                 "train") for p in config.ego_poses]
    poses = []
    x0, y0, z0 = config.ego_start
    for t in range(config.n_frames):
        pos = np.array([x0 + config.ego_velocity * t, y0, z0])
        split = "test" if t in tuple(config.test_frames) else "train"
        poses.append((ego_camera_pose(pos, 0.0), split))
    return poses


def intrinsics(config: SceneConfig):
    return np.array([[config.focal, 0.0, (config.width - 1) / 2.0],
                     [0.0, config.focal, (config.height - 1) / 2.0],
                     [0.0, 0.0, 1.0]])


# --- procedural textures ----------------------------------------------------

def road_color(x, y, config: SceneConfig):
    amp = config.texture_amp
    base = 0.32 + amp * np.sin(0.7 * x) * np.sin(0.9 * y)
    col = np.stack([base, base, base + 0.01], axis=-1)
    dashed = (np.abs(y) < 0.15) & (np.mod(x, 4.0) < 2.0)
    edge = np.abs(np.abs(y) - (config.road_half_width - 0.3)) < 0.12
    col[dashed] = [0.85, 0.85, 0.82]
    col[edge] = [0.8, 0.8, 0.78]
    return col


def shoulder_color(x, y, config: SceneConfig):
    amp = config.texture_amp
    g = 0.36 + amp * np.sin(1.3 * x + 0.5) * np.sin(1.1 * y)
    return np.stack([0.6 * g, g, 0.5 * g], axis=-1)


def ground_color(x, y, config: SceneConfig):
    on_road = np.abs(y) <= config.road_half_width
    col = shoulder_color(x, y, config)
    col[on_road] = road_color(x[on_road], y[on_road], config)
    return col


def wall_color(x, z, config: SceneConfig):
    amp = config.texture_amp
    base = 0.45 + amp * np.sin(0.9 * x) * np.sin(2.0 * z)
    stripe = (np.floor(z).astype(int) % 2 == 0)
    col = np.stack([base, base * 0.8, base * 0.65], axis=-1)
    col[stripe] *= 0.88
    return col


def sky_color(dirs):
    t = np.clip(dirs[..., 2], 0.0, 1.0)[..., None]
    return (1 - t) * np.array([0.72, 0.82, 0.94]) + t * np.array([0.25, 0.45, 0.85])


# --- convex car solid -------------------------------------------------------

def car_planes(dims):
    """Half-spaces n . p <= d in the object frame (origin = bbox center)."""
    l, w, h = dims
    c1 = 1.4 * h / l  # top chamfer slope; cabin spans |x| <= l/4 at full height
    return [
        (np.array([1.0, 0, 0]), l / 2), (np.array([-1.0, 0, 0]), l / 2),
        (np.array([0, 1.0, 0]), w / 2), (np.array([0, -1.0, 0]), w / 2),
        (np.array([0, 0, 1.0]), h / 2), (np.array([0, 0, -1.0]), h / 2),
        (np.array([c1, 0, 1.0]), h / 2 + c1 * l / 4),
        (np.array([-c1, 0, 1.0]), h / 2 + c1 * l / 4),
    ]


def vehicle_pose(spec: VehicleSpec, t: int):
    x = spec.start_xy[0] + spec.velocity_xy[0] * t
    y = spec.start_xy[1] + spec.velocity_xy[1] * t
    c, s = np.cos(spec.yaw), np.sin(spec.yaw)
    M = np.eye(4)
    M[:3, :3] = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    M[:3, 3] = [x, y, spec.dims[2] / 2.0]
    return M


def car_albedo(p_obj, normal_obj, spec: VehicleSpec, t: int):
    """Albedo and emissive flag at object-frame hit points."""
    l, w, h = spec.dims
    col = np.broadcast_to(np.asarray(spec.body_color), p_obj.shape).copy()
    cabin = p_obj[:, 2] > 0.65 * h - h / 2
    col[cabin] = CABIN_COLOR
    emissive = np.zeros(p_obj.shape[0], dtype=bool)
    if spec.blink is not None:
        on = (t % spec.blink.period) < spec.blink.on_frames
        rear = normal_obj[:, 0] < -0.9
        lamp = rear & (np.abs(p_obj[:, 1]) > 0.15 * w) \
            & (np.abs(p_obj[:, 1]) < 0.45 * w) \
            & (p_obj[:, 2] > -0.3 * h) & (p_obj[:, 2] < 0.1 * h)
        col[lamp] = LIGHT_ON if on else LIGHT_OFF
        emissive |= lamp & on
    return col, emissive


def _ray_convex(origin, dirs, planes):
    """Vectorized ray vs half-space intersection; returns (t_enter, normal_idx, hit)."""
    n_rays = dirs.shape[0]
    t_enter = np.full(n_rays, -np.inf)
    t_exit = np.full(n_rays, np.inf)
    enter_idx = np.zeros(n_rays, dtype=int)
    alive = np.ones(n_rays, dtype=bool)
    for i, (n, d) in enumerate(planes):
        denom = dirs @ n
        num = d - origin @ n
        parallel = np.abs(denom) < 1e-12
        alive &= ~(parallel & (num < 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = num / denom
        entering = denom < -1e-12
        upd = entering & (tt > t_enter)
        t_enter = np.where(upd, tt, t_enter)
        enter_idx = np.where(upd, i, enter_idx)
        exiting = denom > 1e-12
        t_exit = np.where(exiting, np.minimum(t_exit, tt), t_exit)
    hit = alive & (t_enter < t_exit) & (t_enter > 1e-6)
    return t_enter, enter_idx, hit


# --- frame rendering --------------------------------------------------------

def render_ground_truth(config: SceneConfig, cam_to_world: np.ndarray, t: int):
    """Returns (image HxWx3 float, labels HxW uint8, instance HxW uint16)."""
    H, W = config.height, config.width
    K = intrinsics(config)
    u, v = np.meshgrid(np.arange(W, dtype=np.float64),
                       np.arange(H, dtype=np.float64), indexing="xy")
    d_cam = np.stack([(u - K[0, 2]) / K[0, 0], (v - K[1, 2]) / K[1, 1],
                      np.ones_like(u)], axis=-1)
    R, o = cam_to_world[:3, :3], cam_to_world[:3, 3]
    dirs = (d_cam @ R.T).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    n_rays = dirs.shape[0]

    best_t = np.full(n_rays, np.inf)
    color = sky_color(dirs).copy()
    labels = np.full(n_rays, LABEL_SKY, dtype=np.uint8)
    instance = np.zeros(n_rays, dtype=np.uint16)

    def consider(t_hit, hit, surf_color, surf_label, surf_instance=0):
        closer = hit & (t_hit < best_t)
        best_t[closer] = t_hit[closer]
        color[closer] = surf_color[closer]
        labels[closer] = surf_label
        if np.isscalar(surf_instance):
            instance[closer] = surf_instance
        else:
            instance[closer] = surf_instance[closer]

    x0, x1 = config.x_range
    # Ground plane z = 0.
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = -o[2] / dirs[:, 2]
    pg = o + tg[:, None] * dirs
    hit_g = (dirs[:, 2] < -1e-9) & (tg > 1e-6) \
        & (pg[:, 0] >= x0) & (pg[:, 0] <= x1) & (np.abs(pg[:, 1]) <= config.wall_y)
    gcol = ground_color(pg[:, 0], pg[:, 1], config)
    glab = np.where(np.abs(pg[:, 1]) <= config.road_half_width, LABEL_ROAD, LABEL_OTHER)
    closer = hit_g & (tg < best_t)
    best_t[closer] = tg[closer]
    color[closer] = gcol[closer]
    labels[closer] = glab[closer]
    instance[closer] = 0

    # Side walls y = +-wall_y.
    for side in (1.0, -1.0):
        with np.errstate(divide="ignore", invalid="ignore"):
            tw = (side * config.wall_y - o[1]) / dirs[:, 1]
        pw = o + tw[:, None] * dirs
        hit_w = (np.abs(dirs[:, 1]) > 1e-9) & (tw > 1e-6) \
            & (pw[:, 2] >= 0) & (pw[:, 2] <= config.wall_height) \
            & (pw[:, 0] >= x0) & (pw[:, 0] <= x1)
        wcol = wall_color(pw[:, 0], pw[:, 2], config)
        consider(tw, hit_w, wcol, LABEL_OTHER)

    # End walls x = x0 and x = x1 close the corridor.
    for xe in (x0, x1):
        with np.errstate(divide="ignore", invalid="ignore"):
            te = (xe - o[0]) / dirs[:, 0]
        pe = o + te[:, None] * dirs
        hit_e = (np.abs(dirs[:, 0]) > 1e-9) & (te > 1e-6) \
            & (pe[:, 2] >= 0) & (pe[:, 2] <= config.end_wall_height) \
            & (np.abs(pe[:, 1]) <= config.wall_y)
        ecol = wall_color(pe[:, 1], pe[:, 2], config)
        consider(te, hit_e, ecol, LABEL_OTHER)

    # Vehicles: convex solids, lambertian with optional emissive lamps.
    for spec in config.vehicles:
        pose = vehicle_pose(spec, t)
        Rv, tv = pose[:3, :3], pose[:3, 3]
        o_obj = (o - tv) @ Rv
        d_obj = dirs @ Rv
        planes = car_planes(spec.dims)
        t_hit, n_idx, hit = _ray_convex(o_obj, d_obj, planes)
        if not hit.any():
            continue
        p_obj = o_obj + t_hit[:, None] * d_obj
        normals_obj = np.array([planes[i][0] / np.linalg.norm(planes[i][0])
                                for i in n_idx])
        albedo, emissive = car_albedo(p_obj, normals_obj, spec, t)
        n_world = normals_obj @ Rv.T
        lambert = 0.35 + 0.65 * np.clip(n_world @ SUN_DIR, 0, 1)
        shaded = albedo * lambert[:, None]
        shaded[emissive] = albedo[emissive]
        consider(t_hit, hit, shaded, LABEL_OTHER, np.full(n_rays, spec.object_id,
                                                          dtype=np.uint16) * hit)

    img = np.clip(color, 0, 1).reshape(H, W, 3)
    return img, labels.reshape(H, W), instance.reshape(H, W)


# --- point sampling ---------------------------------------------------------

def _ground_feature_points(config: SceneConfig, rng, spacing):
    """Extra ground points clustered on texture edges (lane markings etc.).

    Feature-based reconstruction concentrates keypoints on high-contrast
    edges; a uniform grid leaves thin structures like lane markings between
    samples, so they can never be represented sharply.
    """
    fine = 0.5 * spacing
    h = 0.06  # finite-difference step for the texture gradient, in meters
    x0, x1 = config.x_range
    xs = np.arange(x0, x1, fine)
    ys = np.arange(-config.wall_y, config.wall_y, fine)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    gx = gx.reshape(-1) + rng.uniform(0, fine, gx.size)
    gy = gy.reshape(-1) + rng.uniform(0, fine, gy.size)
    c0 = ground_color(gx, gy, config)
    cdx = ground_color(gx + h, gy, config)
    cdy = ground_color(gx, gy + h, config)
    grad = np.abs(c0 - cdx).sum(axis=-1) + np.abs(c0 - cdy).sum(axis=-1)
    keep = grad > 0.2
    pts = np.column_stack([gx[keep], gy[keep], np.zeros(int(keep.sum()))])
    return pts, ground_color(gx[keep], gy[keep], config)


def sample_background_points(config: SceneConfig, rng):
    spacing = 1.0 / np.sqrt(config.point_density)
    x0, x1 = config.x_range
    xs = np.arange(x0, x1, spacing)
    ys = np.arange(-config.wall_y, config.wall_y, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    gx = gx.reshape(-1) + rng.uniform(0, spacing, gx.size)
    gy = gy.reshape(-1) + rng.uniform(0, spacing, gy.size)
    ground = np.column_stack([gx, gy, np.zeros_like(gx)])
    ground_rgb = ground_color(gx, gy, config)

    zs = np.arange(0, config.wall_height, spacing)
    wx, wz = np.meshgrid(xs, zs, indexing="ij")
    wx = wx.reshape(-1) + rng.uniform(0, spacing, wx.size)
    wz = wz.reshape(-1) + rng.uniform(0, spacing, wz.size)
    walls = []
    walls_rgb = []
    for side in (1.0, -1.0):
        walls.append(np.column_stack([wx, np.full_like(wx, side * config.wall_y), wz]))
        walls_rgb.append(wall_color(wx, wz, config))
    ezs = np.arange(0, config.end_wall_height, spacing)
    ey, ez = np.meshgrid(ys, ezs, indexing="ij")
    ey = ey.reshape(-1) + rng.uniform(0, spacing, ey.size)
    ez = ez.reshape(-1) + rng.uniform(0, spacing, ez.size)
    ends = []
    ends_rgb = []
    for xe in (x0, x1):
        ends.append(np.column_stack([np.full_like(ey, xe), ey, ez]))
        ends_rgb.append(wall_color(ey, ez, config))

    feat, feat_rgb = _ground_feature_points(config, rng, spacing)
    xyz = np.concatenate([ground, feat] + walls + ends)
    rgb = np.concatenate([ground_rgb, feat_rgb] + walls_rgb + ends_rgb)
    xyz = xyz + rng.normal(0, config.point_noise, xyz.shape)
    return xyz, np.clip(rgb, 0, 1)


# --- bundle emission --------------------------------------------------------

def generate_synthetic_scene(config: SceneConfig, out_dir) -> SceneBundle:
    from .foreground import ObjectTrack

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    K = intrinsics(config)

    poses = camera_poses(config)
    extra = [(ego_camera_pose(np.asarray(p.position, dtype=np.float64), p.yaw), "test")
             for p in config.extra_views]
    frames = []
    for t, (pose, split) in enumerate(poses + extra):
        img, labels, instance = render_ground_truth(config, pose, t)
        ipath = f"images/frame_{t:05d}.png"
        lpath = f"masks/label_{t:05d}.png"
        npath = f"masks/instance_{t:05d}.png"
        Image.fromarray((img * 255.0).round().astype(np.uint8)).save(out / ipath)
        Image.fromarray(labels, mode="L").save(out / lpath)
        Image.fromarray(instance.astype(np.uint16)).save(out / npath)
        frames.append(FrameRecord(
            index=t, image_path=ipath, label_mask_path=lpath,
            instance_mask_path=npath, K=K, cam_to_world=pose,
            timestamp=float(t), split=split))

    xyz, rgb = sample_background_points(config, rng)
    n_sim = len(poses)
    tracks = {}
    for spec in config.vehicles:
        tracks[spec.object_id] = ObjectTrack(
            object_id=spec.object_id,
            poses={t: vehicle_pose(spec, t) for t in range(n_sim)},
            bbox_dims=np.asarray(spec.dims, dtype=np.float64),
            symmetry_axis=np.array([0.0, 1.0, 0.0]))

    bundle = SceneBundle(
        root=out, width=config.width, height=config.height, frames=frames,
        points_xyz=xyz, points_rgb=rgb, tracks=tracks,
        bounds_min=xyz.min(axis=0), bounds_max=xyz.max(axis=0))
    save_scene(bundle, out)
    return bundle


def surface_distance(config: SceneConfig, xyz: np.ndarray) -> np.ndarray:
    """Distance from points to the nearest generated background surface."""
    d_ground = np.abs(xyz[:, 2])
    d_walls = np.abs(np.abs(xyz[:, 1]) - config.wall_y)
    d_ends = np.minimum(np.abs(xyz[:, 0] - config.x_range[0]),
                        np.abs(xyz[:, 0] - config.x_range[1]))
    return np.minimum(np.minimum(d_ground, d_walls), d_ends)
