import numpy as np
import pytest
import torch

from splatsim.gaussians import CameraView, GaussianCloud, sh_coeff_count


def make_cloud(n, rng, sh_degree=1, dtype=torch.float64, spread=2.0, depth=8.0):
    """Random cloud in front of the default camera (looking +z from origin)."""
    k = sh_coeff_count(sh_degree)
    mu = np.column_stack([
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(depth - 2.0, depth + 2.0, n)])
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    rot[rot[:, 0] < 0] *= -1
    return GaussianCloud(
        mu=torch.tensor(mu, dtype=dtype),
        rot=torch.tensor(rot, dtype=dtype),
        log_scale=torch.tensor(rng.uniform(-1.5, -0.3, (n, 3)), dtype=dtype),
        opacity_logit=torch.tensor(rng.uniform(-1.0, 2.0, n), dtype=dtype),
        sh=torch.tensor(rng.uniform(-0.4, 0.4, (n, k, 3)), dtype=dtype),
        class_tag=torch.zeros(n, dtype=torch.int8),
        sh_degree=sh_degree)


def make_view(width=32, height=32, f=40.0, frame_index=0):
    """Camera at the origin looking down +z (world axes = camera axes)."""
    K = np.array([[f, 0, (width - 1) / 2.0],
                  [0, f, (height - 1) / 2.0],
                  [0, 0, 1.0]])
    return CameraView(K=K, cam_to_world=np.eye(4), width=width, height=height,
                      frame_index=frame_index)


def make_oracle_background(scene, config, min_depth=2.0, margin=0.5):
    """Idealized trained background: seeded from the bundle points, opaque,
    flattened along each surface normal, with points invisible from every
    camera (for example the ground directly under the ego) culled.

    Stands in for a fully converged background when a test only needs a
    believable backdrop, not the training that produces one.
    """
    import math

    from splatsim.background import BackgroundTrainConfig, seed_background_cloud

    # A low sky plane reaches further down toward the horizon, which matters
    # at the small image sizes the tests use.
    bg = seed_background_cloud(scene, BackgroundTrainConfig(sky_margin=2.0))
    pts = bg.mu.numpy()
    vis = np.zeros(len(pts), dtype=bool)
    for f in scene.frames:
        view = scene.view(f)
        w2c = view.world_to_cam()
        p = pts @ w2c[:3, :3].T + w2c[:3, 3]
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = view.fx * p[:, 0] / z + view.cx
            v = view.fy * p[:, 1] / z + view.cy
        W, H = view.width, view.height
        vis |= (z > min_depth) & (u > -margin * W) & (u < (1 + margin) * W) \
            & (v > -margin * H) & (v < (1 + margin) * H)
    bg = bg.subset(torch.tensor(vis))
    with torch.no_grad():
        bg.opacity_logit.fill_(math.log(0.95 / 0.05))
        mu = bg.mu
        end = (mu[:, 0] < config.x_range[0] + 0.5) | (mu[:, 0] > config.x_range[1] - 0.5)
        wall = (mu[:, 1].abs() > config.wall_y - 0.5) & (bg.class_tag != 2) & ~end
        sky = bg.class_tag == 2
        flat = ~wall & ~sky & ~end
        s = torch.empty_like(bg.log_scale)
        s[flat] = torch.tensor([0.30, 0.30, 0.02]).log()
        s[wall] = torch.tensor([0.30, 0.02, 0.30]).log()
        s[end] = torch.tensor([0.02, 0.30, 0.30]).log()
        s[sky] = torch.tensor([1.5, 1.5, 0.02]).log()
        bg.log_scale.copy_(s)
    return bg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_check(fn, param, analytic, h=1e-4, rel_tol=1e-3, min_grad=1e-6,
             frac_required=0.95, max_coords=None, rng=None):
    """Central finite differences against an analytic gradient tensor.

    Returns (checked, passed). Coordinates with |g| <= min_grad are skipped.
    """
    flat = param.reshape(-1)
    g = analytic.reshape(-1)
    idx = [i for i in range(flat.numel()) if abs(float(g[i])) > min_grad]
    if max_coords is not None and len(idx) > max_coords:
        sel = (rng or np.random.default_rng(0)).choice(len(idx), max_coords, replace=False)
        idx = [idx[i] for i in sel]
    checked = passed = 0
    for i in idx:
        orig = float(flat[i].detach())
        with torch.no_grad():
            flat[i] = orig + h
        fp = fn()
        with torch.no_grad():
            flat[i] = orig - h
        fm = fn()
        with torch.no_grad():
            flat[i] = orig
        num = (fp - fm) / (2 * h)
        ana = float(g[i])
        rel = abs(num - ana) / max(abs(num), abs(ana), 1e-12)
        checked += 1
        if rel <= rel_tol:
            passed += 1
    return checked, passed, (passed >= frac_required * checked if checked else True)
