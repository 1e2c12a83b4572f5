"""Forward splatting and analytic backward for a GaussianCloud.

Projection follows the EWA linearization: cov2d = J W Sigma W^T J^T with the
perspective Jacobian J evaluated at the Gaussian center, plus a 0.3 px^2
low-pass dilation. Compositing is exact front-to-back over a single global
depth sort (ties broken by source index), evaluated tile by tile in 16x16
blocks. Gradients come from torch autograd over this exact chain, so they are
the analytic derivatives of what the forward pass computes.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .gaussians import CameraView, GaussianCloud, eval_sh_color, quat_to_matrix, normalize_quat

TILE = 16
NEAR_PLANE = 0.05
LOW_PASS = 0.3          # px^2 added to the cov2d diagonal
SIGMA_CLAMP = 0.99
T_STOP = 1e-4           # transmittance early-stop
MIN_COV_EIG = 1e-12     # skip guard for degenerate projected covariance
FRUSTUM_NDC = 1.3       # cull when the projected center leaves this NDC box


@dataclass
class Splat2D:
    center_px: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    source_index: int


@dataclass
class RenderOutput:
    image: torch.Tensor          # (H, W, 3) clamped to [0, 1]
    alpha: torch.Tensor          # (H, W)
    contributors: torch.Tensor   # (H, W) int
    raw_image: torch.Tensor = None  # unclamped; used for loss gradients
    n_culled: int = 0
    means2d: torch.Tensor = None    # (M, 2) visible projected centers (grad hook)
    visible_index: torch.Tensor = None  # (M,) indices into the cloud


def project(cloud: GaussianCloud, view: CameraView):
    """Project a cloud; returns a list of Splat2D for the visible Gaussians."""
    t = _project_tensors(cloud, view)
    splats = []
    for i in range(t["means2d"].shape[0]):
        splats.append(Splat2D(
            center_px=t["means2d"][i].detach().numpy(),
            cov2d=t["cov2d"][i].detach().numpy(),
            depth=float(t["depth"][i]),
            color=t["color"][i].detach().numpy(),
            opacity=float(t["opacity"][i]),
            source_index=int(t["visible_index"][i])))
    return splats


def _project_tensors(cloud: GaussianCloud, view: CameraView):
    dtype = cloud.dtype
    n = cloud.count
    w2c = torch.as_tensor(view.world_to_cam(), dtype=dtype)
    W, tvec = w2c[:3, :3], w2c[:3, 3]
    p_cam = cloud.mu @ W.T + tvec
    z = p_cam[:, 2]
    front = z > NEAR_PLANE

    # Keep graph only for front Gaussians.
    p = p_cam[front]
    x, y, zz = p[:, 0], p[:, 1], p[:, 2]
    fx, fy, cx, cy = view.fx, view.fy, view.cx, view.cy
    u = fx * x / zz + cx
    v = fy * y / zz + cy
    means2d = torch.stack([u, v], dim=-1)

    R = quat_to_matrix(normalize_quat(cloud.rot[front]))
    s = torch.exp(cloud.log_scale[front])
    RS = R * s.unsqueeze(-2)
    sigma = RS @ RS.transpose(-1, -2)
    cov_cam = W @ sigma @ W.T

    zero = torch.zeros_like(zz)
    J = torch.stack([
        torch.stack([fx / zz, zero, -fx * x / zz ** 2], dim=-1),
        torch.stack([zero, fy / zz, -fy * y / zz ** 2], dim=-1),
    ], dim=-2)  # (M, 2, 3)
    cov2d = J @ cov_cam @ J.transpose(-1, -2)
    cov2d = cov2d + LOW_PASS * torch.eye(2, dtype=dtype)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = torch.sqrt(torch.clamp(mid ** 2 - (a * c - b * b), min=0.0))
    lam_max = mid + disc
    lam_min = mid - disc
    radius = torch.ceil(3.0 * torch.sqrt(torch.clamp(lam_max, min=0.0)))

    in_image = ((u + radius >= 0) & (u - radius <= view.width - 1)
                & (v + radius >= 0) & (v - radius <= view.height - 1)
                & (lam_min > MIN_COV_EIG))
    # Frustum cull on the projected center: the perspective linearization is
    # only valid near the center, and Gaussians at grazing camera depth
    # otherwise blow up into footprints that cover the whole frame.
    mx = 0.5 * (FRUSTUM_NDC - 1.0) * view.width
    my = 0.5 * (FRUSTUM_NDC - 1.0) * view.height
    in_frustum = ((u >= -mx) & (u <= view.width - 1 + mx)
                  & (v >= -my) & (v <= view.height - 1 + my))
    keep = (in_image & in_frustum).detach()

    cam_center = torch.as_tensor(view.center(), dtype=dtype)
    dirs = cloud.mu[front] - cam_center
    dirs = dirs / dirs.norm(dim=-1, keepdim=True).clamp(min=1e-12)
    color = eval_sh_color(cloud.sh[front], dirs, cloud.sh_degree)
    opacity = torch.sigmoid(cloud.opacity_logit[front])

    front_idx = torch.nonzero(front, as_tuple=False).squeeze(-1)
    return {
        "means2d": means2d[keep],
        "cov2d": cov2d[keep],
        "depth": z[front][keep].detach(),
        "color": color[keep],
        "opacity": opacity[keep],
        "radius": radius[keep].detach(),
        "visible_index": front_idx[keep],
        "n_culled": int(n - int(keep.sum())),
    }


def composite(splats, pixel):
    """Front-to-back blend of depth-sorted Splat2D at one pixel.

    Reference-path implementation of the per-pixel sum; the tiled renderer
    must agree with it.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    rgb = np.zeros(3)
    trans = 1.0
    for sp in splats:
        if trans < T_STOP:
            break
        d = pixel - np.asarray(sp.center_px, dtype=np.float64)
        cov = np.asarray(sp.cov2d, dtype=np.float64)
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
        if det <= 0:
            continue
        inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[0, 1], cov[0, 0]]]) / det
        power = -0.5 * d @ inv @ d
        sigma = min(sp.opacity * np.exp(power), SIGMA_CLAMP)
        rgb = rgb + np.asarray(sp.color, dtype=np.float64) * sigma * trans
        trans *= 1.0 - sigma
    return rgb, 1.0 - trans


def _sorted_order(depth: torch.Tensor, source_index: torch.Tensor) -> np.ndarray:
    # Stable global order: ascending depth, ties by source index.
    return np.lexsort((source_index.numpy(), depth.numpy()))


def _tile_jobs(height, width):
    for y0 in range(0, height, TILE):
        for x0 in range(0, width, TILE):
            yield y0, min(y0 + TILE, height), x0, min(x0 + TILE, width)


def render(cloud: GaussianCloud, view: CameraView, t: int | None = None,
           appearance=None, threads: int = 1,
           track_means2d: bool = False) -> RenderOutput:
    """Rasterize the cloud. Deterministic for fixed inputs and any `threads`."""
    dtype = cloud.dtype
    H, W = view.height, view.width

    if appearance is not None and t is not None:
        cloud = appearance.apply(cloud, t)

    if cloud.count == 0:
        z = torch.zeros(H, W, 3, dtype=dtype)
        return RenderOutput(image=z, alpha=torch.zeros(H, W, dtype=dtype),
                            contributors=torch.zeros(H, W, dtype=torch.int32),
                            raw_image=z)

    proj = _project_tensors(cloud, view)
    m = proj["means2d"].shape[0]
    if m == 0:
        z = torch.zeros(H, W, 3, dtype=dtype)
        return RenderOutput(image=z, alpha=torch.zeros(H, W, dtype=dtype),
                            contributors=torch.zeros(H, W, dtype=torch.int32),
                            raw_image=z, n_culled=proj["n_culled"])

    means2d = proj["means2d"]
    if track_means2d:
        means2d.retain_grad()

    order = _sorted_order(proj["depth"], proj["visible_index"])
    order_t = torch.as_tensor(order.copy())
    centers = means2d[order_t]
    cov2d = proj["cov2d"][order_t]
    colors = proj["color"][order_t]
    opac = proj["opacity"][order_t]
    radius = proj["radius"][order_t]

    # Conic (inverse covariance) terms.
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic_a, conic_b, conic_c = c / det, -b / det, a / det

    cn = centers.detach()
    x0s = cn[:, 0] - radius
    x1s = cn[:, 0] + radius
    y0s = cn[:, 1] - radius
    y1s = cn[:, 1] + radius

    image = torch.zeros(H, W, 3, dtype=dtype)
    alpha = torch.zeros(H, W, dtype=dtype)
    contrib = torch.zeros(H, W, dtype=torch.int32)

    def run_tile(job):
        y0, y1, x0, x1 = job
        sel = torch.nonzero((x1s >= x0) & (x0s <= x1 - 1)
                            & (y1s >= y0) & (y0s <= y1 - 1),
                            as_tuple=False).squeeze(-1)
        if sel.numel() == 0:
            return job, None
        ys, xs = torch.meshgrid(
            torch.arange(y0, y1, dtype=dtype), torch.arange(x0, x1, dtype=dtype),
            indexing="ij")
        pix = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)  # (P, 2)
        d = pix.unsqueeze(0) - centers[sel].unsqueeze(1)             # (S, P, 2)
        dx, dy = d[..., 0], d[..., 1]
        power = -0.5 * (conic_a[sel, None] * dx ** 2 + conic_c[sel, None] * dy ** 2) \
            - conic_b[sel, None] * dx * dy
        sigma = torch.clamp(opac[sel, None] * torch.exp(power), max=SIGMA_CLAMP)
        keep_t = torch.cumprod(1.0 - sigma, dim=0)
        t_prev = torch.cat([torch.ones(1, sigma.shape[1], dtype=dtype),
                            keep_t[:-1]], dim=0)
        active = (t_prev >= T_STOP).to(dtype)
        wgt = sigma * t_prev * active
        rgb = (wgt.unsqueeze(-1) * colors[sel].unsqueeze(1)).sum(dim=0)
        a_out = wgt.sum(dim=0)
        n_contrib = ((active > 0) & (sigma.detach() > 1e-4)).sum(dim=0).to(torch.int32)
        h, w = y1 - y0, x1 - x0
        return job, (rgb.reshape(h, w, 3), a_out.reshape(h, w), n_contrib.reshape(h, w))

    jobs = list(_tile_jobs(H, W))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_tile, jobs))
    else:
        results = [run_tile(j) for j in jobs]

    # Assembled in fixed tile order regardless of worker count.
    for (y0, y1, x0, x1), res in results:
        if res is None:
            continue
        rgb, a_out, n_contrib = res
        image[y0:y1, x0:x1] = rgb
        alpha[y0:y1, x0:x1] = a_out
        contrib[y0:y1, x0:x1] = n_contrib

    return RenderOutput(image=torch.clamp(image, 0.0, 1.0), alpha=alpha,
                        contributors=contrib, raw_image=image,
                        n_culled=proj["n_culled"], means2d=means2d,
                        visible_index=proj["visible_index"])


def render_backward(cloud: GaussianCloud, view: CameraView,
                    upstream: torch.Tensor, t: int | None = None,
                    appearance=None) -> dict:
    """Gradients of sum(upstream * raw_image) for all Gaussian attributes."""
    leaves = {
        "mu": cloud.mu.detach().clone().requires_grad_(True),
        "rot": cloud.rot.detach().clone().requires_grad_(True),
        "log_scale": cloud.log_scale.detach().clone().requires_grad_(True),
        "opacity_logit": cloud.opacity_logit.detach().clone().requires_grad_(True),
        "sh": cloud.sh.detach().clone().requires_grad_(True),
    }
    leaf_cloud = GaussianCloud(
        mu=leaves["mu"], rot=leaves["rot"], log_scale=leaves["log_scale"],
        opacity_logit=leaves["opacity_logit"], sh=leaves["sh"],
        class_tag=cloud.class_tag, object_id=cloud.object_id,
        sh_degree=cloud.sh_degree)
    out = render(leaf_cloud, view, t=t, appearance=appearance)
    loss = (out.raw_image * torch.as_tensor(upstream, dtype=cloud.dtype)).sum()
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    return {name: (g if g is not None else torch.zeros_like(p))
            for (name, p), g in zip(leaves.items(), grads)}


def save_png(image: torch.Tensor, path):
    """Debug dump: linear [0,1] floats to 8-bit PNG."""
    from PIL import Image
    arr = (torch.clamp(image, 0, 1).detach().numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)
