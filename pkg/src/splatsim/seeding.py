"""Cloud initialization from 3D point sets."""
from __future__ import annotations

import numpy as np
import torch
from scipy.spatial import cKDTree

from .gaussians import GaussianCloud, rgb_to_dc, sh_coeff_count

INIT_OPACITY = 0.1


def knn_mean_distance(xyz: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the k nearest neighbors (excluding self)."""
    tree = cKDTree(xyz)
    d, _ = tree.query(xyz, k=k + 1)
    return d[:, 1:].mean(axis=1)


def surfel_frames(xyz: np.ndarray, k: int = 8):
    """Local tangent frame per point from PCA over the k nearest neighbors.

    Returns rotation matrices (N, 3, 3) whose third column is the estimated
    surface normal (smallest-variance direction of the neighborhood).
    """
    tree = cKDTree(xyz)
    _, idx = tree.query(xyz, k=min(k + 1, len(xyz)))
    nbrs = xyz[idx]                                   # (N, k+1, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / centered.shape[1]
    _, vecs = np.linalg.eigh(cov)                     # ascending eigenvalues
    # Columns: two tangents, then the normal; fix handedness to det +1.
    rots = np.stack([vecs[:, :, 1], vecs[:, :, 2], vecs[:, :, 0]], axis=2)
    flip = np.linalg.det(rots) < 0
    rots[flip, :, 1] *= -1.0
    return rots


def _mats_to_quats(rots: np.ndarray) -> np.ndarray:
    """Rotation matrices -> unit quaternions in (w, x, y, z) order."""
    from scipy.spatial.transform import Rotation
    q = Rotation.from_matrix(rots).as_quat()          # (x, y, z, w)
    return np.column_stack([q[:, 3], q[:, 0], q[:, 1], q[:, 2]])


def cloud_from_points(xyz: np.ndarray, rgb: np.ndarray | None,
                      class_tag: np.ndarray, object_id: np.ndarray | None = None,
                      sh_degree: int = 2, dtype=torch.float32,
                      min_scale: float = 1e-4,
                      surfel_flatten: float | None = None) -> GaussianCloud:
    """Gaussians at the points; kNN scale, opacity 0.1, DC from color.

    With `surfel_flatten` set, each Gaussian is oriented to its local PCA
    tangent plane and its normal-axis scale is shrunk by that factor: a
    surfel init. Isotropic spheres on sampled surfaces bulge off the surface
    and, seen at grazing angles near the camera, fog the whole frame.
    """
    n = len(xyz)
    k = sh_coeff_count(sh_degree)
    scale = np.maximum(knn_mean_distance(xyz), min_scale) if n > 3 \
        else np.full(n, 0.1)
    sh = torch.zeros(n, k, 3, dtype=dtype)
    if rgb is not None:
        sh[:, 0, :] = rgb_to_dc(torch.tensor(np.clip(rgb, 0, 1), dtype=dtype))
    rot = torch.zeros(n, 4, dtype=dtype)
    rot[:, 0] = 1.0
    if object_id is None:
        object_id = np.zeros(n, dtype=np.int32)
    log_scale = torch.log(torch.tensor(scale, dtype=dtype)).unsqueeze(-1).repeat(1, 3)
    if surfel_flatten is not None and n > 3:
        rot = torch.tensor(_mats_to_quats(surfel_frames(xyz)), dtype=dtype)
        log_scale[:, 2] += float(np.log(surfel_flatten))
    return GaussianCloud(
        mu=torch.tensor(xyz, dtype=dtype),
        rot=rot,
        log_scale=log_scale,
        opacity_logit=torch.full((n,), float(np.log(INIT_OPACITY / (1 - INIT_OPACITY))),
                                 dtype=dtype),
        sh=sh,
        class_tag=torch.tensor(np.asarray(class_tag, dtype=np.int8)),
        object_id=torch.tensor(np.asarray(object_id, dtype=np.int32)),
        sh_degree=sh_degree)
