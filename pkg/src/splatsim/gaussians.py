"""Gaussian primitive: parameterization, covariance, SH color, rotation utilities.

All heavy operations are written in torch so gradients flow through the
activations (exp for scale, sigmoid for opacity, quaternion normalization).
Clouds are arrays-of-attributes; a row is one Gaussian.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidParameterError

# Semantic class codes stored per Gaussian.
CLASS_OTHER = 0
CLASS_ROAD = 1
CLASS_SKY = 2
CLASS_FOREGROUND = 3

CLASS_NAMES = {CLASS_OTHER: "other", CLASS_ROAD: "road", CLASS_SKY: "sky",
               CLASS_FOREGROUND: "foreground"}

# Real spherical harmonics constants, degrees 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

# Monomial parity (x, y, z) of each basis function; used to build the
# per-coefficient sign table for axis-aligned reflections.
SH_PARITY = (
    (0, 0, 0),
    (0, 1, 0), (0, 0, 1), (1, 0, 0),
    (1, 1, 0), (0, 1, 1), (0, 0, 0), (1, 0, 1), (0, 0, 0),
    (0, 1, 0), (1, 1, 1), (0, 1, 0), (0, 0, 1), (1, 0, 0), (0, 0, 1), (1, 0, 0),
)


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def normalize_quat(q: torch.Tensor) -> torch.Tensor:
    """Normalize (..., 4) quaternions; differentiable."""
    return q / q.norm(dim=-1, keepdim=True)


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) wxyz unit quaternion -> (..., 3, 3) rotation matrix."""
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def matrix_to_quat(R: torch.Tensor) -> torch.Tensor:
    """(..., 3, 3) rotation -> (..., 4) wxyz quaternion with w >= 0."""
    R = R.reshape(-1, 3, 3)
    out = torch.empty(R.shape[0], 4, dtype=R.dtype)
    for i in range(R.shape[0]):
        m = R[i]
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = torch.sqrt(tr + 1.0) * 2
            q = torch.stack([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                             (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = torch.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = torch.stack([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                             (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
        elif m[1, 1] > m[2, 2]:
            s = torch.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = torch.stack([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                             0.25 * s, (m[1, 2] + m[2, 1]) / s])
        else:
            s = torch.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = torch.stack([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                             (m[1, 2] + m[2, 1]) / s, 0.25 * s])
        if q[0] < 0:
            q = -q
        out[i] = q / q.norm()
    return out


def quat_from_axis_angle(axis, angle: float, dtype=torch.float64) -> torch.Tensor:
    axis = torch.as_tensor(axis, dtype=dtype)
    axis = axis / axis.norm()
    half = float(angle) / 2.0
    return torch.cat([torch.tensor([np.cos(half)], dtype=dtype), np.sin(half) * axis])


def build_covariance(rot: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Sigma = R * diag(s) * diag(s)^T * R^T for (..., 4) quats and (..., 3) scales."""
    rot = torch.as_tensor(rot)
    s = torch.as_tensor(s)
    if not (torch.isfinite(rot).all() and torch.isfinite(s).all()):
        raise InvalidParameterError("non-finite rotation or scale")
    if (s <= 0).any():
        raise InvalidParameterError("scale must be strictly positive")
    R = quat_to_matrix(normalize_quat(rot))
    RS = R * s.unsqueeze(-2)  # columns scaled
    return RS @ RS.transpose(-1, -2)


def eval_gaussian(x: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)); scalar in (0, 1]."""
    x = torch.as_tensor(x, dtype=torch.float64)
    mu = torch.as_tensor(mu, dtype=torch.float64)
    sigma = torch.as_tensor(sigma, dtype=torch.float64)
    from .errors import DegenerateCovarianceError
    if torch.linalg.det(sigma).abs() < 1e-18:
        raise DegenerateCovarianceError(0)
    d = (x - mu).reshape(3, 1)
    q = (d.T @ torch.linalg.inv(sigma) @ d).squeeze()
    return torch.exp(-0.5 * q)


def sh_basis(dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Real SH basis values, (..., 3) unit dirs -> (..., (degree+1)^2)."""
    x, y, z = dirs.unbind(-1)
    one = torch.ones_like(x)
    cols = [SH_C0 * one]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                 SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        cols += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                 SH_C3[2] * y * (4 * zz - xx - yy),
                 SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                 SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                 SH_C3[6] * x * (xx - 3 * yy)]
    return torch.stack(cols, dim=-1)


def eval_sh_color(sh: torch.Tensor, view_dir: torch.Tensor, degree: int) -> torch.Tensor:
    """SH color with the +0.5 offset, clamped at 0 from below.

    sh: (..., K, 3) coefficients, view_dir: (..., 3) unit vectors.
    """
    basis = sh_basis(view_dir, degree)  # (..., K')
    k = basis.shape[-1]
    color = (sh[..., :k, :] * basis.unsqueeze(-1)).sum(dim=-2) + 0.5
    return torch.clamp(color, min=0.0)


def sh_reflection_signs(axis_index: int, degree: int, dtype=torch.float64) -> torch.Tensor:
    """Per-coefficient +-1 for reflecting SH across the plane normal to a
    coordinate axis (0=x, 1=y, 2=z)."""
    k = sh_coeff_count(degree)
    signs = [(-1.0) ** SH_PARITY[i][axis_index] for i in range(k)]
    return torch.tensor(signs, dtype=dtype)


def extract_roll_pitch(rot: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """ZYX Euler roll (phi) and pitch (theta) of (..., 4) unit quaternions.

    theta = -asin(R[2,0]); phi = atan2(R[2,1], R[2,2]). Near gimbal lock the
    convention is theta = +-pi/2, phi = 0.
    """
    R = quat_to_matrix(normalize_quat(torch.as_tensor(rot)))
    r20 = R[..., 2, 0]
    locked = r20.abs() > 1.0 - 1e-7
    theta = -torch.asin(torch.clamp(r20, -1.0, 1.0))
    phi = torch.atan2(R[..., 2, 1], R[..., 2, 2])
    phi = torch.where(locked, torch.zeros_like(phi), phi)
    return phi, theta


@dataclass
class CameraView:
    """Pinhole camera: intrinsics, rigid pose, resolution, time index."""

    K: np.ndarray                # 3x3
    cam_to_world: np.ndarray     # 4x4 rigid
    width: int
    height: int
    frame_index: int = 0

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64)
        R = self.cam_to_world[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise InvalidParameterError("cam_to_world rotation is not a proper rotation")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise InvalidParameterError("focal lengths must be positive")

    @property
    def fx(self):
        return float(self.K[0, 0])

    @property
    def fy(self):
        return float(self.K[1, 1])

    @property
    def cx(self):
        return float(self.K[0, 2])

    @property
    def cy(self):
        return float(self.K[1, 2])

    def world_to_cam(self) -> np.ndarray:
        R = self.cam_to_world[:3, :3]
        t = self.cam_to_world[:3, 3]
        out = np.eye(4)
        out[:3, :3] = R.T
        out[:3, 3] = -R.T @ t
        return out

    def center(self) -> np.ndarray:
        return self.cam_to_world[:3, 3].copy()


@dataclass
class GaussianCloud:
    """Array-of-attributes store for N Gaussians."""

    mu: torch.Tensor             # (N, 3)
    rot: torch.Tensor            # (N, 4) wxyz, renormalized after steps
    log_scale: torch.Tensor      # (N, 3)
    opacity_logit: torch.Tensor  # (N,)
    sh: torch.Tensor             # (N, K, 3)
    class_tag: torch.Tensor      # (N,) int8 in {OTHER, ROAD, SKY, FOREGROUND}
    object_id: torch.Tensor = None  # (N,) int32, 0 = none
    sh_degree: int = 2

    def __post_init__(self):
        if self.object_id is None:
            self.object_id = torch.zeros(self.mu.shape[0], dtype=torch.int32)
        self.validate()

    def validate(self):
        n = self.mu.shape[0]
        for name in ("rot", "log_scale", "opacity_logit", "sh", "class_tag", "object_id"):
            if getattr(self, name).shape[0] != n:
                raise InvalidParameterError(f"attribute {name} length mismatch")
        k = sh_coeff_count(self.sh_degree)
        if self.sh.shape[1] != k or self.sh.shape[2] != 3:
            raise InvalidParameterError(
                f"sh must be (N, {k}, 3) for degree {self.sh_degree}, got {tuple(self.sh.shape)}")

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    @property
    def dtype(self):
        return self.mu.dtype

    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scale)

    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logit)

    def unit_rot(self) -> torch.Tensor:
        return normalize_quat(self.rot)

    def renormalize_rotations(self):
        with torch.no_grad():
            self.rot /= self.rot.norm(dim=-1, keepdim=True)

    def subset(self, mask: torch.Tensor) -> "GaussianCloud":
        return GaussianCloud(
            mu=self.mu[mask], rot=self.rot[mask], log_scale=self.log_scale[mask],
            opacity_logit=self.opacity_logit[mask], sh=self.sh[mask],
            class_tag=self.class_tag[mask], object_id=self.object_id[mask],
            sh_degree=self.sh_degree)

    def clone(self) -> "GaussianCloud":
        return GaussianCloud(
            mu=self.mu.detach().clone(), rot=self.rot.detach().clone(),
            log_scale=self.log_scale.detach().clone(),
            opacity_logit=self.opacity_logit.detach().clone(),
            sh=self.sh.detach().clone(), class_tag=self.class_tag.clone(),
            object_id=self.object_id.clone(), sh_degree=self.sh_degree)

    def to(self, dtype) -> "GaussianCloud":
        return GaussianCloud(
            mu=self.mu.to(dtype), rot=self.rot.to(dtype),
            log_scale=self.log_scale.to(dtype),
            opacity_logit=self.opacity_logit.to(dtype), sh=self.sh.to(dtype),
            class_tag=self.class_tag.clone(), object_id=self.object_id.clone(),
            sh_degree=self.sh_degree)


def concat_clouds(clouds: list[GaussianCloud]) -> GaussianCloud:
    deg = clouds[0].sh_degree
    if any(c.sh_degree != deg for c in clouds):
        raise InvalidParameterError("cannot concat clouds with mixed SH degree")
    return GaussianCloud(
        mu=torch.cat([c.mu for c in clouds]),
        rot=torch.cat([c.rot for c in clouds]),
        log_scale=torch.cat([c.log_scale for c in clouds]),
        opacity_logit=torch.cat([c.opacity_logit for c in clouds]),
        sh=torch.cat([c.sh for c in clouds]),
        class_tag=torch.cat([c.class_tag for c in clouds]),
        object_id=torch.cat([c.object_id for c in clouds]),
        sh_degree=deg)


def rgb_to_dc(rgb: torch.Tensor) -> torch.Tensor:
    """Inverse of the degree-0 color mapping: dc = (rgb - 0.5) / Y00."""
    return (rgb - 0.5) / SH_C0
