"""Training losses and evaluation metrics.

All loss cores are differentiable torch functions so the training loops can
backprop through them; the `*_loss(pair)` wrappers additionally return the
gradient image demanded by the loss contracts.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyRegionError, InvalidSizeError
from .gaussians import extract_roll_pitch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 100.0


@dataclass
class LossWeights:
    lam: float = 0.2      # D-SSIM mix
    beta: float = 1000.0  # flatness weight
    gamma: float = 1.0    # SH-residual sparsity weight

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")


@dataclass
class MaskedImagePair:
    gt: torch.Tensor        # (H, W, 3)
    rendered: torch.Tensor  # (H, W, 3)
    mask: torch.Tensor      # (H, W) bool
    region_tag: str = "union"

    def __post_init__(self):
        self.gt = torch.as_tensor(self.gt)
        self.rendered = torch.as_tensor(self.rendered)
        self.mask = torch.as_tensor(self.mask, dtype=torch.bool)
        if self.gt.shape != self.rendered.shape or self.gt.shape[:2] != self.mask.shape:
            raise ValueError("image/mask shapes disagree")


def masked_l1(gt: torch.Tensor, rendered: torch.Tensor, mask: torch.Tensor,
              region_tag: str = "union") -> torch.Tensor:
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not mask.any():
        raise EmptyRegionError(region_tag)
    diff = (rendered - gt)[mask]
    return diff.abs().mean()


def l1_loss(pair: MaskedImagePair):
    """Masked mean absolute error; returns (value, dL/dRendered image)."""
    value = masked_l1(pair.gt, pair.rendered, pair.mask, pair.region_tag)
    n = int(pair.mask.sum()) * 3
    grad = torch.sign(pair.rendered - pair.gt) / n
    grad = grad * pair.mask.unsqueeze(-1)
    return value, grad


def _gaussian_window(dtype):
    half = SSIM_WINDOW // 2
    g = torch.exp(-torch.arange(-half, half + 1, dtype=dtype) ** 2 / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    win = torch.outer(g, g)
    return win.reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW).repeat(3, 1, 1, 1)


def _ssim_map(gt: torch.Tensor, rendered: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM, 11x11 Gaussian window sigma 1.5, reflect padding."""
    if gt.shape[0] < SSIM_WINDOW or gt.shape[1] < SSIM_WINDOW:
        raise InvalidSizeError(
            f"image {tuple(gt.shape[:2])} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = _gaussian_window(gt.dtype)
    pad = SSIM_WINDOW // 2

    def filt(img):
        x = img.permute(2, 0, 1).unsqueeze(0)
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
        return F.conv2d(x, win, groups=3).squeeze(0).permute(1, 2, 0)

    mu_x = filt(gt)
    mu_y = filt(rendered)
    sigma_x = filt(gt * gt) - mu_x ** 2
    sigma_y = filt(rendered * rendered) - mu_y ** 2
    sigma_xy = filt(gt * rendered) - mu_x * mu_y
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sigma_x + sigma_y + c2)
    return num / den


def masked_dssim(gt: torch.Tensor, rendered: torch.Tensor, mask: torch.Tensor,
                 region_tag: str = "union") -> torch.Tensor:
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not mask.any():
        raise EmptyRegionError(region_tag)
    smap = _ssim_map(gt, rendered)
    return ((1.0 - smap) / 2.0)[mask].mean()


def dssim_loss(pair: MaskedImagePair):
    """(1 - SSIM)/2 over masked window centers; returns (value, gradient image)."""
    rendered = pair.rendered.detach().clone().requires_grad_(True)
    value = masked_dssim(pair.gt, rendered, pair.mask, pair.region_tag)
    grad, = torch.autograd.grad(value, rendered)
    return value.detach(), grad


def flatness_penalty(rot: torch.Tensor, log_scale: torch.Tensor) -> torch.Tensor:
    """Mean of |roll| + |pitch| + |vertical scale| over the given Gaussians.

    Returns 0 for an empty subset (the constraint only applies to road/sky).
    """
    if rot.shape[0] == 0:
        return torch.zeros((), dtype=log_scale.dtype if log_scale.numel() else torch.float32)
    phi, theta = extract_roll_pitch(rot)
    s_z = torch.exp(log_scale[:, 2])
    return (phi.abs() + theta.abs() + s_z.abs()).mean()


def background_loss(pair: MaskedImagePair, flat_term: torch.Tensor,
                    weights: LossWeights) -> torch.Tensor:
    """(1 - lam) L1 + lam DSSIM + beta * flatness, one region."""
    l1 = masked_l1(pair.gt, pair.rendered, pair.mask, pair.region_tag)
    ds = masked_dssim(pair.gt, pair.rendered, pair.mask, pair.region_tag)
    return (1.0 - weights.lam) * l1 + weights.lam * ds + weights.beta * flat_term


def foreground_loss(gt: torch.Tensor, rendered: torch.Tensor,
                    reflected_rendered: torch.Tensor, mask: torch.Tensor,
                    delta_sh: torch.Tensor, weights: LossWeights,
                    region_tag: str = "foreground") -> torch.Tensor:
    """Direct + reflected photometric terms plus gamma-weighted residual sparsity."""
    lam = weights.lam
    loss = (1 - lam) * masked_l1(gt, rendered, mask, region_tag) \
        + lam * masked_dssim(gt, rendered, mask, region_tag) \
        + (1 - lam) * masked_l1(gt, reflected_rendered, mask, region_tag) \
        + lam * masked_dssim(gt, reflected_rendered, mask, region_tag)
    if delta_sh is not None and delta_sh.numel() > 0:
        loss = loss + weights.gamma * delta_sh.abs().mean()
    return loss


def total_loss(bg_loss: torch.Tensor, fg_loss: torch.Tensor) -> torch.Tensor:
    return bg_loss + fg_loss


def psnr(gt, rendered, mask=None) -> float:
    """10 log10(1 / MSE) on [0,1] images; identical images cap at 100 dB."""
    gt = torch.as_tensor(gt, dtype=torch.float64)
    rendered = torch.as_tensor(rendered, dtype=torch.float64)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        diff = (gt - rendered)[mask]
    else:
        diff = gt - rendered
    mse = float((diff ** 2).mean().detach())
    if mse <= 0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def ssim(gt, rendered, mask=None) -> float:
    gt = torch.as_tensor(gt, dtype=torch.float64)
    rendered = torch.as_tensor(rendered, dtype=torch.float64)
    smap = _ssim_map(gt, rendered)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        return float(smap[mask].mean())
    return float(smap.mean())


class LossLogger:
    """JSONL report, one line per (iteration, term)."""

    def __init__(self, path=None):
        self.path = path
        self._fh = open(path, "w") if path is not None else None

    def log(self, iteration: int, term_name: str, value: float):
        if self._fh is not None:
            self._fh.write(json.dumps(
                {"iter": int(iteration), "term_name": term_name,
                 "value": float(value)}) + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.flush()
            self._fh.close()
            self._fh = None
