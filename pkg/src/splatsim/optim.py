"""Adam over named Gaussian attribute groups, plus densification control.

The optimizer owns its parameter tensors exclusively during a step; clones and
splits rewrite both the cloud attributes and the per-row Adam state in one
place so the two never drift apart.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch

from .gaussians import (CLASS_FOREGROUND, CLASS_OTHER, CLASS_ROAD, CLASS_SKY,
                        GaussianCloud, quat_to_matrix, normalize_quat)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

# Per-attribute defaults (3DGS-style contract for this artifact).
DEFAULT_LRS = {
    "mu": 1.6e-4,
    "rot": 1e-3,
    "log_scale": 5e-3,
    "opacity_logit": 5e-2,
    "sh": 2.5e-3,
    "correction_pose": 1e-4,
    "mlp": 1e-3,
    "temporal_embedding": 1e-3,
}
MU_LR_FINAL_FACTOR = 0.01


def exp_lr(lr0: float, t: int, total: int, final_factor: float = MU_LR_FINAL_FACTOR) -> float:
    """Exponential decay from lr0 to lr0*final_factor over `total` steps."""
    if total <= 0:
        return lr0
    frac = min(max(t / total, 0.0), 1.0)
    return lr0 * final_factor ** frac


@dataclass
class ParamGroupConfig:
    lr: float
    frozen: bool = False


@dataclass
class DensifyConfig:
    grad_threshold: float = 0.001
    interval: int = 100
    split_scale_threshold: float = 0.5
    prune_opacity: float = 0.005
    enabled_classes: frozenset = frozenset({CLASS_OTHER, CLASS_FOREGROUND})
    split_factor: float = 1.6
    growth_cap: float = 4.0  # times initial count

    def __post_init__(self):
        if self.grad_threshold <= 0:
            raise ValueError("grad_threshold must be positive")


class Adam:
    """Standard Adam with per-group learning rates, freezing, and row masks."""

    def __init__(self, params: dict[str, torch.Tensor],
                 configs: dict[str, ParamGroupConfig],
                 frozen_rows: dict[str, torch.Tensor] | None = None):
        self.params = params
        self.configs = configs
        self.frozen_rows = frozen_rows or {}
        self.state = {}
        for name, p in params.items():
            p.requires_grad_(not configs[name].frozen)
            self.state[name] = {"m": torch.zeros_like(p), "v": torch.zeros_like(p),
                                "t": 0}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def set_lr(self, name: str, lr: float):
        self.configs[name].lr = lr

    @torch.no_grad()
    def step(self):
        for name, p in self.params.items():
            cfg = self.configs[name]
            st = self.state[name]
            if cfg.frozen:
                continue
            st["t"] += 1
            g = p.grad
            if g is None:
                continue
            rows = self.frozen_rows.get(name)
            if rows is not None:
                g = g.clone()
                g[rows] = 0.0
            st["m"].mul_(ADAM_BETA1).add_(g, alpha=1 - ADAM_BETA1)
            st["v"].mul_(ADAM_BETA2).addcmul_(g, g, value=1 - ADAM_BETA2)
            m_hat = st["m"] / (1 - ADAM_BETA1 ** st["t"])
            v_hat = st["v"] / (1 - ADAM_BETA2 ** st["t"])
            p.add_(-cfg.lr * m_hat / (v_hat.sqrt() + ADAM_EPS))

    @torch.no_grad()
    def rewrite_rows(self, name: str, keep_mask: torch.Tensor,
                     appended: torch.Tensor):
        """Row surgery: keep masked rows, append new rows with zero state."""
        p = self.params[name]
        new_p = torch.cat([p[keep_mask], appended]).requires_grad_(p.requires_grad)
        st = self.state[name]
        st["m"] = torch.cat([st["m"][keep_mask], torch.zeros_like(appended)])
        st["v"] = torch.cat([st["v"][keep_mask], torch.zeros_like(appended)])
        self.params[name] = new_p
        return new_p


def cloud_optimizer(cloud: GaussianCloud, lrs: dict | None = None,
                    frozen: set[str] = frozenset(),
                    frozen_mu_rows: torch.Tensor | None = None) -> Adam:
    lrs = {**DEFAULT_LRS, **(lrs or {})}
    params = {"mu": cloud.mu, "rot": cloud.rot, "log_scale": cloud.log_scale,
              "opacity_logit": cloud.opacity_logit, "sh": cloud.sh}
    configs = {name: ParamGroupConfig(lr=lrs[name], frozen=name in frozen)
               for name in params}
    frozen_rows = {}
    if frozen_mu_rows is not None:
        frozen_rows["mu"] = frozen_mu_rows
    return Adam(params, configs, frozen_rows)


class DensifyState:
    """Accumulates screen-space positional gradient norms between densify calls."""

    def __init__(self, count: int):
        self.grad_accum = torch.zeros(count)
        self.obs_count = torch.zeros(count)

    def record(self, visible_index: torch.Tensor, means2d_grad: torch.Tensor):
        norms = means2d_grad.detach().norm(dim=-1).to(self.grad_accum.dtype)
        self.grad_accum.index_add_(0, visible_index, norms)
        self.obs_count.index_add_(0, visible_index,
                                  torch.ones_like(norms))

    def mean_grads(self) -> torch.Tensor:
        return self.grad_accum / self.obs_count.clamp(min=1)

    def reset(self, count: int):
        self.grad_accum = torch.zeros(count)
        self.obs_count = torch.zeros(count)


@torch.no_grad()
def densify_and_prune(cloud: GaussianCloud, optimizer: Adam,
                      mean_grads: torch.Tensor, config: DensifyConfig,
                      initial_count: int) -> GaussianCloud:
    """Clone/split high-gradient Gaussians and prune transparent ones.

    Road and sky Gaussians are never moved, cloned, split, or pruned. Returns
    the (possibly new) cloud; optimizer rows are rewritten in lockstep.
    """
    enabled = torch.tensor(
        [int(c) in config.enabled_classes for c in cloud.class_tag],
        dtype=torch.bool)
    opac = torch.sigmoid(cloud.opacity_logit)
    prune = enabled & (opac < config.prune_opacity)
    keep = ~prune

    over = enabled & keep & (mean_grads.to(cloud.dtype) > config.grad_threshold)
    scales = torch.exp(cloud.log_scale)
    s_max, s_axis = scales.max(dim=-1)
    small = over & (s_max < config.split_scale_threshold)
    large = over & ~small

    cap = int(config.growth_cap * initial_count)
    n_new = int(small.sum()) + 2 * int(large.sum())
    if int(keep.sum()) + n_new > cap:
        log.warning("densify skipped: cloud at growth cap (%d)", cap)
        small = torch.zeros_like(small)
        large = torch.zeros_like(large)

    # Clones: duplicate in place.
    clone_rows = {name: optimizer.params[name][small]
                  for name in ("mu", "rot", "log_scale", "opacity_logit", "sh")}

    # Splits: two children, scale / split_factor, offset along the widest axis.
    R = quat_to_matrix(normalize_quat(cloud.rot[large]))
    axis = R[torch.arange(R.shape[0]), :, s_axis[large]]
    offset = 0.5 * s_max[large].unsqueeze(-1) * axis
    child_scale = cloud.log_scale[large] - math.log(config.split_factor)
    split_rows = {
        "mu": torch.cat([cloud.mu[large] + offset, cloud.mu[large] - offset]),
        "rot": cloud.rot[large].repeat(2, 1),
        "log_scale": child_scale.repeat(2, 1),
        "opacity_logit": cloud.opacity_logit[large].repeat(2),
        "sh": cloud.sh[large].repeat(2, 1, 1),
    }
    keep_final = keep & ~large  # split parents are replaced by their children

    new_attrs = {}
    for name in ("mu", "rot", "log_scale", "opacity_logit", "sh"):
        appended = torch.cat([clone_rows[name], split_rows[name]])
        new_attrs[name] = optimizer.rewrite_rows(name, keep_final, appended)

    tag_app = torch.cat([cloud.class_tag[small], cloud.class_tag[large].repeat(2)])
    oid_app = torch.cat([cloud.object_id[small], cloud.object_id[large].repeat(2)])
    new_cloud = GaussianCloud(
        mu=new_attrs["mu"], rot=new_attrs["rot"], log_scale=new_attrs["log_scale"],
        opacity_logit=new_attrs["opacity_logit"], sh=new_attrs["sh"],
        class_tag=torch.cat([cloud.class_tag[keep_final], tag_app]),
        object_id=torch.cat([cloud.object_id[keep_final], oid_app]),
        sh_degree=cloud.sh_degree)

    rows = optimizer.frozen_rows.get("mu")
    if rows is not None:
        optimizer.frozen_rows["mu"] = torch.cat(
            [rows[keep_final], torch.zeros(tag_app.shape[0], dtype=torch.bool)])
    return new_cloud
