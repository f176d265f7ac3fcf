"""Heatmap regression losses and the two-head coarse/fine combination.

The exponential center-weighted loss multiplies the per-pixel squared error
by alpha**y, y being the ground-truth intensity, so pixels near a landmark
(y -> 1) weigh up to alpha while background pixels (y -> 0) keep weight 1.
With alpha = 1 it reduces exactly to the plain mean squared error.

Functions accept HeatmapStack, numpy arrays, or torch tensors. Torch inputs
keep their autograd graph and return a 0-dim tensor; anything else returns a
plain float.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .exceptions import ConfigError, ParameterError, ShapeError
from .heatmaps import (
    Frame,
    FrameTransform,
    HeatmapGrid,
    HeatmapStack,
    LandmarkSet,
    encode_heatmap_stack,
    map_coordinates,
)

__all__ = ["LossConfig", "l2_heatmap_loss", "ewc_loss", "ewc_loss_grad", "coarse_fine_loss", "CoarseFineLoss"]


@dataclass
class LossConfig:
    """Loss selection plus the coarse/fine head weighting."""

    alpha: float = 40.0
    loss_kind: str = "ewc"               # "l2" or "ewc"
    head_weights: tuple[float, float] = (1.0, 1.0)   # (coarse, fine)
    reduction: str = "mean"

    def __post_init__(self):
        if self.alpha < 1:
            raise ParameterError(f"alpha must be >= 1, got {self.alpha}")
        if self.loss_kind not in ("l2", "ewc"):
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")
        if self.reduction != "mean":
            raise ConfigError(f"only mean reduction is supported, got {self.reduction!r}")
        wc, wf = self.head_weights
        if wc < 0 or wf < 0 or (wc == 0 and wf == 0):
            raise ConfigError(f"head weights must be non-negative and not both zero, got {self.head_weights}")


def _as_tensor(x) -> tuple[torch.Tensor, bool]:
    """Return (tensor, was_torch). HeatmapStacks and numpy arrays convert losslessly."""
    if isinstance(x, HeatmapStack):
        x = x.data
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.from_numpy(np.ascontiguousarray(x)), False


def _pair(pred, gt) -> tuple[torch.Tensor, torch.Tensor, bool]:
    p, p_torch = _as_tensor(pred)
    g, g_torch = _as_tensor(gt)
    if p.shape != g.shape:
        raise ShapeError(f"pred shape {tuple(p.shape)} != gt shape {tuple(g.shape)}")
    return p, g, p_torch or g_torch


def l2_heatmap_loss(pred, gt):
    """Mean over all K*H*W pixels of the squared error."""
    p, g, keep_tensor = _pair(pred, gt)
    loss = ((g - p) ** 2).mean()
    return loss if keep_tensor else float(loss)


def ewc_loss(pred, gt, alpha: float = 40.0):
    """Mean over all pixels of (y - y_hat)^2 * alpha**y.

    The weight depends only on the ground-truth intensity y, so gradients
    w.r.t. the prediction are the plain squared-error gradients scaled by
    alpha**y (see `ewc_loss_grad`).
    """
    if alpha < 1:
        raise ParameterError(f"alpha must be >= 1, got {alpha}")
    p, g, keep_tensor = _pair(pred, gt)
    loss = ((g - p) ** 2 * torch.pow(torch.as_tensor(alpha, dtype=g.dtype), g)).mean()
    return loss if keep_tensor else float(loss)


def ewc_loss_grad(pred, gt, alpha: float = 40.0) -> np.ndarray:
    """Closed-form gradient of `ewc_loss` w.r.t. the prediction.

    Per pixel: -2 (y - y_hat) * alpha**y / N with N the pixel count.
    """
    if alpha < 1:
        raise ParameterError(f"alpha must be >= 1, got {alpha}")
    p, g, _ = _pair(pred, gt)
    p = p.detach().cpu().numpy().astype(np.float64)
    g = g.detach().cpu().numpy().astype(np.float64)
    return -2.0 * (g - p) * np.power(alpha, g) / g.size


class CoarseFineLoss(NamedTuple):
    total: object   # torch scalar or float, matching the inputs
    coarse: object
    fine: object


def _head_loss(pred: torch.Tensor, gt: torch.Tensor, config: LossConfig) -> torch.Tensor:
    if config.loss_kind == "l2":
        return ((gt - pred) ** 2).mean()
    return ((gt - pred) ** 2 * torch.pow(torch.as_tensor(config.alpha, dtype=gt.dtype), gt)).mean()


def _encode_targets(
    landmark_sets: Sequence[LandmarkSet],
    grid: HeatmapGrid,
    net_size: tuple[int, int],
    sigma: float,
    like: torch.Tensor,
) -> torch.Tensor:
    """Encode per-sample ground truth on `grid`, stacked to match `like` (B,K,H,W)."""
    transform = FrameTransform(net_size, (grid.width, grid.height), Frame.NET_INPUT, grid.frame)
    stacks = []
    for lms in landmark_sets:
        mapped = map_coordinates(lms, transform)
        stacks.append(encode_heatmap_stack(mapped, grid, sigma).data)
    target = torch.from_numpy(np.stack(stacks)).to(dtype=like.dtype, device=like.device)
    return target


def coarse_fine_loss(
    coarse_pred,
    fine_pred,
    landmarks: LandmarkSet | Sequence[LandmarkSet],
    sigma: float,
    config: LossConfig,
) -> CoarseFineLoss:
    """Supervise the half-resolution and full-resolution heads together.

    `landmarks` are in the net-input frame; ground truth is encoded
    independently on each head's grid (coordinates scaled, never rounded)
    with the same sigma, so the stride-2 target is effectively coarser.
    Returns (w_coarse * L_coarse + w_fine * L_fine, L_coarse, L_fine).

    Predictions are (K, H, W) or (B, K, H, W); `fine_pred` may be None when
    the model runs without a refinement head, contributing 0.
    """
    coarse, coarse_torch = _as_tensor(coarse_pred)
    batched = coarse.ndim == 4
    if not batched:
        coarse = coarse[None]
    if isinstance(landmarks, LandmarkSet):
        landmark_sets = [landmarks]
    else:
        landmark_sets = list(landmarks)
    if len(landmark_sets) != coarse.shape[0]:
        raise ShapeError(f"{coarse.shape[0]} predictions but {len(landmark_sets)} landmark sets")

    keep_tensor = coarse_torch
    hc, wc = coarse.shape[-2:]
    if fine_pred is not None:
        fine, fine_torch = _as_tensor(fine_pred)
        keep_tensor = keep_tensor or fine_torch
        if not batched:
            fine = fine[None]
        hf, wf = fine.shape[-2:]
        if (hf, wf) != (2 * hc, 2 * wc):
            raise ConfigError(
                f"fine head {hf}x{wf} is not stride 1 against coarse head {hc}x{wc} (expected x2)"
            )
        net_size = (wf, hf)
    else:
        fine = None
        net_size = (2 * wc, 2 * hc)

    coarse_grid = HeatmapGrid(wc, hc, stride_wrt_input=2)
    coarse_gt = _encode_targets(landmark_sets, coarse_grid, net_size, sigma, coarse)
    loss_coarse = _head_loss(coarse, coarse_gt, config)

    if fine is not None:
        fine_grid = HeatmapGrid(net_size[0], net_size[1], stride_wrt_input=1)
        fine_gt = _encode_targets(landmark_sets, fine_grid, net_size, sigma, fine)
        loss_fine = _head_loss(fine, fine_gt, config)
    else:
        loss_fine = torch.zeros((), dtype=coarse.dtype)

    wc_, wf_ = config.head_weights
    total = wc_ * loss_coarse + wf_ * loss_fine
    if keep_tensor:
        return CoarseFineLoss(total, loss_coarse, loss_fine)
    return CoarseFineLoss(float(total), float(loss_coarse), float(loss_fine))
