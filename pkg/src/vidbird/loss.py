"""Per-anchor confidence + CIOU regression loss.

Positives contribute ``L_conf + alpha * L_ciou``, negatives ``L_conf`` and
ignored anchors nothing. The sum is divided by N, the positive count, or by
``fixed_N`` when an image has no positives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .assignment import AnchorGrid, AssignmentResult, Label
from .boxes import as_box_array


@dataclass
class LossConfig:
    alpha: float = 5.0
    fixed_N: float = 16.0

    def __post_init__(self):
        if self.alpha <= 0 or self.fixed_N <= 0:
            raise ValueError("alpha and fixed_N must be positive")


@dataclass
class LossTerms:
    total: torch.Tensor
    conf: torch.Tensor  # sum of confidence losses / N
    reg: torch.Tensor  # sum of CIOU losses / N (before alpha)
    normalizer: float
    positives: int


def confidence_loss(conf: torch.Tensor, labels, target: torch.Tensor | None = None) -> torch.Tensor:
    """Squared error to 1 (positive) or 0 (negative); ignored anchors give exactly 0.

    ``target`` optionally replaces the positive target of 1 with soft values.
    """
    labels = torch.as_tensor(np.asarray(labels), device=conf.device)
    pos = labels == Label.POSITIVE
    neg = labels == Label.NEGATIVE
    one = torch.ones_like(conf) if target is None else target.to(conf)
    loss = torch.where(pos, (conf - one) ** 2, torch.zeros_like(conf))
    return torch.where(neg, conf ** 2, loss)


def ciou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """CIOU loss for ``(..., 4)`` box pairs; the aspect weight is detached."""
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt).to(pred)
    gw, gh = gt[..., 2] - gt[..., 0], gt[..., 3] - gt[..., 1]
    if bool((gw <= 0).any()) or bool((gh <= 0).any()):
        raise ValueError("ground-truth box has zero or negative area")
    pw, ph = pred[..., 2] - pred[..., 0], pred[..., 3] - pred[..., 1]

    iw = (torch.minimum(pred[..., 2], gt[..., 2]) - torch.maximum(pred[..., 0], gt[..., 0])).clamp(min=0)
    ih = (torch.minimum(pred[..., 3], gt[..., 3]) - torch.maximum(pred[..., 1], gt[..., 1])).clamp(min=0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou = inter / union

    cw = torch.maximum(pred[..., 2], gt[..., 2]) - torch.minimum(pred[..., 0], gt[..., 0])
    ch = torch.maximum(pred[..., 3], gt[..., 3]) - torch.minimum(pred[..., 1], gt[..., 1])
    c2 = cw ** 2 + ch ** 2
    rho2 = ((pred[..., 0] + pred[..., 2] - gt[..., 0] - gt[..., 2]) ** 2
            + (pred[..., 1] + pred[..., 3] - gt[..., 1] - gt[..., 3]) ** 2) / 4

    v = (4 / math.pi ** 2) * (torch.atan(gw / gh) - torch.atan(pw / ph)) ** 2
    with torch.no_grad():
        alpha_v = v / ((1 - iou) + v).clamp(min=torch.finfo(v.dtype).tiny)
    return 1 - iou + rho2 / c2 + alpha_v * v


def decode_boxes(reg: torch.Tensor, grid: AnchorGrid) -> torch.Tensor:
    """``(..., K, 4)`` distances (l, t, r, b) -> ``(..., K, 4)`` boxes at the grid anchors."""
    pts = torch.as_tensor(grid.points(), dtype=reg.dtype, device=reg.device)
    x, y = pts[:, 0], pts[:, 1]
    return torch.stack([x - reg[..., 0], y - reg[..., 1], x + reg[..., 2], y + reg[..., 3]], dim=-1)


def total_loss(
    conf: torch.Tensor,
    reg: torch.Tensor,
    assignment: AssignmentResult,
    gts,
    grid: AnchorGrid,
    cfg: LossConfig | None = None,
) -> LossTerms:
    """Loss for one image: ``conf`` is ``(K,)`` and ``reg`` is ``(K, 4)`` distances."""
    cfg = cfg or LossConfig()
    labels = assignment.labels
    target = None
    if assignment.soft_target is not None:
        target = torch.as_tensor(assignment.soft_target, dtype=conf.dtype)
    conf_sum = confidence_loss(conf, labels, target).sum()

    pos = np.flatnonzero(labels == Label.POSITIVE)
    n_pos = int(pos.size)
    if n_pos:
        g = torch.as_tensor(as_box_array(gts)[assignment.gt_index[pos]], dtype=reg.dtype)
        idx = torch.as_tensor(pos)
        boxes = decode_boxes(reg, grid)[idx]
        reg_sum = ciou_loss(boxes, g).sum()
    else:
        reg_sum = reg.sum() * 0.0
    normalizer = float(n_pos) if n_pos else float(cfg.fixed_N)
    conf_c = conf_sum / normalizer
    reg_c = reg_sum / normalizer
    return LossTerms(conf_c + cfg.alpha * reg_c, conf_c, reg_c, normalizer, n_pos)
