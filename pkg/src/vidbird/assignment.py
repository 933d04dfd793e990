"""Anchor-point label assignment for one-category detection.

``simota_oc_assign`` is the dynamic strategy: anchors strictly inside a GT
box are candidates, each GT takes the ceil of its summed candidate IOUs as
its positive count, and contested anchors go to the GT with the larger IOU.
``shrink_box_assign`` and ``center_gaussian_assign`` are static baselines.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .boxes import as_box_array, box_iou


class Label(IntEnum):
    IGNORED = -1
    NEGATIVE = 0
    POSITIVE = 1


@dataclass(frozen=True)
class AnchorGrid:
    """One anchor per output cell at ``((j + 0.5) * stride, (i + 0.5) * stride)``."""

    height: int
    width: int
    stride: int = 2

    @classmethod
    def for_input(cls, input_size: tuple[int, int], stride: int = 2) -> "AnchorGrid":
        w, h = input_size
        return cls(h // stride, w // stride, stride)

    @property
    def size(self) -> int:
        return self.height * self.width

    @property
    def image_size(self) -> tuple[int, int]:
        return self.width * self.stride, self.height * self.stride

    def points(self) -> np.ndarray:
        """``(K, 2)`` anchor ``(x, y)`` coordinates, row-major (k = i * width + j)."""
        ii, jj = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        xs = (jj.reshape(-1) + 0.5) * self.stride
        ys = (ii.reshape(-1) + 0.5) * self.stride
        return np.stack([xs, ys], axis=1).astype(np.float64)


@dataclass
class AssignmentResult:
    labels: np.ndarray  # (K,) int8 Label values
    gt_index: np.ndarray  # (K,) int64, -1 unless POSITIVE
    iou: np.ndarray  # (K,) float64 IOU of a positive with its GT, else 0
    soft_target: np.ndarray | None = None  # optional confidence targets in [0, 1]

    @property
    def num_positive(self) -> int:
        return int((self.labels == Label.POSITIVE).sum())

    def positives_per_gt(self, num_gt: int) -> np.ndarray:
        pos = self.gt_index[self.labels == Label.POSITIVE]
        return np.bincount(pos, minlength=num_gt)[:num_gt] if num_gt else np.zeros(0, dtype=np.int64)


def inside_matrix(points: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """``(m, K)`` strict-interior containment of anchor points in GT boxes."""
    x, y = points[None, :, 0], points[None, :, 1]
    return (x > gts[:, 0:1]) & (x < gts[:, 2:3]) & (y > gts[:, 1:2]) & (y < gts[:, 3:4])


def preset_candidates(grid: AnchorGrid, gts) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(candidate_mask (K,), inside (m, K))``; non-candidates are negatives."""
    g = as_box_array(gts)
    inside = inside_matrix(grid.points(), g)
    return inside.any(axis=0), inside


def _empty_result(k: int) -> AssignmentResult:
    return AssignmentResult(
        np.full(k, Label.NEGATIVE, dtype=np.int8), np.full(k, -1, dtype=np.int64), np.zeros(k)
    )


def simota_oc_assign(grid: AnchorGrid, gts, predicted_boxes: np.ndarray) -> AssignmentResult:
    """Dynamic assignment from the current predictions.

    ``predicted_boxes`` is ``(K, 4)`` over the whole grid; only candidate
    rows are read. A GT only ranks anchors that lie inside it.
    """
    g = as_box_array(gts)
    result = _empty_result(grid.size)
    if len(g) == 0:
        return result
    cand, inside = preset_candidates(grid, g)
    idx = np.flatnonzero(cand)
    if idx.size == 0:
        return result
    result.labels[idx] = Label.IGNORED

    pred = np.asarray(predicted_boxes, dtype=np.float64).reshape(-1, 4)[idx]
    ins = inside[:, idx]
    iou = np.where(ins, box_iou(g, pred), 0.0)  # (m, c)

    claims = np.zeros_like(ins)
    for m in range(len(g)):
        # exactly rounded sum so P_m does not depend on summation order
        p = min(math.ceil(math.fsum(iou[m])), int(ins[m].sum()))
        if p <= 0:
            continue
        own = np.flatnonzero(ins[m])
        # descending IOU, ascending anchor index on ties
        order = own[np.lexsort((idx[own], -iou[m, own]))]
        claims[m, order[:p]] = True

    claimed = np.flatnonzero(claims.any(axis=0))
    for c in claimed:
        col = np.where(claims[:, c], iou[:, c], -np.inf)
        best = col.max()
        winners = np.flatnonzero(col == best)
        if winners.size == 1:
            k = idx[c]
            result.labels[k] = Label.POSITIVE
            result.gt_index[k] = winners[0]
            result.iou[k] = best
    return result


def shrink_box_assign(grid: AnchorGrid, gts, shrink: float = 0.4) -> AssignmentResult:
    """Positives inside the GT box scaled by ``shrink`` about its centre.

    Anchors inside the GT but outside the shrunken box are ignored; an anchor
    in several shrunken boxes goes to the smallest GT.
    """
    if not 0.0 < shrink <= 1.0:
        raise ValueError(f"shrink must be in (0, 1], got {shrink}")
    g = as_box_array(gts)
    result = _empty_result(grid.size)
    if len(g) == 0:
        return result
    pts = grid.points()
    inside = inside_matrix(pts, g)
    cx, cy = (g[:, 0] + g[:, 2]) / 2, (g[:, 1] + g[:, 3]) / 2
    hw, hh = (g[:, 2] - g[:, 0]) * shrink / 2, (g[:, 3] - g[:, 1]) * shrink / 2
    small = np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=1)
    core = inside_matrix(pts, small)
    result.labels[inside.any(axis=0)] = Label.IGNORED
    pos = core.any(axis=0)
    area = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    owner = np.argmin(np.where(core, area[:, None], np.inf), axis=0)
    result.labels[pos] = Label.POSITIVE
    result.gt_index[pos] = owner[pos]
    return result


def _gaussian_matrix(points: np.ndarray, g: np.ndarray, sigma_ratio: float) -> np.ndarray:
    cx, cy = (g[:, 0] + g[:, 2]) / 2, (g[:, 1] + g[:, 3]) / 2
    sx = (g[:, 2] - g[:, 0]) * sigma_ratio
    sy = (g[:, 3] - g[:, 1]) * sigma_ratio
    dx = (points[None, :, 0] - cx[:, None]) ** 2 / (2 * sx[:, None] ** 2)
    dy = (points[None, :, 1] - cy[:, None]) ** 2 / (2 * sy[:, None] ** 2)
    return np.exp(-(dx + dy))


def center_gaussian_weights(grid: AnchorGrid, gts, sigma_ratio: float = 1 / 6) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor Gaussian weight (max over GTs) and the GT attaining it.

    ``sigma = side * sigma_ratio`` per axis. Returns ``(weights (K,), gt (K,))``
    with ``gt = -1`` when there are no GTs.
    """
    g = as_box_array(gts)
    if len(g) == 0:
        return np.zeros(grid.size), np.full(grid.size, -1, dtype=np.int64)
    w = _gaussian_matrix(grid.points(), g, sigma_ratio)
    return w.max(axis=0), w.argmax(axis=0)


def center_gaussian_assign(grid: AnchorGrid, gts, sigma_ratio: float = 1 / 6) -> AssignmentResult:
    """Soft-target assignment: anchors inside a GT regress to it with a Gaussian confidence target.

    ``soft_target`` holds the Gaussian weight (in [0, 1]) that replaces the
    hard positive target of 1; anchors outside every box are negatives.
    """
    g = as_box_array(gts)
    result = _empty_result(grid.size)
    result.soft_target = np.zeros(grid.size)
    if len(g) == 0:
        return result
    pts = grid.points()
    inside = inside_matrix(pts, g)
    per_gt = np.where(inside, _gaussian_matrix(pts, g, sigma_ratio), -1.0)
    pos = np.flatnonzero(inside.any(axis=0))
    owner = per_gt.argmax(axis=0)[pos]
    result.labels[pos] = Label.POSITIVE
    result.gt_index[pos] = owner
    result.soft_target[pos] = per_gt[owner, pos]
    return result


def assign(strategy: str, grid: AnchorGrid, gts, predicted_boxes: np.ndarray | None = None, **kw) -> AssignmentResult:
    if strategy == "simota_oc":
        if predicted_boxes is None:
            raise ValueError("simota_oc needs predicted boxes")
        return simota_oc_assign(grid, gts, predicted_boxes)
    if strategy == "shrink_box":
        return shrink_box_assign(grid, gts, kw.get("shrink", 0.4))
    if strategy == "center_gaussian":
        return center_gaussian_assign(grid, gts, kw.get("sigma_ratio", 1 / 6))
    raise ValueError(f"unknown assignment strategy {strategy!r}")
