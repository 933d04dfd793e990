"""Decoding, NMS and whole-video detection."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .assignment import AnchorGrid
from .boxes import BoundingBox, box_iou
from .data import VideoClip, pad_sequence, resize_clip, stack_windows
from .network import Detector


@dataclass
class Detection:
    box: BoundingBox
    score: float
    frame_index: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")

    def to_dict(self) -> dict:
        x1, y1, x2, y2 = self.box.as_tuple()
        return {"x1": x1, "y1": y1, "x2": x2, "y2": y2, "score": self.score}


def encode(box, anchor: tuple[float, float]) -> np.ndarray:
    """Box -> (l, t, r, b) distances from ``anchor``."""
    x1, y1, x2, y2 = box.as_tuple() if isinstance(box, BoundingBox) else box
    x, y = anchor
    return np.array([x - x1, y - y1, x2 - x, y2 - y], dtype=np.float64)


def decode_distances(reg: np.ndarray, points: np.ndarray) -> np.ndarray:
    """``(K, 4)`` distances at ``(K, 2)`` anchor points -> ``(K, 4)`` boxes."""
    reg = np.asarray(reg, dtype=np.float64)
    x, y = points[:, 0], points[:, 1]
    return np.stack([x - reg[:, 0], y - reg[:, 1], x + reg[:, 2], y + reg[:, 3]], axis=1)


def _to_numpy(t) -> np.ndarray:
    return t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)


def decode(
    conf,
    reg,
    grid: AnchorGrid,
    conf_threshold: float = 0.5,
    frame_index: int = 0,
) -> list[Detection]:
    """Head outputs of one image -> detections clamped to the input image.

    ``conf`` is ``(h, w)`` or ``(1, h, w)``; ``reg`` is ``(4, h, w)``.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError("conf_threshold must be in [0, 1]")
    c = _to_numpy(conf).reshape(-1).astype(np.float64)
    r = _to_numpy(reg).reshape(4, -1).T
    keep = np.flatnonzero(c >= conf_threshold)
    if keep.size == 0:
        return []
    boxes = decode_distances(r[keep], grid.points()[keep])
    w, h = grid.image_size
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, h)
    return [
        Detection(BoundingBox(*map(float, b)), float(min(max(s, 0.0), 1.0)), frame_index)
        for b, s in zip(boxes, c[keep])
    ]


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy suppression in descending score (insertion order breaks ties)."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must be in (0, 1)")
    if not dets:
        return []
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    boxes = np.array([d.box.as_tuple() for d in dets])[order]
    iou = box_iou(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        suppressed |= iou[i] >= iou_threshold
    return [dets[k] for k in keep]


@dataclass
class VideoDetections:
    clip: str
    fps: float
    frames: list[list[Detection]]
    window_seconds: list[float] = field(default_factory=list)
    total_seconds: float = 0.0

    @property
    def mean_window_seconds(self) -> float:
        return float(np.mean(self.window_seconds)) if self.window_seconds else 0.0

    @property
    def throughput_fps(self) -> float:
        return len(self.frames) / self.total_seconds if self.total_seconds > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "clip": self.clip,
            "fps": self.fps,
            "frames": [
                {"frame_index": i, "detections": [d.to_dict() for d in dets]} for i, dets in enumerate(self.frames)
            ],
        }


def detect_video(
    clip: VideoClip,
    model: Detector,
    n: int | None = None,
    conf_threshold: float = 0.5,
    nms_threshold: float = 0.5,
    batch_size: int = 1,
) -> VideoDetections:
    """Detect on every frame of ``clip`` using black-padded n-frame windows.

    Frames are resized to the model input size and boxes are mapped back to
    the clip's resolution.
    """
    if len(clip) == 0:
        raise ValueError("cannot run detection on an empty clip")
    n = model.cfg.n_frames if n is None else n
    if n != model.cfg.n_frames:
        raise ValueError(f"model expects n={model.cfg.n_frames}, got n={n}")
    in_w, in_h = model.input_size
    sx, sy = clip.width / in_w, clip.height / in_h
    resized = resize_clip(clip, (in_w, in_h))
    grid = AnchorGrid.for_input((in_w, in_h), model.stride)
    dtype = next(model.parameters()).dtype

    model.eval()
    t_start = time.perf_counter()
    windows = pad_sequence(resized, n)
    results: list[list[Detection]] = []
    timings: list[float] = []
    for start in range(0, len(windows), batch_size):
        chunk = windows[start : start + batch_size]
        x = torch.from_numpy(stack_windows(chunk)).to(dtype)
        t0 = time.perf_counter()
        with torch.no_grad():
            out = model(x)
        dt = time.perf_counter() - t0
        timings.extend([dt / len(chunk)] * len(chunk))
        for b, w in enumerate(chunk):
            frame = w.source[1]
            dets = nms(decode(out.conf[b], out.reg[b], grid, conf_threshold, frame), nms_threshold)
            results.append(
                [Detection(d.box.scaled(sx, sy), d.score, frame) if (sx, sy) != (1.0, 1.0) else d for d in dets]
            )
    total = time.perf_counter() - t_start
    return VideoDetections(clip.name, clip.fps, results, timings, total)
