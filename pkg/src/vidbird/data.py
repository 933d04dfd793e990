"""Video clips, n-frame windows, consistent augmentation and synthetic data.

On-disk layout (shared by the loader and the synthetic generator)::

    <root>/<split>/<clip_name>/frames/000000.png
    <root>/<split>/<clip_name>/annotations.csv   # frame_index,x1,y1,x2,y2

All indices are zero-based and box coordinates are float pixels.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .boxes import BoundingBox, array_to_boxes, boxes_to_array

ANNOTATION_HEADER = ("frame_index", "x1", "y1", "x2", "y2")
FRAME_PATTERN = "{:06d}.png"
MIN_BOX_AREA = 4.0


class DatasetError(Exception):
    pass


class AnnotationParseError(DatasetError):
    def __init__(self, message: str, frame_index: int | None = None):
        super().__init__(message)
        self.frame_index = frame_index


@dataclass
class FrameAnnotation:
    frame_index: int
    boxes: list[BoundingBox] = field(default_factory=list)


@dataclass
class VideoClip:
    """Frames are a ``(T, H, W, 3)`` uint8 RGB array."""

    name: str
    frames: np.ndarray
    annotations: list[FrameAnnotation]
    fps: float = 25.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        by_index: dict[int, FrameAnnotation] = {}
        for ann in self.annotations:
            if ann.frame_index in by_index:
                raise ValueError(f"duplicate annotation for frame {ann.frame_index}")
            by_index[ann.frame_index] = ann
        # one entry per frame so lookups are positional
        self.annotations = [by_index.get(i, FrameAnnotation(i)) for i in range(len(self.frames))]

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])

    def boxes_at(self, index: int) -> list[BoundingBox]:
        return list(self.annotations[index].boxes)


@dataclass(frozen=True)
class WindowTransform:
    """Geometry applied by :func:`augment_window`; crop is ``(x0, y0, w, h)``."""

    crop: tuple[int, int, int, int]
    flip: bool
    out_size: tuple[int, int]

    def forward_boxes(self, boxes: np.ndarray) -> np.ndarray:
        x0, y0, cw, ch = self.crop
        ow, oh = self.out_size
        out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        out[:, [0, 2]] = (out[:, [0, 2]] - x0) * (ow / cw)
        out[:, [1, 3]] = (out[:, [1, 3]] - y0) * (oh / ch)
        if self.flip:
            out[:, [0, 2]] = ow - out[:, [2, 0]]
        return out

    def inverse_boxes(self, boxes: np.ndarray) -> np.ndarray:
        x0, y0, cw, ch = self.crop
        ow, oh = self.out_size
        out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        if self.flip:
            out[:, [0, 2]] = ow - out[:, [2, 0]]
        out[:, [0, 2]] = out[:, [0, 2]] * (cw / ow) + x0
        out[:, [1, 3]] = out[:, [1, 3]] * (ch / oh) + y0
        return out


@dataclass
class FrameWindow:
    """``images`` is ``(n, H, W, 3)`` float32 in [0, 1]; padding frames are zeros."""

    images: np.ndarray
    middle_gt: list[BoundingBox]
    source: tuple[str, int]
    transform: WindowTransform | None = None

    @property
    def n(self) -> int:
        return int(self.images.shape[0])

    @property
    def size(self) -> tuple[int, int]:
        return int(self.images.shape[2]), int(self.images.shape[1])

    @property
    def middle_frame(self) -> np.ndarray:
        return self.images[self.n // 2]


@dataclass
class AugmentationConfig:
    crop_prob: float = 0.5
    flip_prob: float = 0.5
    hsv_prob: float = 0.5
    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    hue: float = 0.015
    saturation: float = 0.5
    value: float = 0.3

    def __post_init__(self):
        for name in ("crop_prob", "flip_prob", "hsv_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        if min(self.hue, self.saturation, self.value) < 0:
            raise ValueError("HSV jitter amplitudes must be non-negative")


def _check_odd(n: int) -> None:
    if n < 1 or n % 2 == 0:
        raise ValueError(f"n must be an odd integer >= 1, got {n}")


# ---------------------------------------------------------------------------
# loading


def _read_frame(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise DatasetError(f"cannot read frame {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def parse_annotations(path: Path, n_frames: int, width: int, height: int) -> list[FrameAnnotation]:
    """Parse one clip's ``annotations.csv``, clamping boxes to the frame."""
    rows: dict[int, list[BoundingBox]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ANNOTATION_HEADER:
            raise AnnotationParseError(f"{path}: expected header {','.join(ANNOTATION_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            frame_index = None
            try:
                frame_index = int(row[0])
                if len(row) != 5:
                    raise ValueError(f"expected 5 fields, got {len(row)}")
                x1, y1, x2, y2 = (float(v) for v in row[1:])
            except (ValueError, IndexError) as exc:
                raise AnnotationParseError(
                    f"{path}:{line_no}: frame {frame_index}: malformed row {row!r} ({exc})",
                    frame_index,
                ) from None
            if not 0 <= frame_index < n_frames:
                raise AnnotationParseError(
                    f"{path}:{line_no}: frame {frame_index} out of range [0, {n_frames})", frame_index
                )
            x1, x2 = min(max(x1, 0.0), width), min(max(x2, 0.0), width)
            y1, y2 = min(max(y1, 0.0), height), min(max(y2, 0.0), height)
            if not (x1 < x2 and y1 < y2):
                raise AnnotationParseError(
                    f"{path}:{line_no}: frame {frame_index}: degenerate box after clamping "
                    f"({x1}, {y1}, {x2}, {y2})",
                    frame_index,
                )
            rows.setdefault(frame_index, []).append(BoundingBox(x1, y1, x2, y2))
    return [FrameAnnotation(i, rows.get(i, [])) for i in range(n_frames)]


def load_clip(clip_dir: Path, fps: float = 25.0) -> VideoClip:
    clip_dir = Path(clip_dir)
    frame_paths = sorted((clip_dir / "frames").glob("*.png"))
    if not frame_paths:
        raise DatasetError(f"clip {clip_dir.name}: no frames under {clip_dir / 'frames'}")
    for i, p in enumerate(frame_paths):
        if p.name != FRAME_PATTERN.format(i):
            raise DatasetError(f"clip {clip_dir.name}: expected frame {FRAME_PATTERN.format(i)}, found {p.name}")
    ann_path = clip_dir / "annotations.csv"
    if not ann_path.is_file():
        raise DatasetError(f"clip {clip_dir.name}: missing annotation file {ann_path}")
    frames = np.stack([_read_frame(p) for p in frame_paths])
    h, w = frames.shape[1:3]
    anns = parse_annotations(ann_path, len(frames), w, h)
    return VideoClip(clip_dir.name, frames, anns, fps=fps)


def load_dataset(root_path: str | Path, split: str) -> list[VideoClip]:
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    split_dir = Path(root_path) / split
    if not split_dir.is_dir():
        raise DatasetError(f"dataset split directory not found: {split_dir}")
    clip_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
    return [load_clip(d) for d in clip_dirs]


def resize_clip(clip: VideoClip, size: tuple[int, int]) -> VideoClip:
    """Direct (non-letterboxed) resize of every frame and box to ``size = (W, H)``."""
    w, h = size
    if (clip.width, clip.height) == (w, h):
        return clip
    sx, sy = w / clip.width, h / clip.height
    frames = np.stack([cv2.resize(f, (w, h), interpolation=cv2.INTER_LINEAR) for f in clip.frames])
    anns = [FrameAnnotation(a.frame_index, [b.scaled(sx, sy) for b in a.boxes]) for a in clip.annotations]
    return VideoClip(clip.name, frames, anns, fps=clip.fps)


# ---------------------------------------------------------------------------
# windows


def sample_window(clip: VideoClip, center: int, n: int) -> FrameWindow:
    """Frames ``center - (n-1)/2 .. center + (n-1)/2``; out-of-range slots are black."""
    _check_odd(n)
    if not 0 <= center < len(clip):
        raise IndexError(f"center {center} outside clip of length {len(clip)}")
    half = n // 2
    images = np.zeros((n, clip.height, clip.width, 3), dtype=np.float32)
    for slot, idx in enumerate(range(center - half, center + half + 1)):
        if 0 <= idx < len(clip):
            images[slot] = clip.frames[idx].astype(np.float32) / 255.0
    return FrameWindow(images, clip.boxes_at(center), (clip.name, center))


def pad_sequence(clip: VideoClip, n: int) -> list[FrameWindow]:
    """One window per frame, with (n-1)/2 black frames past either end."""
    _check_odd(n)
    if len(clip) == 0:
        raise ValueError("cannot pad an empty clip")
    return [sample_window(clip, c, n) for c in range(len(clip))]


# ---------------------------------------------------------------------------
# augmentation


def _hsv_jitter(images: np.ndarray, gains: tuple[float, float, float]) -> np.ndarray:
    hue_shift, sat_gain, val_gain = gains
    out = np.empty_like(images)
    for k, img in enumerate(images):
        hsv = cv2.cvtColor(img, cv2.COLOR_RGB2HSV)  # float32: H in [0, 360)
        hsv[..., 0] = np.mod(hsv[..., 0] + hue_shift * 360.0, 360.0)
        hsv[..., 1] = np.clip(hsv[..., 1] * sat_gain, 0.0, 1.0)
        hsv[..., 2] = np.clip(hsv[..., 2] * val_gain, 0.0, 1.0)
        out[k] = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return np.clip(out, 0.0, 1.0)


def apply_augmentation(
    w: FrameWindow,
    crop: tuple[int, int, int, int] | None = None,
    flip: bool = False,
    hsv_gains: tuple[float, float, float] | None = None,
) -> FrameWindow:
    """Apply one explicit crop/flip/HSV setting to every frame of ``w``."""
    width, height = w.size
    crop = crop or (0, 0, width, height)
    x0, y0, cw, ch = crop
    if cw < 1 or ch < 1 or x0 < 0 or y0 < 0 or x0 + cw > width or y0 + ch > height:
        raise ValueError(f"crop {crop} does not fit a {width}x{height} image")
    images = w.images
    if crop != (0, 0, width, height):
        images = np.stack(
            [
                cv2.resize(img[y0 : y0 + ch, x0 : x0 + cw], (width, height), interpolation=cv2.INTER_LINEAR)
                for img in images
            ]
        )
    if flip:
        images = images[:, :, ::-1]
    if hsv_gains is not None:
        images = _hsv_jitter(np.ascontiguousarray(images, dtype=np.float32), hsv_gains)
    images = np.ascontiguousarray(images, dtype=np.float32)

    transform = WindowTransform(tuple(int(v) for v in crop), bool(flip), (width, height))
    boxes = boxes_to_array(w.middle_gt)
    kept = []
    if len(boxes):
        clipped = boxes.copy()
        clipped[:, [0, 2]] = np.clip(clipped[:, [0, 2]], x0, x0 + cw)
        clipped[:, [1, 3]] = np.clip(clipped[:, [1, 3]], y0, y0 + ch)
        mapped = transform.forward_boxes(clipped)
        area = (mapped[:, 2] - mapped[:, 0]) * (mapped[:, 3] - mapped[:, 1])
        kept = array_to_boxes(mapped[area >= MIN_BOX_AREA])
    return FrameWindow(images, kept, w.source, transform)


def augment_window(w: FrameWindow, cfg: AugmentationConfig, rng_seed: int) -> FrameWindow:
    """Draw one crop/flip/HSV setting from ``rng_seed`` and apply it to all n frames."""
    rng = np.random.default_rng(rng_seed)
    width, height = w.size
    crop = None
    if rng.random() < cfg.crop_prob:
        lo, hi = cfg.crop_scale_range
        for _ in range(10):
            scale = rng.uniform(lo, hi)
            cw, ch = int(round(width * scale)), int(round(height * scale))
            if cw >= 1 and ch >= 1:
                x0 = int(rng.integers(0, width - cw + 1))
                y0 = int(rng.integers(0, height - ch + 1))
                crop = (x0, y0, cw, ch)
                break
    flip = bool(rng.random() < cfg.flip_prob)
    hsv = None
    if rng.random() < cfg.hsv_prob:
        hsv = (
            float(rng.uniform(-cfg.hue, cfg.hue)),
            float(rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)),
            float(rng.uniform(1 - cfg.value, 1 + cfg.value)),
        )
    return apply_augmentation(w, crop, flip, hsv)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    clips: int = 20
    length: int = 20
    width: int = 96
    height: int = 64
    test_clips: int = 0
    birds: tuple[int, int] = (1, 3)
    size_median: float = 10.0
    size_sigma: float = 0.5
    size_max: float = 48.0
    speed: tuple[float, float] = (0.5, 2.5)
    contrast: tuple[float, float] = (0.25, 0.45)
    low_contrast: bool = False
    low_contrast_max_diff: float = 0.1
    noise_std: float = 0.02
    texture: float = 0.15
    min_gap: float | None = 2.0  # px between any two birds' boxes; None allows overlap
    decoys: tuple[int, int] = (0, 0)  # static, unannotated bird-shaped blobs per clip
    fps: float = 25.0

    def __post_init__(self):
        if self.clips < 0 or self.test_clips < 0 or self.length < 1:
            raise ValueError("clip counts must be >= 0 and length >= 1")
        if self.birds[0] < 0 or self.birds[0] > self.birds[1]:
            raise ValueError(f"invalid bird count range {self.birds}")
        if self.decoys[0] < 0 or self.decoys[0] > self.decoys[1]:
            raise ValueError(f"invalid decoy count range {self.decoys}")
        if self.min_gap is not None and self.min_gap < 0:
            raise ValueError("min_gap must be >= 0")


@dataclass
class SynthClip:
    frames: np.ndarray  # (T, H, W, 3) float in [0, 1], before quantisation
    backgrounds: np.ndarray  # same frames without birds
    masks: np.ndarray  # (T, H, W) union of bird masks
    boxes: list[np.ndarray]  # per-frame (m, 4)


def _smooth_noise(rng: np.random.Generator, w: int, h: int, cell: int) -> np.ndarray:
    gw, gh = max(2, w // cell), max(2, h // cell)
    coarse = rng.standard_normal((gh, gw, 3)).astype(np.float32)
    return cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)


def _bird_mask(xx, yy, cx, cy, heading, length, body_ratio, flap) -> np.ndarray:
    """Soft mask of a body ellipse plus an off-centre wing ellipse."""
    c, s = math.cos(heading), math.sin(heading)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    a = 0.5 * length
    b = a * body_ratio
    body = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    # wings sit behind the body centre so the blob is asymmetric in its box
    wa = 0.22 * length
    wb = 0.5 * length * (0.35 + 0.6 * flap)
    wing = np.sqrt(((u + 0.12 * length) / wa) ** 2 + (v / wb) ** 2)
    d = np.minimum(body, wing)
    edge = max(1.0, 0.5 * b)
    return 1.0 / (1.0 + np.exp(np.clip((d - 1.0) * edge * 2.0, -50, 50)))


def _sample_bird(cfg: SynthConfig, rng: np.random.Generator) -> dict:
    w, h = cfg.width, cfg.height
    length = float(np.clip(cfg.size_median * math.exp(cfg.size_sigma * rng.standard_normal()), 4.0, cfg.size_max))
    angle = rng.uniform(0, 2 * math.pi)
    speed = rng.uniform(*cfg.speed)
    if cfg.low_contrast:
        delta = rng.uniform(0.5, 0.9) * cfg.low_contrast_max_diff
    else:
        delta = rng.uniform(*cfg.contrast)
    return dict(
        length=length,
        ratio=rng.uniform(0.35, 0.6),
        x=rng.uniform(0.1 * w, 0.9 * w),
        y=rng.uniform(0.1 * h, 0.9 * h),
        vx=speed * math.cos(angle),
        vy=speed * math.sin(angle),
        bob=rng.uniform(0.0, 0.6),
        phase=rng.uniform(0, 2 * math.pi),
        flap_rate=rng.uniform(0.3, 0.8),
        delta=delta * (1.0 if rng.random() < 0.5 else -1.0),
        start=int(rng.integers(0, max(1, cfg.length // 3))),
    )


def _render_bird(bd: dict, t: int, xx, yy):
    """``(mask, box)`` of a bird at frame ``t``, or None when absent or too small."""
    if t < bd["start"]:
        return None
    dt = t - bd["start"]
    cx = bd["x"] + bd["vx"] * dt
    cy = bd["y"] + bd["vy"] * dt + bd["bob"] * math.sin(bd["phase"] + 0.5 * dt)
    heading = math.atan2(bd["vy"], bd["vx"])
    flap = abs(math.sin(bd["phase"] + bd["flap_rate"] * dt))
    m = _bird_mask(xx, yy, cx, cy, heading, bd["length"], bd["ratio"], flap).astype(np.float32)
    solid = m > 0.5
    if not solid.any():
        return None
    cols = np.flatnonzero(solid.any(axis=0))
    rows = np.flatnonzero(solid.any(axis=1))
    box = (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
    if box[2] - box[0] < 2 or box[3] - box[1] < 2:
        return None
    return m, box


def _too_close(a, b, gap: float) -> bool:
    return a[0] - gap < b[2] and b[0] - gap < a[2] and a[1] - gap < b[3] and b[1] - gap < a[3]


def synth_clip(cfg: SynthConfig, rng: np.random.Generator) -> SynthClip:
    """One clip of moving soft-edged birds over a textured, noisy background.

    With ``min_gap`` set, a bird whose track comes within ``min_gap`` px of an
    earlier bird in any frame is redrawn (up to 20 times, then dropped).
    Decoys are drawn like birds frozen at their first frame and baked into
    the background, so only motion and wing beats tell them apart.
    """
    w, h, t_len = cfg.width, cfg.height, cfg.length
    base = rng.uniform(0.3, 0.7, size=3).astype(np.float32)
    bg = base + cfg.texture * _smooth_noise(rng, w, h, 12) + 0.35 * cfg.texture * _smooth_noise(rng, w, h, 3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    if cfg.decoys[1] > 0:  # no draws otherwise, so decoy-free datasets are unchanged
        for _ in range(int(rng.integers(cfg.decoys[0], cfg.decoys[1] + 1))):
            bd = _sample_bird(cfg, rng)
            frozen = _render_bird({**bd, "start": 0}, 0, xx, yy)
            if frozen is not None:
                bg = bg + bd["delta"] * frozen[0][..., None]
    bg = np.clip(bg, 0.05, 0.95)

    tracks: list[tuple[dict, list]] = []  # (bird, per-frame (mask, box) or None)
    for _ in range(int(rng.integers(cfg.birds[0], cfg.birds[1] + 1))):
        for _attempt in range(20):
            bd = _sample_bird(cfg, rng)
            track = [_render_bird(bd, t, xx, yy) for t in range(t_len)]
            if cfg.min_gap is None or not any(
                cur is not None and prev[t] is not None and _too_close(cur[1], prev[t][1], cfg.min_gap)
                for _, prev in tracks
                for t, cur in enumerate(track)
            ):
                tracks.append((bd, track))
                break

    frames = np.empty((t_len, h, w, 3), dtype=np.float32)
    backgrounds = np.empty_like(frames)
    masks = np.zeros((t_len, h, w), dtype=np.float32)
    boxes: list[np.ndarray] = []
    for t in range(t_len):
        noisy_bg = bg + cfg.noise_std * rng.standard_normal(bg.shape).astype(np.float32)
        img = noisy_bg.copy()
        frame_boxes = []
        for bd, track in tracks:
            if track[t] is None:
                continue
            m, box = track[t]
            img += bd["delta"] * m[..., None]
            masks[t] = np.maximum(masks[t], m)
            frame_boxes.append(box)
        frames[t] = img
        backgrounds[t] = noisy_bg
        boxes.append(np.asarray(frame_boxes, dtype=np.float64).reshape(-1, 4))
    return SynthClip(np.clip(frames, 0.0, 1.0), np.clip(backgrounds, 0.0, 1.0), masks, boxes)


def _write_clip(clip_dir: Path, sc: SynthClip) -> None:
    frames_dir = clip_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for t, img in enumerate(sc.frames):
        u8 = np.round(img * 255.0).astype(np.uint8)
        if not cv2.imwrite(str(frames_dir / FRAME_PATTERN.format(t)), cv2.cvtColor(u8, cv2.COLOR_RGB2BGR)):
            raise OSError(f"cannot write frame into {frames_dir}")
    with open(clip_dir / "annotations.csv", "w", newline="") as fh:
        fh.write(",".join(ANNOTATION_HEADER) + "\n")
        for t, fb in enumerate(sc.boxes):
            for x1, y1, x2, y2 in fb:
                fh.write(f"{t},{x1:.2f},{y1:.2f},{x2:.2f},{y2:.2f}\n")


def synth_generate(cfg: SynthConfig, out: str | Path, seed: int) -> Path:
    """Write a synthetic dataset under ``out``; deterministic in ``seed``."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    for split, count in (("train", cfg.clips), ("test", cfg.test_clips)):
        for k in range(count):
            _write_clip(out / split / f"clip_{k:03d}", synth_clip(cfg, rng))
    return out


def synth_clips(cfg: SynthConfig, seed: int, count: int | None = None) -> list[VideoClip]:
    """In-memory variant of :func:`synth_generate` (quantised to uint8 like the PNGs)."""
    rng = np.random.default_rng(seed)
    clips = []
    for k in range(cfg.clips if count is None else count):
        sc = synth_clip(cfg, rng)
        anns = [FrameAnnotation(t, array_to_boxes(np.round(b, 2))) for t, b in enumerate(sc.boxes)]
        frames = np.round(sc.frames * 255.0).astype(np.uint8)
        clips.append(VideoClip(f"clip_{k:03d}", frames, anns, fps=cfg.fps))
    return clips



def stack_windows(windows: Sequence[FrameWindow]) -> np.ndarray:
    """Stack windows into ``(B, 3n, H, W)`` float32, frames concatenated in time order."""
    arr = np.stack([w.images for w in windows])  # (B, n, H, W, 3)
    b, n, h, wd, _ = arr.shape
    return np.ascontiguousarray(arr.transpose(0, 1, 4, 2, 3).reshape(b, n * 3, h, wd))
