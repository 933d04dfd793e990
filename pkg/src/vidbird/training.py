"""Training loop, flat key=value configs and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import pickle
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .assignment import AnchorGrid, assign
from .boxes import as_box_array
from .data import (
    AugmentationConfig,
    VideoClip,
    augment_window,
    resize_clip,
    sample_window,
    stack_windows,
)
from .evaluation import EvalReport, evaluate
from .inference import detect_video
from .loss import LossConfig, decode_boxes, total_loss
from .network import BackboneConfig, Detector, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "vidbird-checkpoint"
CHECKPOINT_VERSION = 1
LOG_HEADER = ("step", "epoch", "total", "conf", "reg", "lr", "positives")
ASSIGNERS = ("simota_oc", "shrink_box", "center_gaussian")


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n: int = 5
    batch_size: int = 8
    epochs: int = 100
    initial_lr: float = 1e-3
    lr_decay: float = 0.95
    alpha: float = 5.0
    fixed_N: float = 16.0
    assigner: str = "simota_oc"
    shrink: float = 0.4
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    input_width: int = 672
    input_height: int = 384
    width_mult: float = 1.0
    depth_mult: float = 1.0
    augment: bool = True
    aug_crop_prob: float = 0.5
    aug_flip_prob: float = 0.5
    aug_hsv_prob: float = 0.5
    aug_crop_lo: float = 0.6
    aug_crop_hi: float = 1.0
    aug_hue: float = 0.015
    aug_saturation: float = 0.5
    aug_value: float = 0.3
    val_fraction: float = 0.1
    eval_conf_threshold: float = 0.05
    nms_threshold: float = 0.5
    checkpoint_every: int = 1
    seed: int = 0
    data_root: str = ""

    def __post_init__(self):
        if self.n < 1 or self.n % 2 == 0:
            raise ConfigError(f"n: must be odd and >= 1, got {self.n}")
        if self.epochs < 1:
            raise ConfigError(f"epochs: must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr: must be > 0, got {self.initial_lr}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay: must be in (0, 1], got {self.lr_decay}")
        if self.assigner not in ASSIGNERS:
            raise ConfigError(f"assigner: must be one of {ASSIGNERS}, got {self.assigner!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer: must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction: must be in [0, 1), got {self.val_fraction}")
        try:
            ModelConfig(self.n, self.input_size)
            self.augmentation()
            LossConfig(self.alpha, self.fixed_N)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def input_size(self) -> tuple[int, int]:
        return (self.input_width, self.input_height)

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(
            self.aug_crop_prob, self.aug_flip_prob, self.aug_hsv_prob,
            (self.aug_crop_lo, self.aug_crop_hi), self.aug_hue, self.aug_saturation, self.aug_value,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.n, self.input_size, BackboneConfig(width_mult=self.width_mult, depth_mult=self.depth_mult))

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr * self.lr_decay ** epoch

    # flat key=value text format

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"{key}: unknown config key")
            default = known[key].default
            try:
                kwargs[key] = _coerce(raw, type(default))
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        values = {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {line_no}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls.from_dict(values)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


def _coerce(raw, kind):
    if not isinstance(raw, str):
        return kind(raw)
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    return kind(raw)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: Detector
    config: TrainConfig
    epoch: int
    optimizer_state: dict | None = None


def save_checkpoint(path: str | Path, model: Detector, cfg: TrainConfig, epoch: int, optimizer=None) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "epoch": int(epoch),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, n: int | None = None) -> Checkpoint:
    """Load a checkpoint; ``n`` (if given) must match the stored frame count."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except (RuntimeError, EOFError, pickle.UnpicklingError, ValueError, OSError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}")
    cfg = TrainConfig.from_dict(payload["config"])
    if n is not None and n != cfg.n:
        raise ConfigError(f"n: checkpoint was trained with n={cfg.n}, requested n={n}")
    model = Detector(cfg.model_config())
    try:
        model.load_state_dict(payload["model"])
    except (RuntimeError, KeyError) as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored config: {exc}") from None
    return Checkpoint(model, cfg, int(payload["epoch"]), payload.get("optimizer"))


# ---------------------------------------------------------------------------
# evaluation helpers


def predict_clips(model: Detector, clips: Sequence[VideoClip], conf_threshold=0.05, nms_threshold=0.5):
    """Run :func:`detect_video` on each clip; returns ``{(clip, frame): [Detection]}``."""
    out = {}
    for clip in clips:
        res = detect_video(clip, model, conf_threshold=conf_threshold, nms_threshold=nms_threshold, batch_size=8)
        for i, dets in enumerate(res.frames):
            out[(clip.name, i)] = dets
    return out


def ground_truth(clips: Sequence[VideoClip]):
    return {(c.name, i): c.boxes_at(i) for c in clips for i in range(len(c))}


def evaluate_model(model: Detector, clips: Sequence[VideoClip], conf_threshold=0.05, nms_threshold=0.5) -> EvalReport:
    return evaluate(predict_clips(model, clips, conf_threshold, nms_threshold), ground_truth(clips))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: Detector
    config: TrainConfig
    epochs_run: int
    log_rows: list[tuple]
    best_val_ap50: float | None = None
    out_dir: Path | None = None


def _fmt(v) -> str:
    return f"{v:.9e}" if isinstance(v, float) else str(v)


def _aug_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def split_validation(clips: Sequence[VideoClip], fraction: float, seed: int):
    if fraction <= 0 or len(clips) < 2:
        return list(clips), []
    k = max(1, int(math.ceil(fraction * len(clips))))
    order = np.random.default_rng(seed).permutation(len(clips))
    val = sorted(order[:k].tolist())
    return [c for i, c in enumerate(clips) if i not in val], [clips[i] for i in val]


def _make_optimizer(model, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.initial_lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.initial_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def train(
    clips: Sequence[VideoClip],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    val_clips: Sequence[VideoClip] | None = None,
    resume: str | Path | None = None,
    on_epoch_end: Callable[[int, Detector], bool | None] | None = None,
) -> TrainResult:
    """Train a detector on ``clips``.

    Without ``val_clips`` a ``val_fraction`` of the clips is held out. With
    ``out_dir`` the per-step ``log.csv``, ``ckpt_epoch_<k>.pt`` and
    ``ckpt_best.pt`` are written there. ``on_epoch_end(epoch, model)`` may
    return True to stop early.
    """
    if not clips:
        raise ValueError("training needs at least one clip")
    if val_clips is None:
        clips, val_clips = split_validation(clips, cfg.val_fraction, cfg.seed)
    clips = [resize_clip(c, cfg.input_size) for c in clips]
    val_clips = [resize_clip(c, cfg.input_size) for c in val_clips]

    torch.manual_seed(cfg.seed)
    start_epoch = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, n=cfg.n)
        model, start_epoch = ckpt.model, ckpt.epoch
    else:
        model = Detector(cfg.model_config())
    optimizer = _make_optimizer(model, cfg)
    if resume is not None and ckpt.optimizer_state:
        optimizer.load_state_dict(ckpt.optimizer_state)

    grid = AnchorGrid.for_input(cfg.input_size, model.stride)
    loss_cfg = LossConfig(cfg.alpha, cfg.fixed_N)
    aug_cfg = cfg.augmentation()
    index = [(ci, t) for ci, c in enumerate(clips) for t in range(len(c))]

    out = Path(out_dir) if out_dir is not None else None
    log_fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "log.csv", "a" if resume else "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        if not resume:
            writer.writerow(LOG_HEADER)

    rows: list[tuple] = []
    best = None
    step = start_epoch * math.ceil(len(index) / cfg.batch_size)
    epoch = start_epoch
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = cfg.lr_at(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(index))
            for b0 in range(0, len(order), cfg.batch_size):
                batch = order[b0 : b0 + cfg.batch_size]
                windows = []
                for wi in batch:
                    ci, t = index[wi]
                    w = sample_window(clips[ci], t, cfg.n)
                    if cfg.augment:
                        w = augment_window(w, aug_cfg, _aug_seed(cfg.seed, epoch, int(wi)))
                    windows.append(w)
                x = torch.from_numpy(stack_windows(windows))
                gts = [as_box_array(w.middle_gt) for w in windows]

                pred_boxes = [None] * len(windows)
                if cfg.assigner == "simota_oc":
                    model.eval()
                    with torch.no_grad():
                        pred = model(x)
                    reg_eval = pred.reg.flatten(2).transpose(1, 2)
                    pred_boxes = decode_boxes(reg_eval, grid).double().numpy()
                assignments = [
                    assign(cfg.assigner, grid, g, pb, shrink=cfg.shrink) for g, pb in zip(gts, pred_boxes)
                ]

                model.train()
                outputs = model(x)
                conf = outputs.conf.flatten(1)
                reg = outputs.reg.flatten(2).transpose(1, 2)
                terms = [total_loss(conf[b], reg[b], a, gts[b], grid, loss_cfg) for b, a in enumerate(assignments)]
                loss = torch.stack([t.total for t in terms]).mean()
                if not torch.isfinite(loss):
                    bad = [f"{clips[index[wi][0]].name}:{index[wi][1]}" for wi in batch]
                    if out is not None:
                        (out / "nonfinite_batch.json").write_text(json.dumps({"step": step, "epoch": epoch, "windows": bad}))
                    raise TrainingError(f"non-finite loss at step {step} (epoch {epoch}); batch windows: {bad}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()

                row = (
                    step,
                    epoch,
                    float(loss.item()),
                    float(torch.stack([t.conf for t in terms]).mean().item()),
                    float(torch.stack([t.reg for t in terms]).mean().item()),
                    float(lr),
                    int(sum(t.positives for t in terms)),
                )
                rows.append(row)
                if writer is not None:
                    writer.writerow([_fmt(v) for v in row])
                step += 1

            if log_fh is not None:
                log_fh.flush()
            done = epoch + 1
            if out is not None and (done % cfg.checkpoint_every == 0 or done == cfg.epochs):
                save_checkpoint(out / f"ckpt_epoch_{done}.pt", model, cfg, done, optimizer)
            if val_clips:
                ap50 = evaluate_model(model, val_clips, cfg.eval_conf_threshold, cfg.nms_threshold).ap50
                log.info("epoch %d val AP50 %.4f", done, ap50)
                if best is None or ap50 > best:
                    best = ap50
                    if out is not None:
                        save_checkpoint(out / "ckpt_best.pt", model, cfg, done, optimizer)
            elif out is not None:
                # no validation split: the latest epoch stands in as best
                save_checkpoint(out / "ckpt_best.pt", model, cfg, done, optimizer)
            if on_epoch_end is not None and on_epoch_end(done, model):
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return TrainResult(model, cfg, epoch + 1 - start_epoch, rows, best, out)
