"""Command-line entry point: ``vidbird {synth,train,eval,detect,assign-debug}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. The only
contract-bearing stdout line is the final ``RESULT <json>``; failures print
one ``ERROR <json>`` line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import cv2
import numpy as np
import torch

from . import __version__
from .assignment import AnchorGrid, Label, assign
from .boxes import BoundingBox, as_box_array, box_iou
from .data import (
    SynthConfig,
    load_dataset,
    resize_clip,
    sample_window,
    stack_windows,
    synth_generate,
)
from .evaluation import evaluate
from .inference import Detection, decode_distances, detect_video
from .network import Detector, ModelConfig
from .training import TrainConfig, load_checkpoint, train


class CommandError(RuntimeError):
    pass


def odd_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1 or v % 2 == 0:
        raise argparse.ArgumentTypeError(f"n must be odd and >= 1, got {v}")
    return v


def unit_float(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {v}")
    return v


def _prepare_out(out: Path, overwrite: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise CommandError(f"output directory {out} is not empty (pass --overwrite to replace its contents)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, argv, config: dict, seed, artifacts, started: float) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "artifacts": sorted(str(a) for a in artifacts),
        "code_version": __version__,
        "timings": {"started": started, "finished": time.time(), "seconds": time.time() - started},
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


# ---------------------------------------------------------------------------


def cmd_synth(args) -> dict:
    out = _prepare_out(Path(args.out), args.overwrite)
    cfg = SynthConfig(
        clips=args.clips, length=args.length, width=args.width, height=args.height,
        test_clips=args.test_clips, low_contrast=args.low_contrast, noise_std=args.noise,
        size_median=args.size_median, decoys=tuple(args.decoys),
    )
    synth_generate(cfg, out, args.seed)
    artifacts = [p.relative_to(out) for p in out.glob("*/*") if p.is_dir()]
    return {"out": str(out), "clips": cfg.clips, "test_clips": cfg.test_clips, "config": asdict(cfg),
            "seed": args.seed, "artifacts": artifacts}


def cmd_train(args) -> dict:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    data_root = args.data or cfg.data_root
    if not data_root:
        raise CommandError("no dataset: pass --data or set data_root in the config")
    out = _prepare_out(Path(args.out), args.overwrite or args.resume is not None)
    clips = load_dataset(data_root, "train")
    if not clips:
        raise CommandError(f"no training clips under {Path(data_root) / 'train'}")
    (out / "config.txt").write_text(cfg.to_text())
    res = train(clips, cfg, out, resume=args.resume)
    artifacts = sorted(p.name for p in out.iterdir())
    return {"out": str(out), "epochs_run": res.epochs_run, "steps": len(res.log_rows),
            "best_val_ap50": res.best_val_ap50, "config": asdict(cfg), "seed": cfg.seed, "artifacts": artifacts}


def _load_detection_json(path: Path) -> dict:
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    files = [f for f in files if f.name != "run_manifest.json"]
    if not files:
        raise CommandError(f"no detection JSON found at {path}")
    dets = {}
    for f in files:
        doc = json.loads(f.read_text())
        for fr in doc["frames"]:
            dets[(doc["clip"], int(fr["frame_index"]))] = [
                Detection(BoundingBox(d["x1"], d["y1"], d["x2"], d["y2"]), float(d["score"]), int(fr["frame_index"]))
                for d in fr["detections"]
            ]
    return dets


def cmd_eval(args) -> dict:
    data_root = Path(args.data)
    if not data_root.is_dir():
        raise CommandError(f"annotation root not found: {data_root}")
    dets = _load_detection_json(Path(args.detections))
    clips = load_dataset(data_root, args.split)
    clip_names = {k[0] for k in dets}
    gts = {(c.name, i): c.boxes_at(i) for c in clips if c.name in clip_names for i in range(len(c))}
    missing = clip_names - {c.name for c in clips}
    if missing:
        raise CommandError(f"detections reference clips absent from {data_root / args.split}: {sorted(missing)}")
    out = _prepare_out(Path(args.out), args.overwrite)
    report = evaluate(dets, gts)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.table())
    summary = {k: v for k, v in report.to_dict().items() if k in ("AP50", "AP75", "AP", "AP_S", "AP_M", "AP_L")}
    return {"out": str(out), **summary, "artifacts": ["report.json", "report.txt"], "config": vars(args), "seed": None}


def _draw(img: np.ndarray, boxes, color, scale=1) -> None:
    for x1, y1, x2, y2 in as_box_array(boxes):
        cv2.rectangle(img, (int(round(x1 * scale)), int(round(y1 * scale))),
                      (int(round(x2 * scale)) - 1, int(round(y2 * scale)) - 1), color, 1)


def cmd_detect(args) -> dict:
    ckpt = load_checkpoint(args.ckpt, n=args.n)
    clips = load_dataset(args.data, args.split)
    out = _prepare_out(Path(args.out), args.overwrite)
    artifacts, timings = [], {}
    for clip in clips:
        res = detect_video(clip, ckpt.model, conf_threshold=args.conf_threshold,
                           nms_threshold=args.nms_threshold, batch_size=args.batch_size)
        (out / f"{clip.name}.json").write_text(json.dumps(res.to_dict()))
        artifacts.append(f"{clip.name}.json")
        timings[clip.name] = {"mean_window_seconds": res.mean_window_seconds, "fps": res.throughput_fps}
        if args.save_frames:
            fdir = out / "frames" / clip.name
            fdir.mkdir(parents=True, exist_ok=True)
            for i, dets in enumerate(res.frames):
                img = cv2.cvtColor(clip.frames[i], cv2.COLOR_RGB2BGR)
                _draw(img, [d.box for d in dets], (0, 0, 255))
                cv2.imwrite(str(fdir / f"{i:06d}.png"), img)
    return {"out": str(out), "clips": len(clips), "timing": timings, "artifacts": artifacts,
            "config": asdict(ckpt.config), "seed": ckpt.config.seed}


def cmd_assign_debug(args) -> dict:
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt, n=args.n)
        model, n = ckpt.model, ckpt.config.n
    else:
        n = args.n or 5
        torch.manual_seed(args.seed)
        model = Detector(ModelConfig(n, (args.width, args.height)))
    clips = {c.name: c for c in load_dataset(args.data, args.split)}
    if args.clip not in clips:
        raise CommandError(f"clip {args.clip!r} not in {Path(args.data) / args.split}")
    clip = resize_clip(clips[args.clip], model.input_size)
    if not 0 <= args.frame < len(clip):
        raise CommandError(f"frame {args.frame} outside clip of length {len(clip)}")
    window = sample_window(clip, args.frame, n)
    grid = AnchorGrid.for_input(model.input_size, model.stride)
    model.eval()
    with torch.no_grad():
        pred = model(torch.from_numpy(stack_windows([window])))
    reg = pred.reg[0].reshape(4, -1).T.double().numpy()
    pred_boxes = decode_distances(reg, grid.points())
    gts = as_box_array(window.middle_gt)
    result = assign(args.strategy, grid, gts, pred_boxes)
    best_iou = box_iou(gts, pred_boxes).max(axis=0) if len(gts) else np.zeros(grid.size)

    out = _prepare_out(Path(args.out), args.overwrite)
    stem = f"assign_{args.clip}_{args.frame:06d}"
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("i", "j", "label", "gt_index", "iou"))
        for k in range(grid.size):
            iou = result.iou[k] if result.labels[k] == Label.POSITIVE else best_iou[k]
            w.writerow((k // grid.width, k % grid.width, Label(int(result.labels[k])).name,
                        int(result.gt_index[k]), f"{iou:.6f}"))
    scale = 4
    img = cv2.cvtColor((window.middle_frame * 255).astype(np.uint8), cv2.COLOR_RGB2BGR)
    img = cv2.resize(img, None, fx=scale, fy=scale, interpolation=cv2.INTER_NEAREST)
    _draw(img, gts, (255, 255, 0), scale)
    colors = {Label.POSITIVE: (0, 255, 0), Label.IGNORED: (0, 165, 255)}
    for k, (x, y) in enumerate(grid.points()):
        lab = Label(int(result.labels[k]))
        if lab in colors:
            cv2.circle(img, (int(x * scale), int(y * scale)), 2, colors[lab], -1)
    cv2.imwrite(str(out / f"{stem}.png"), img)
    counts = {lab.name: int((result.labels == lab).sum()) for lab in Label}
    return {"out": str(out), "counts": counts, "artifacts": [f"{stem}.csv", f"{stem}.png"],
            "config": vars(args), "seed": args.seed}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="vidbird", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty --out")
        sp.add_argument("--workers", type=int, default=1, help="torch intra-op threads")

    sp = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=fmt)
    common(sp)
    sp.add_argument("--clips", type=int, default=20, help="training clips")
    sp.add_argument("--test-clips", type=int, default=0, help="test clips")
    sp.add_argument("--length", type=int, default=20, help="frames per clip")
    sp.add_argument("--width", type=int, default=96, help="frame width in pixels")
    sp.add_argument("--height", type=int, default=64, help="frame height in pixels")
    sp.add_argument("--noise", type=float, default=0.02, help="per-frame sensor noise std")
    sp.add_argument("--low-contrast", action="store_true", help="render birds close to the background")
    sp.add_argument("--size-median", type=float, default=10.0, help="median bird length in pixels")
    sp.add_argument("--decoys", type=int, nargs=2, default=[0, 0], metavar=("MIN", "MAX"),
                    help="static unannotated bird-shaped blobs per clip")
    sp.add_argument("--seed", type=int, default=0, help="dataset seed")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a detector", formatter_class=fmt)
    common(sp)
    sp.add_argument("--config", help="flat key=value TrainConfig file")
    sp.add_argument("--data", help="dataset root (overrides data_root in the config)")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate detection JSON against annotations", formatter_class=fmt)
    common(sp)
    sp.add_argument("--detections", required=True, help="detection JSON file or directory")
    sp.add_argument("--data", required=True, help="dataset root")
    sp.add_argument("--split", choices=("train", "test"), default="test", help="split to score against")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("detect", help="run detection on every clip of a split", formatter_class=fmt)
    common(sp)
    sp.add_argument("--ckpt", required=True, help="checkpoint file")
    sp.add_argument("--data", required=True, help="dataset root")
    sp.add_argument("--split", choices=("train", "test"), default="test", help="split to run on")
    sp.add_argument("--n", type=odd_int, default=None, help="frames per window (must match the checkpoint)")
    sp.add_argument("--conf-threshold", type=unit_float, default=0.5, help="minimum confidence kept")
    sp.add_argument("--nms-threshold", type=unit_float, default=0.5, help="IOU above which NMS suppresses")
    sp.add_argument("--batch-size", type=int, default=1, help="windows per forward pass")
    sp.add_argument("--save-frames", action="store_true", help="write annotated PNG frames")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("assign-debug", help="dump per-anchor labels for one frame", formatter_class=fmt)
    common(sp)
    sp.add_argument("--data", required=True, help="dataset root")
    sp.add_argument("--split", choices=("train", "test"), default="train", help="split holding the clip")
    sp.add_argument("--clip", required=True, help="clip directory name")
    sp.add_argument("--frame", type=int, default=0, help="frame index within the clip")
    sp.add_argument("--ckpt", help="checkpoint; a randomly initialised model is used if omitted")
    sp.add_argument("--strategy", choices=("simota_oc", "shrink_box", "center_gaussian"), default="simota_oc",
                    help="label assignment strategy")
    sp.add_argument("--n", type=odd_int, default=None, help="frames per window without --ckpt (5 if omitted)")
    sp.add_argument("--width", type=int, default=96, help="model input width without --ckpt")
    sp.add_argument("--height", type=int, default=64, help="model input height without --ckpt")
    sp.add_argument("--seed", type=int, default=0, help="init seed for the random model")
    sp.set_defaults(func=cmd_assign_debug)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    torch.set_num_threads(max(1, args.workers))
    started = time.time()
    try:
        summary = args.func(args)
    except Exception as exc:  # noqa: BLE001 - single-line machine-readable failure
        print("ERROR " + json.dumps({"command": args.command, "type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    out = Path(summary["out"])
    config = summary.pop("config", {})
    seed = summary.pop("seed", None)
    artifacts = summary.pop("artifacts", [])
    _write_manifest(out, args.command, argv, config, seed, artifacts, started)
    print("RESULT " + json.dumps(summary, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
