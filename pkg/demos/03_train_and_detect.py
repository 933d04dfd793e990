"""Train the tiny detector on synthetic clips, then detect and score held-out clips.

Takes a few minutes on one CPU core. Run: python3 demos/03_train_and_detect.py
"""
import time

from vidbird.data import SynthConfig, synth_clips
from vidbird.inference import detect_video
from vidbird.training import TrainConfig, evaluate_model, train

data = SynthConfig(clips=12, length=8, size_median=16)
train_clips = synth_clips(data, seed=1)
test_clips = synth_clips(data, seed=2, count=4)

cfg = TrainConfig(n=5, batch_size=8, epochs=40, input_width=96, input_height=64, width_mult=1 / 8,
                  depth_mult=1 / 3, optimizer="adam", initial_lr=2e-3, lr_decay=0.98, weight_decay=0.0,
                  val_fraction=0.0, augment=False)
start = time.time()


def progress(epoch, model):
    if epoch % 10 == 0:
        print(f"epoch {epoch:3d}  train AP50 {evaluate_model(model, train_clips).ap50:.3f}  "
              f"({time.time() - start:.0f} s)")


result = train(train_clips, cfg, on_epoch_end=progress)
report = evaluate_model(result.model, test_clips)
print(report.table())

# Whole-clip detection returns one entry per frame, including the first and
# last frames whose windows are padded with black frames.
dets = detect_video(test_clips[0], result.model, conf_threshold=0.3)
print(f"{test_clips[0].name}: {len(dets.frames)} frames, "
      f"{sum(len(f) for f in dets.frames)} detections, {dets.throughput_fps:.1f} fps")
