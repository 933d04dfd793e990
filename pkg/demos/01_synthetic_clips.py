"""Generate a few synthetic surveillance clips and look at what a window holds.

Run: python3 demos/01_synthetic_clips.py [out_dir]
"""
import sys
from pathlib import Path

import cv2
import numpy as np

from vidbird.boxes import as_box_array
from vidbird.data import SynthConfig, pad_sequence, synth_clips

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/synthetic")
out.mkdir(parents=True, exist_ok=True)

clips = synth_clips(SynthConfig(clips=3, length=12, size_median=16), seed=0)
sides = np.array([max(b.width, b.height) for c in clips for a in c.annotations for b in a.boxes])
print(f"{len(clips)} clips, {len(sides)} boxes, median side {np.median(sides):.1f} px, "
      f"{(sides < 32).mean():.0%} smaller than 32 px")

# Every frame gets a window of n frames centred on it; the ends are padded
# with black frames so the first and last frames are still detected.
windows = pad_sequence(clips[0], 5)
print(f"clip of {len(clips[0])} frames -> {len(windows)} windows of shape {windows[0].images.shape}")
print("frame 0 window, mean brightness per slot:", windows[0].images.mean(axis=(1, 2, 3)).round(3))

# Tile the 5 frames of one window side by side with the middle-frame boxes drawn.
w = windows[6]
tiles = []
for k, img in enumerate(w.images):
    tile = cv2.cvtColor((img * 255).astype(np.uint8), cv2.COLOR_RGB2BGR)
    tile = cv2.resize(tile, None, fx=3, fy=3, interpolation=cv2.INTER_NEAREST)
    if k == len(w.images) // 2:
        for x1, y1, x2, y2 in as_box_array(w.middle_gt) * 3:
            cv2.rectangle(tile, (int(x1), int(y1)), (int(x2) - 1, int(y2) - 1), (0, 0, 255), 1)
    tiles.append(tile)
cv2.imwrite(str(out / "window.png"), np.concatenate(tiles, axis=1))
print("wrote", out / "window.png")
