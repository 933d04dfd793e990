"""Compare the three label-assignment strategies on one frame.

SimOTA-OC picks positives from the current predictions, so the same frame
gets different labels from an untrained and a trained model. The static
strategies depend only on the boxes.

Run: python3 demos/02_label_assignment.py
"""
import torch

from vidbird.assignment import AnchorGrid, Label, assign, preset_candidates
from vidbird.boxes import as_box_array
from vidbird.data import SynthConfig, sample_window, stack_windows, synth_clips
from vidbird.inference import decode_distances
from vidbird.network import Detector, tiny_config

clip = synth_clips(SynthConfig(clips=1, length=9, size_median=16), seed=3)[0]
window = sample_window(clip, 4, 5)
gts = as_box_array(window.middle_gt)
grid = AnchorGrid.for_input((96, 64))
print(f"{len(gts)} birds on the middle frame; boxes:\n{gts.round(1)}")
inside, _ = preset_candidates(grid, gts)
print(f"anchors strictly inside some box: {int(inside.sum())} of {grid.size}")

torch.manual_seed(0)
model = Detector(tiny_config(5)).eval()
with torch.no_grad():
    reg = model(torch.from_numpy(stack_windows([window]))).reg[0]
pred = decode_distances(reg.reshape(4, -1).T.double().numpy(), grid.points())

for strategy in ("simota_oc", "shrink_box", "center_gaussian"):
    res = assign(strategy, grid, gts, pred)
    counts = {lab.name.lower(): int((res.labels == lab).sum()) for lab in Label}
    extra = ""
    if res.soft_target is not None:
        pos = res.labels == Label.POSITIVE
        extra = f", soft targets {res.soft_target[pos].min():.2f}..{res.soft_target[pos].max():.2f}"
    print(f"{strategy:>16}: {counts}{extra}")

# With SimOTA-OC each box receives ceil(sum of its candidates' IOUs) positives,
# so a model whose boxes already fit well gets more positives per bird.
res = assign("simota_oc", grid, gts, pred)
for m in range(len(gts)):
    print(f"bird {m}: {int(((res.labels == Label.POSITIVE) & (res.gt_index == m)).sum())} positives")
