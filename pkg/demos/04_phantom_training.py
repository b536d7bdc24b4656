"""Training a small tri-planar segmenter on a synthetic phantom.

Builds a 128-cube nested-shell head, trains one axial model at desk
scale, and reports per-class Dice on held-out slices.  The full-size
version of this workflow (three axes, consensus training, 256-cube
phantom) lives in the acceptance suite.
"""

import time

import numpy as np

from headseg import UNetConfig, make_phantom, slice_dataset, train_axis_model
from headseg.conform import conform, conform_labels
from headseg.training import evaluate_samples

t0 = time.time()
vol, labels = make_phantom(size=128, seed=4)
# a 128-cube at 1 mm pads into the canonical 256-cube
conformed, record = conform(vol)
conformed_labels = conform_labels(labels)
samples = slice_dataset([(conformed, conformed_labels, "phantom")], "axial")
print(f"{len(samples)} non-background axial slices "
      f"({time.time()-t0:.0f}s to conform + slice)")

all_class = [s for s in samples if len(np.unique(s.labels)) >= 6]
seeds = all_class[:: max(1, len(all_class) // 4)][:4]
print(f"training on {len(seeds)} slices, full-batch")

config = UNetConfig(depth=2, base_filters=8, seed=11)
model, history = train_axis_model(
    config, seeds, epochs=120, seed=0, batch_size=len(seeds),
    lr=2e-3, weight_mode="per-class",
)
print(f"final loss {history.loss[-1]:.4f} after {len(history.loss)} steps "
      f"({time.time()-t0:.0f}s)")
print(f"training-slice Dice: {evaluate_samples(model, seeds):.4f}")
print(f"held-out slice Dice: {evaluate_samples(model, samples[::9]):.4f}")
