"""Conforming a scan to canonical space and mapping labels back.

A 2 mm LPS-oriented phantom goes through the full harmonization
(resample to 1 mm, reorient to RAS, pad to 256 cubed, divide by the 95th
percentile), and its labels return to the native grid afterwards.
"""

import numpy as np

from headseg import LabelVolume, Volume, dice_per_class, restore_native, subject_score
from headseg.conform import conform, conform_labels
from headseg.phantom import make_phantom

vol, labels = make_phantom(size=128, seed=7, spacing=(2.0, 2.0, 2.0))
# flip the first two axes so the input is LPS rather than RAS
flipped = np.ascontiguousarray(vol.data[::-1, ::-1, :])
affine = vol.affine.copy()
for ax in (0, 1):
    affine[:3, 3] += affine[:3, ax] * (vol.shape[ax] - 1)
    affine[:3, ax] *= -1
vol_lps = Volume(flipped, vol.spacing, affine)

conformed, record = conform(vol_lps)
print("native dims:", vol_lps.shape, "spacing:", vol_lps.spacing)
print("conformed dims:", conformed.shape, "spacing:", conformed.spacing)
print("permutation:", record.permutation, "flips:", record.flips)
print("pad offsets:", record.offsets, " p95:", f"{record.p95:.4f}")

# pretend the network predicted the true labels; restore them to native space
lab_lps = LabelVolume(
    np.ascontiguousarray(labels.data[::-1, ::-1, :]), vol_lps.spacing, affine.copy()
)
conformed_labels = conform_labels(lab_lps)
native = restore_native(conformed_labels, record)
scores = dice_per_class(native.data, lab_lps.data)
print("restored dims:", native.shape)
print("round-trip Dice per class:", {c: round(v, 4) for c, v in scores.items() if v})
print("mean:", round(subject_score(scores), 4))
