"""Synthetic nested-shell head phantoms for demos and desk-scale training.

Concentric ellipsoids stand in for skin, bone, CSF, gray and white matter,
plus an interior air pocket for the sinus class.  Intensities mimic a T1
contrast (bright WM, darker GM, dark CSF) with mild noise, so a small
network can learn the tissue mapping quickly.
"""

import numpy as np

from .volume import AIR, BACKGROUND, BONE, CSF, GM, SKIN, WM, LabelVolume, Volume

# shell semi-axis scale relative to the skin ellipsoid
SHELLS = ((SKIN, 1.00), (BONE, 0.88), (CSF, 0.78), (GM, 0.70), (WM, 0.50))

INTENSITY = {
    BACKGROUND: 0.00,
    AIR: 0.10,
    WM: 0.95,
    GM: 0.62,
    CSF: 0.30,
    BONE: 0.20,
    SKIN: 0.52,
}


def make_phantom(size=256, seed=0, noise=0.02, spacing=(1.0, 1.0, 1.0)):
    """Build (Volume, LabelVolume) for one randomized phantom head."""
    rng = np.random.default_rng(seed)
    center = size / 2.0 + rng.uniform(-0.02, 0.02, 3) * size
    base_axes = np.array([0.38, 0.44, 0.40]) * size * (1.0 + rng.uniform(-0.04, 0.04, 3))

    idx = np.indices((size, size, size), dtype=np.float32)
    labels = np.zeros((size, size, size), dtype=np.uint8)
    for code, scale in SHELLS:
        axes = base_axes * scale
        rho = sum(((idx[d] - center[d]) / axes[d]) ** 2 for d in range(3))
        labels[rho <= 1.0] = code

    # interior air cavity (outsized sinus) in the lower-front of the head;
    # large enough that the class trains like the others at desk scale
    air_center = center + np.array([0.0, base_axes[1] * 0.42, -base_axes[2] * 0.30])
    air_r = 0.15 * size * (1.0 + rng.uniform(-0.05, 0.05))
    rho_air = sum((idx[d] - air_center[d]) ** 2 for d in range(3)) / air_r**2
    labels[(rho_air <= 1.0) & (labels != BACKGROUND)] = AIR

    lut = np.zeros(7, dtype=np.float32)
    for code, val in INTENSITY.items():
        lut[code] = val
    image = lut[labels]
    if noise:
        image = image + rng.normal(0.0, noise, image.shape).astype(np.float32)
    image = np.clip(image, 0.0, None).astype(np.float32)

    affine = np.diag(list(spacing) + [1.0])
    affine[:3, 3] = -np.asarray(spacing) * (size - 1) / 2.0
    vol = Volume(image, spacing, affine)
    vol.record("phantom", seed=seed, size=size)
    lab = LabelVolume(labels, spacing, affine.copy())
    lab.record("phantom", seed=seed, size=size)
    return vol, lab
