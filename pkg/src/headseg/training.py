"""Desk-scale training: slicing, augmentation, per-axis models, consensus.

Slices whose label plane is pure background are dropped from training.
Augmentation draws a rotation and a shear (both bounded by 15 degrees)
and warps image, labels, and in-plane coordinate channels with the same
2D affine about the slice center.  The consensus layer starts as a
diagonal no-bias matrix (majority-vote equivalent) and is only replaced
by trained weights when validation Dice does not regress.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import nn
from .errors import ConfigError, PairingError, ShapeError, TrainingError
from .pipeline import ConsensusWeights, coordinate_planes, axis_index, AXES
from .unet import build_unet
from .volume import N_CLASSES

log = logging.getLogger(__name__)

MAX_ANGLE_DEG = 15.0
MAX_SHEAR = np.tan(np.deg2rad(15.0))


@dataclass
class SliceSample:
    """One training slice: image, label codes, and coordinate channels."""

    image: np.ndarray          # (1, H, W) float32
    labels: np.ndarray         # (H, W) uint8 codes
    subject: str
    axis: int
    index: int
    classes: int = N_CLASSES
    coords: np.ndarray = None  # (3, H, W); built lazily when None

    def get_coords(self):
        if self.coords is None:
            n = self.image.shape[-1]
            self.coords = coordinate_planes(self.axis, self.index, n)
        return self.coords

    def onehot(self, dtype=np.float32):
        eye = np.eye(self.classes, dtype=dtype)
        return np.moveaxis(eye[self.labels], -1, 0)


@dataclass
class SplitPlan:
    train: list
    validation: list
    test: list
    seed: int
    fold: int = 0


def make_splits(n_subjects, sizes, seed, fold=0):
    """Deterministic shuffle, then partition into train/validation/test."""
    if sum(sizes) != n_subjects:
        raise ConfigError(f"sizes {sizes} sum to {sum(sizes)}, expected {n_subjects}")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(n_subjects))
    a, b, _ = sizes
    return SplitPlan(
        train=[int(i) for i in order[:a]],
        validation=[int(i) for i in order[a : a + b]],
        test=[int(i) for i in order[a + b :]],
        seed=seed,
        fold=fold,
    )


def slice_dataset(pairs, axis):
    """Slice conformed (Volume, LabelVolume, subject) triples along one axis.

    Slices whose label plane is 100% background are dropped.  Order is
    (subject, slice index), deterministic.
    """
    a = axis_index(axis)
    samples = []
    for vol, labels, subject in pairs:
        img = vol.data if hasattr(vol, "data") else np.asarray(vol)
        lab = labels.data if hasattr(labels, "data") else np.asarray(labels)
        if img.shape != lab.shape:
            raise PairingError(
                f"subject {subject}: image {img.shape} vs labels {lab.shape}"
            )
        kept = 0
        for k in range(img.shape[a]):
            lslice = np.take(lab, k, axis=a)
            if not lslice.any():
                continue
            islice = np.take(img, k, axis=a).astype(np.float32, copy=False)
            samples.append(
                SliceSample(
                    image=np.ascontiguousarray(islice)[np.newaxis],
                    labels=np.ascontiguousarray(lslice).astype(np.uint8),
                    subject=str(subject),
                    axis=a,
                    index=k,
                )
            )
            kept += 1
        if kept == 0:
            log.warning("subject %s: no non-background slices on axis %s", subject, AXES[a])
    return samples


def _inplane_channels(axis):
    return [c for c in range(3) if c != axis_index(axis)]


def augment(sample, rng, max_angle=MAX_ANGLE_DEG, max_shear=MAX_SHEAR):
    """Random rotation + shear about the slice center.

    Image and in-plane coordinate channels are warped bilinearly with zero
    fill; label codes use nearest-neighbor with background fill, which
    keeps their one-hot encoding exact.  The off-plane coordinate channel
    is constant and stays untouched.
    """
    theta = np.deg2rad(rng.uniform(-max_angle, max_angle))
    shear = rng.uniform(-max_shear, max_shear)
    if theta == 0.0 and shear == 0.0:
        return sample
    rot = np.array(
        [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
    )
    shr = np.array([[1.0, shear], [0.0, 1.0]])
    fwd = shr @ rot  # rotate first, then shear
    inv = np.linalg.inv(fwd)
    H, W = sample.labels.shape
    center = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    offset = center - inv @ center

    def warp(plane, order, cval=0.0):
        return ndimage.affine_transform(
            plane, inv, offset=offset, order=order, cval=cval, mode="constant",
            output=np.float32 if order else plane.dtype,
        )

    image = warp(sample.image[0], order=1)[np.newaxis]
    labels = warp(sample.labels, order=0)
    coords = sample.get_coords().copy()
    for c in _inplane_channels(sample.axis):
        coords[c] = warp(coords[c], order=1)
    return SliceSample(
        image=image,
        labels=labels,
        subject=sample.subject,
        axis=sample.axis,
        index=sample.index,
        classes=sample.classes,
        coords=coords,
    )


def _batch_arrays(samples):
    imgs = np.stack([s.image for s in samples])
    coords = np.stack([s.get_coords() for s in samples])
    onehots = np.stack([s.onehot() for s in samples])
    return imgs, coords, onehots


def batch_dice_loss(probs, onehots, class_weights=None, weight_mode="uniform"):
    """Dice loss over a batch treated as one joint instance.

    weight_mode "uniform" is the plain generalized ratio.  "per-class"
    averages single-class Dice terms over the classes present in the
    batch, which keeps rare classes from being drowned out by bulk ones
    (class-volume weighting per the loss's class_weights hook).
    Returns (loss, dprobs) with dprobs shaped like `probs`.
    """
    pj = np.ascontiguousarray(probs.transpose(1, 0, 2, 3))
    gj = np.ascontiguousarray(onehots.transpose(1, 0, 2, 3))
    classes = pj.shape[0]
    if weight_mode == "uniform":
        loss, grad = nn.dice_loss(pj, gj, class_weights)
    elif weight_mode == "per-class":
        present = [c for c in range(classes) if gj[c].any()]
        loss = 0.0
        grad = np.zeros_like(pj)
        for c in present:
            w = np.zeros(classes)
            w[c] = 1.0
            loss_c, grad_c = nn.dice_loss(pj, gj, class_weights=w)
            loss += loss_c / len(present)
            grad += grad_c / len(present)
    else:
        raise TrainingError(f"unknown weight_mode {weight_mode!r}")
    return loss, grad.transpose(1, 0, 2, 3)


def evaluate_samples(model, samples):
    """Pooled mean-class Dice of argmax predictions over a sample list."""
    classes = model.config.classes
    inter = np.zeros(classes, dtype=np.int64)
    sizes = np.zeros(classes, dtype=np.int64)
    for s in samples:
        probs = model.forward(s.image, s.get_coords())
        pred = np.argmax(probs, axis=0)
        for c in range(classes):
            p = pred == c
            t = s.labels == c
            inter[c] += np.count_nonzero(p & t)
            sizes[c] += np.count_nonzero(p) + np.count_nonzero(t)
    present = sizes > 0
    if not present.any():
        return 0.0
    return float(np.mean(2.0 * inter[present] / sizes[present]))


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    val_dice: list = field(default_factory=list)

    def rows(self):
        return list(zip(self.epochs, self.loss, self.val_dice))


def train_axis_model(
    config,
    samples,
    epochs,
    seed,
    batch_size=8,
    lr=1e-5,
    class_weights=None,
    weight_mode="uniform",
    augment_prob=0.0,
    val_samples=None,
    patience=None,
    lr_schedule=None,
    init_params=None,
):
    """Train one per-axis 2D U-Net with Dice loss and Adam.

    `lr_schedule` optionally maps an epoch index to a new learning rate.
    `init_params` warm-starts from another model's parameter dict (e.g. a
    sibling axis) instead of the seeded random initialization.
    Deterministic for a given seed under single-threaded execution.
    Returns (model, TrainHistory).
    """
    if not samples:
        raise TrainingError("no training samples")
    model = build_unet(config)
    if init_params is not None:
        model.load_parameters(init_params)
    optimizer = nn.Adam(lr=lr)
    rng = np.random.default_rng(seed)
    history = TrainHistory()
    best = (-1.0, None, 0)  # (val dice, params snapshot, epoch)
    step = 0
    for epoch in range(epochs):
        if lr_schedule and epoch in lr_schedule:
            optimizer.lr = lr_schedule[epoch]
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [samples[i] for i in order[start : start + batch_size]]
            if augment_prob > 0.0:
                batch = [
                    augment(s, rng) if rng.random() < augment_prob else s
                    for s in batch
                ]
            imgs, coords, onehots = _batch_arrays(batch)
            probs = model.forward(imgs, coords)
            batch_loss, dprobs = batch_dice_loss(
                probs, onehots, class_weights, weight_mode
            )
            step += 1
            if not np.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at step {step}")
            model.backward(np.ascontiguousarray(dprobs))
            optimizer.step(model.parameters(), model.gradients())
            losses.append(batch_loss)
        val = float("nan")
        if val_samples:
            val = evaluate_samples(model, val_samples)
            if val > best[0]:
                best = (val, {k: v.copy() for k, v in model.parameters().items()}, epoch)
            elif patience is not None and epoch - best[2] >= patience:
                log.info("early stop at epoch %d (best %.4f @ %d)", epoch, best[0], best[2])
                break
        history.epochs.append(epoch)
        history.loss.append(float(np.mean(losses)))
        history.val_dice.append(val)
    if patience is not None and best[1] is not None:
        model.load_parameters(best[1])
    return model, history


def _merged_dice(W, b, fields, truth_codes, classes):
    flat = fields.reshape(fields.shape[0], -1)
    logits = W @ flat
    if b is not None:
        logits += b[:, np.newaxis]
    pred = np.argmax(logits, axis=0)
    truth = truth_codes.reshape(-1)
    inter = np.zeros(classes)
    sizes = np.zeros(classes)
    for c in range(classes):
        p = pred == c
        t = truth == c
        inter[c] = np.count_nonzero(p & t)
        sizes[c] = np.count_nonzero(p) + np.count_nonzero(t)
    present = sizes > 0
    return float(np.mean(2.0 * inter[present] / sizes[present])) if present.any() else 0.0


def train_consensus(
    fields,
    truth_codes,
    epochs=3000,
    seed=0,
    lr=1e-5,
    bias=False,
    val_fields=None,
    val_truth=None,
    classes=N_CLASSES,
):
    """Train the pointwise merge layer from its majority-vote initialization.

    fields: (3*classes, ...) stacked per-axis probabilities in the order
    (axial, coronal, sagittal); truth_codes: matching label codes.  If the
    trained layer scores below the diagonal initialization on the
    validation field, the initialization is returned unchanged.
    Returns (ConsensusWeights, TrainHistory).
    """
    fields = np.asarray(fields, dtype=np.float32)
    truth_codes = np.asarray(truth_codes)
    if fields.shape[0] != 3 * classes:
        raise ShapeError(f"expected {3 * classes} stacked channels, got {fields.shape[0]}")
    if fields.shape[1:] != truth_codes.shape:
        raise ShapeError(
            f"fields spatial {fields.shape[1:]} vs truth {truth_codes.shape}"
        )
    if val_fields is None:
        val_fields, val_truth = fields, truth_codes

    init = ConsensusWeights.diagonal(classes)
    layer = nn.PointwiseConv3D(3 * classes, classes, bias=bias)
    layer.W = init.W.copy()
    if bias:
        layer.b = np.zeros(classes, dtype=np.float32)
    softmax = nn.SoftmaxChannels()
    optimizer = nn.Adam(lr=lr)

    eye = np.eye(classes, dtype=np.float32)
    onehot = np.moveaxis(eye[truth_codes], -1, 0)
    history = TrainHistory()
    init_dice = _merged_dice(init.W, None, np.asarray(val_fields), np.asarray(val_truth), classes)
    for epoch in range(epochs):
        probs = softmax.forward(layer.forward(fields))
        loss, dprobs = nn.dice_loss(probs, onehot)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite consensus loss at epoch {epoch}")
        layer.backward(softmax.backward(dprobs))
        optimizer.step(layer.params(), layer.grads())
        history.epochs.append(epoch)
        history.loss.append(float(loss))
        history.val_dice.append(float("nan"))
    trained = ConsensusWeights(
        W=layer.W.astype(np.float32),
        b=None if layer.b is None else layer.b.astype(np.float32),
    )
    end_dice = _merged_dice(
        trained.W, trained.b, np.asarray(val_fields), np.asarray(val_truth), classes
    )
    if history.val_dice:
        history.val_dice[-1] = end_dice
    if end_dice < init_dice:
        log.info("consensus training regressed (%.4f < %.4f); keeping init", end_dice, init_dice)
        return init, history
    return trained, history
