"""Full-volume segmentation: slice, infer per axis, merge, restore.

A conformed 256-cube is sliced along the sagittal (axis 0), coronal
(axis 1) and axial (axis 2) directions; each axis has its own 2D U-Net.
The three 7-channel probability fields are merged either by majority vote
or by the learned consensus layer (pointwise 21->7 convolution + softmax).
"""

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import postprocess as pp
from .conform import CANONICAL_SIZE, conform, restore_native
from .errors import CompatibilityError, ContractError, FormatError, ShapeError, StageError
from .unet import (
    UNetConfig,
    build_unet,
    load_container,
    load_weights,
    save_container,
)
from .volume import LabelVolume, N_CLASSES

AXES = ("sagittal", "coronal", "axial")
CHANNEL_ORDER = ("axial", "coronal", "sagittal")


def axis_index(axis):
    if isinstance(axis, str):
        try:
            return AXES.index(axis)
        except ValueError:
            raise ShapeError(f"unknown axis {axis!r}, expected one of {AXES}") from None
    if axis not in (0, 1, 2):
        raise ShapeError(f"axis {axis} outside 0..2")
    return int(axis)


@dataclass
class ProbVolume:
    """Per-voxel class probabilities, one channel per tissue."""

    data: np.ndarray  # (classes, X, Y, Z)
    source: str = "merged"


@dataclass
class ConsensusWeights:
    """Pointwise 21->7 merge layer: weight matrix plus optional bias."""

    W: np.ndarray
    b: np.ndarray = None
    channel_order: tuple = CHANNEL_ORDER

    @classmethod
    def diagonal(cls, classes=N_CLASSES, n_models=3):
        W = np.zeros((classes, classes * n_models), dtype=np.float32)
        for k in range(n_models):
            W[np.arange(classes), np.arange(classes) + k * classes] = 1.0
        return cls(W=W, b=None)


@dataclass
class WeightBundle:
    """Three per-axis model containers plus the consensus layer."""

    models: dict          # axis name -> UNet
    consensus: ConsensusWeights
    digest: str = ""
    paths: dict = field(default_factory=dict)


def normalized_coordinate(k, n=CANONICAL_SIZE):
    return 2.0 * k / (n - 1) - 1.0


def coordinate_planes(axis, index, n=CANONICAL_SIZE, dtype=np.float32):
    """3-channel (x, y, z) normalized coordinates of every pixel in a slice."""
    a = axis_index(axis)
    lin = (2.0 * np.arange(n) / (n - 1) - 1.0).astype(dtype)
    const = np.full((n, n), lin[index], dtype=dtype)
    row = np.broadcast_to(lin[:, np.newaxis], (n, n))
    col = np.broadcast_to(lin[np.newaxis, :], (n, n))
    if a == 0:      # sagittal: plane axes (y, z)
        planes = (const, row, col)
    elif a == 1:    # coronal: plane axes (x, z)
        planes = (row, const, col)
    else:           # axial: plane axes (x, y)
        planes = (row, col, const)
    return np.stack([np.ascontiguousarray(p) for p in planes])


def extract_slices(vol, axis):
    """Yield (image 1xNxN, coords 3xNxN, index) along one axis of a 256-cube."""
    data = vol.data if hasattr(vol, "data") else np.asarray(vol)
    n = CANONICAL_SIZE
    if data.shape != (n, n, n):
        raise ContractError(f"expected conformed {n}^3 volume, got {data.shape}")
    a = axis_index(axis)
    for k in range(n):
        img = np.take(data, k, axis=a).astype(np.float32, copy=False)
        yield img[np.newaxis], coordinate_planes(a, k, n), k


def _clone_for_thread(model):
    clone = build_unet(model.config)
    own = clone.parameters()
    for name, arr in model.parameters().items():
        own[name][...] = arr  # copy keeps clones independent and read-only-safe
    return clone


def infer_axis(model, vol, axis, batch=4, threads=1):
    """Run one per-axis model over all 256 slices; returns a ProbVolume."""
    data = vol.data if hasattr(vol, "data") else np.asarray(vol)
    n = CANONICAL_SIZE
    if data.shape != (n, n, n):
        raise ContractError(f"expected conformed {n}^3 volume, got {data.shape}")
    a = axis_index(axis)
    classes = model.config.classes
    out = np.empty((classes, n, n, n), dtype=np.float32)

    starts = list(range(0, n, batch))

    def run_chunk(model_obj, start):
        ks = range(start, min(start + batch, n))
        imgs = np.stack([np.take(data, k, axis=a) for k in ks])[:, np.newaxis].astype(
            np.float32, copy=False
        )
        coords = np.stack([coordinate_planes(a, k, n) for k in ks])
        probs = model_obj.forward(imgs, coords)
        for i, k in enumerate(ks):
            if a == 0:
                out[:, k, :, :] = probs[i]
            elif a == 1:
                out[:, :, k, :] = probs[i]
            else:
                out[:, :, :, k] = probs[i]

    if threads <= 1:
        for s in starts:
            run_chunk(model, s)
    else:
        # one clone per worker; each worker owns a contiguous share of slices
        def run_share(model_obj, share):
            for s in share:
                run_chunk(model_obj, s)

        shares = [starts[i::threads] for i in range(threads)]
        clones = [_clone_for_thread(model) for _ in shares]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(run_share, clone, share)
                for clone, share in zip(clones, shares)
            ]
            for f in futures:
                f.result()
    return ProbVolume(out, source=AXES[a])


def majority_vote(p_axial, p_coronal, p_sagittal):
    """Per-voxel vote of the three argmax predictions.

    Two agreeing models win; three-way splits fall back to the argmax of
    the summed probabilities; exact ties there resolve to the lowest code.
    """
    fields = [_prob_data(p) for p in (p_axial, p_coronal, p_sagittal)]
    if not (fields[0].shape == fields[1].shape == fields[2].shape):
        raise ShapeError(
            f"misaligned probability fields: {[f.shape for f in fields]}"
        )
    a1 = np.argmax(fields[0], axis=0).astype(np.uint8)
    a2 = np.argmax(fields[1], axis=0).astype(np.uint8)
    a3 = np.argmax(fields[2], axis=0).astype(np.uint8)
    total = fields[0] + fields[1]
    total += fields[2]
    soft = np.argmax(total, axis=0).astype(np.uint8)
    out = np.where(
        (a1 == a2) | (a1 == a3), a1, np.where(a2 == a3, a2, soft)
    ).astype(np.uint8)
    return out


def soft_vote(p_axial, p_coronal, p_sagittal):
    """Argmax of the per-class probability sums (lowest code on ties)."""
    total = _prob_data(p_axial) + _prob_data(p_coronal)
    total += _prob_data(p_sagittal)
    return np.argmax(total, axis=0).astype(np.uint8)


def consensus_merge(consensus, p_axial, p_coronal, p_sagittal, chunk=32):
    """Apply the consensus layer to the stacked 21-channel field.

    Channels are ordered (axial 0-6, coronal 7-13, sagittal 14-20) as
    recorded in the consensus container.
    """
    if tuple(consensus.channel_order) != CHANNEL_ORDER:
        raise CompatibilityError(
            f"consensus channel order {consensus.channel_order} != {CHANNEL_ORDER}"
        )
    by_name = {"axial": p_axial, "coronal": p_coronal, "sagittal": p_sagittal}
    fields = [_prob_data(by_name[name]) for name in consensus.channel_order]
    classes = fields[0].shape[0]
    W = np.asarray(consensus.W, dtype=np.float32)
    if W.shape[1] != classes * 3:
        raise CompatibilityError(
            f"consensus weights expect {W.shape[1]} channels, fields give {classes * 3}"
        )
    spatial = fields[0].shape[1:]
    out = np.empty((W.shape[0],) + spatial, dtype=np.float32)
    nz = spatial[-1]
    for z0 in range(0, nz, chunk):
        z1 = min(z0 + chunk, nz)
        x = np.concatenate([f[..., z0:z1] for f in fields], axis=0)
        flat = x.reshape(classes * 3, -1)
        y = W @ flat
        if consensus.b is not None:
            y += np.asarray(consensus.b, dtype=np.float32)[:, np.newaxis]
        y -= y.max(axis=0, keepdims=True)
        np.exp(y, out=y)
        y /= y.sum(axis=0, keepdims=True)
        out[..., z0:z1] = y.reshape((W.shape[0],) + spatial[:-1] + (z1 - z0,))
    return ProbVolume(out, source="merged")


def _prob_data(p):
    return p.data if isinstance(p, ProbVolume) else np.asarray(p)


def segment(
    raw,
    bundle,
    merge="consensus",
    postprocess=True,
    min_component=27,
    threads=1,
    batch=4,
):
    """Segment a native-space Volume into tissue labels on its own grid.

    conform -> 3x per-axis inference -> merge -> (rules) -> restore_native.
    Returns (LabelVolume, provenance dict).
    """
    try:
        conformed, record = conform(raw)
    except Exception as exc:
        raise StageError("conform", exc) from exc

    probs = {}
    for axis in AXES:
        model = bundle.models.get(axis)
        if model is None:
            raise StageError("infer", CompatibilityError(f"bundle lacks {axis} model"))
        try:
            probs[axis] = infer_axis(model, conformed, axis, batch=batch, threads=threads)
        except Exception as exc:
            raise StageError(f"infer:{axis}", exc) from exc

    try:
        if merge == "vote":
            labels = majority_vote(probs["axial"], probs["coronal"], probs["sagittal"])
        elif merge == "consensus":
            merged = consensus_merge(
                bundle.consensus, probs["axial"], probs["coronal"], probs["sagittal"]
            )
            labels = np.argmax(merged.data, axis=0).astype(np.uint8)
        else:
            raise ShapeError(f"unknown merge mode {merge!r}")
    except StageError:
        raise
    except Exception as exc:
        raise StageError("merge", exc) from exc

    report = None
    if postprocess:
        try:
            labels, report = pp.apply_all(labels, min_voxels=min_component)
        except Exception as exc:
            raise StageError("postprocess", exc) from exc

    try:
        conformed_labels = LabelVolume(
            labels, conformed.spacing, conformed.affine.copy()
        )
        native = restore_native(conformed_labels, record)
    except Exception as exc:
        raise StageError("restore", exc) from exc

    provenance = {
        "p95": record.p95,
        "offsets": record.offsets,
        "permutation": record.permutation,
        "flips": record.flips,
        "resample_factor": record.resample_factor,
        "merge": merge,
        "bundle_digest": bundle.digest,
        "postprocess": report.asdict() if report else None,
    }
    native.record("segment", **provenance)
    return native, provenance


# -- consensus container and bundle manifest ---------------------------------


def save_consensus(path, consensus):
    tensors = {"consensus.W": consensus.W}
    if consensus.b is not None:
        tensors["consensus.b"] = consensus.b
    meta = {
        "kind": "consensus",
        "channel_order": list(consensus.channel_order),
        "bias": consensus.b is not None,
        "format": "MAXW",
    }
    save_container(path, tensors, meta)


def load_consensus(path):
    meta, tensors = load_container(path)
    if meta.get("kind") != "consensus":
        raise CompatibilityError(f"container kind {meta.get('kind')!r} is not 'consensus'")
    if "consensus.W" not in tensors:
        raise CompatibilityError("missing tensor 'consensus.W'")
    return ConsensusWeights(
        W=tensors["consensus.W"],
        b=tensors.get("consensus.b"),
        channel_order=tuple(meta["channel_order"]),
    )


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, role_paths):
    """role -> container path; digests are computed and recorded."""
    base = os.path.dirname(os.path.abspath(path))
    lines = []
    for role, p in role_paths.items():
        rel = os.path.relpath(os.path.abspath(p), base)
        lines.append(f"{role}\t{rel}\t{file_digest(p)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_bundle(manifest_path, verify=True):
    """Load the four containers referenced by a manifest file."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    entries = {}
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"manifest line not 'role<TAB>path<TAB>digest': {line!r}")
            role, rel, digest = parts
            entries[role] = (os.path.join(base, rel), digest)
    missing = {"axial", "coronal", "sagittal", "consensus"} - set(entries)
    if missing:
        raise FormatError(f"manifest missing roles: {sorted(missing)}")

    models = {}
    digest_h = hashlib.sha256()
    for role in ("axial", "coronal", "sagittal", "consensus"):
        path, digest = entries[role]
        actual = file_digest(path)
        if verify and actual != digest:
            raise FormatError(f"{role} container digest mismatch for {path}")
        digest_h.update(actual.encode())
        if role == "consensus":
            consensus = load_consensus(path)
        else:
            config, tensors, _ = load_weights(path)
            model = build_unet(config)
            model.load_parameters(tensors)
            models[role] = model
    classes = {m.config.classes for m in models.values()}
    if classes != {consensus.W.shape[0]}:
        raise CompatibilityError(
            f"class count mismatch: models {classes}, consensus {consensus.W.shape[0]}"
        )
    return WeightBundle(
        models=models,
        consensus=consensus,
        digest=digest_h.hexdigest(),
        paths={r: entries[r][0] for r in entries},
    )
