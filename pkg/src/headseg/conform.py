"""Conform volumes to the canonical network space and invert the mapping.

Canonical space: 1 mm isotropic, RAS axis order, 256 voxels per axis,
intensities divided by the image's 95th percentile.  Every step logs its
parameters into a ConformRecord so label outputs can be mapped back onto
the native scan grid.
"""

import numpy as np
from scipy import ndimage

from .errors import DegenerateImageError, GeometryError, RecordError
from .nifti import orientation_codes
from .volume import ConformRecord, LabelVolume, Volume, percentile

CANONICAL_SIZE = 256
TARGET_SPACING = 1.0


def resample_isotropic(vol, target=TARGET_SPACING, mode="linear", record=None):
    """Resample to isotropic `target` mm spacing.

    Trilinear for intensities, nearest-neighbor for labels.  A volume
    already at the target spacing (within 1e-6) passes through untouched.
    """
    spacing = np.asarray(vol.spacing, dtype=np.float64)
    if np.any(spacing <= 0):
        raise GeometryError(f"nonpositive spacing {tuple(spacing)}")
    if np.all(np.abs(spacing - target) <= 1e-6):
        if record is not None:
            record.resample_skipped = True
            record.resample_factor = (1.0, 1.0, 1.0)
            record.resampled_dims = vol.shape
        out = _like(vol, vol.data)
        out.record("resample", skipped=True)
        return out

    # factor = old index step per new voxel along each axis
    factor = target / spacing
    old_dims = np.asarray(vol.shape)
    new_dims = np.maximum(1, np.floor((old_dims - 1) / factor).astype(int) + 1)

    grids = np.meshgrid(
        *(np.arange(n) * f for n, f in zip(new_dims, factor)), indexing="ij"
    )
    coords = np.stack([g.astype(np.float64) for g in grids])
    order = 1 if mode == "linear" else 0
    data = ndimage.map_coordinates(
        vol.data.astype(np.float64) if order else vol.data,
        coords, order=order, mode="nearest",
    )
    affine = vol.affine.copy()
    affine[:3, :3] = affine[:3, :3] * factor[np.newaxis, :]

    if record is not None:
        record.resample_skipped = False
        record.resample_factor = tuple(float(f) for f in factor)
        record.resampled_dims = tuple(int(n) for n in new_dims)
    if isinstance(vol, LabelVolume):
        out = LabelVolume(data.astype(np.uint8), (target,) * 3, affine, list(vol.provenance))
    else:
        out = Volume(data.astype(np.float32), (target,) * 3, affine, list(vol.provenance))
    out.record("resample", factor=tuple(float(f) for f in factor))
    return out


def reorient_to_ras(vol, record=None):
    """Permute / flip voxel axes so axis 0 points R, 1 points A, 2 points S.

    Pure index relabeling: the multiset of voxel values is unchanged.
    """
    perm, signs = orientation_codes(vol.affine)
    if record is not None:
        record.permutation = perm
        record.flips = tuple(s < 0 for s in signs)
    if perm == (0, 1, 2) and all(s > 0 for s in signs):
        out = _like(vol, vol.data)
        out.record("reorient", identity=True)
        return out

    # inverse permutation: new axis w comes from voxel axis with perm == w
    inv = tuple(perm.index(w) for w in range(3))
    data = np.transpose(vol.data, inv)
    affine = vol.affine.copy()
    affine[:3, :3] = affine[:3, :3][:, list(inv)]
    new_signs = [signs[ax] for ax in inv]
    for w, s in enumerate(new_signs):
        if s < 0:
            data = np.flip(data, axis=w)
            n = data.shape[w]
            affine[:3, 3] = affine[:3, 3] + affine[:3, w] * (n - 1)
            affine[:3, w] = -affine[:3, w]
    data = np.ascontiguousarray(data)
    spacing = tuple(np.linalg.norm(affine[:3, :3], axis=0))
    out = _rebuild(vol, data, spacing, affine)
    out.record("reorient", permutation=perm, flips=tuple(s < 0 for s in signs))
    return out


def conform_256(vol, record=None, size=CANONICAL_SIZE):
    """Pad or crop each axis to `size`, centered, pad value 0.

    offset o per axis is signed: new[i] = old[i - o]; o = floor((size-n)/2)
    when padding, -floor((n-size)/2) when cropping.
    """
    dims = vol.shape
    offsets = []
    for n in dims:
        if n <= size:
            offsets.append((size - n) // 2)
        else:
            offsets.append(-((n - size) // 2))
    offsets = tuple(int(o) for o in offsets)
    if record is not None:
        record.offsets = offsets
    if dims == (size, size, size):
        out = _like(vol, vol.data)
        out.record("conform_256", identity=True)
        return out

    data = np.zeros((size, size, size), dtype=vol.data.dtype)
    src, dst = [], []
    for n, o in zip(dims, offsets):
        if o >= 0:
            src.append(slice(0, n))
            dst.append(slice(o, o + n))
        else:
            src.append(slice(-o, -o + size))
            dst.append(slice(0, size))
    data[tuple(dst)] = vol.data[tuple(src)]
    affine = vol.affine.copy()
    affine[:3, 3] = affine[:3, 3] - affine[:3, :3] @ np.asarray(offsets, dtype=np.float64)
    out = _rebuild(vol, data, vol.spacing, affine)
    out.record("conform_256", offsets=offsets)
    return out


def normalize_intensity(vol, record=None):
    """Divide by the volume's 95th percentile (all voxels, padding included).

    Skipped when p95 is already 1 within 1e-6, which makes the conform
    pipeline bitwise idempotent.
    """
    if not np.any(vol.data > 0):
        raise DegenerateImageError("no positive voxels; cannot normalize")
    p95 = percentile(vol.data, 0.95)
    if p95 <= 0:
        raise DegenerateImageError(f"95th percentile {p95} not positive")
    if record is not None:
        record.p95 = p95
    if abs(p95 - 1.0) <= 1e-6:
        out = _like(vol, vol.data)
        out.record("normalize", p95=p95, skipped=True)
        return out
    out = _like(vol, (vol.data / np.float32(p95)).astype(np.float32))
    out.record("normalize", p95=p95)
    return out


def conform(vol):
    """Full conform pipeline: resample -> reorient -> 256 cube -> normalize.

    Returns (conformed Volume, ConformRecord).
    """
    record = ConformRecord(
        original_dims=vol.shape, original_affine=vol.affine.copy()
    )
    out = resample_isotropic(vol, record=record)
    out = reorient_to_ras(out, record=record)
    out = conform_256(out, record=record)
    out = normalize_intensity(out, record=record)
    return out, record


def conform_labels(labels, record=None):
    """Conform a LabelVolume with nearest-neighbor resampling (no normalize)."""
    own = ConformRecord(original_dims=labels.shape, original_affine=labels.affine.copy())
    out = resample_isotropic(labels, mode="nearest", record=own)
    out = reorient_to_ras(out, record=own)
    out = conform_256(out, record=own)
    if record is not None:
        record.resample_skipped = own.resample_skipped
        record.resample_factor = own.resample_factor
        record.resampled_dims = own.resampled_dims
        record.permutation = own.permutation
        record.flips = own.flips
        record.offsets = own.offsets
        record.original_dims = own.original_dims
        record.original_affine = own.original_affine
    return out


def restore_native(labels, record):
    """Map a conformed-space LabelVolume back onto the native scan grid.

    Undoes pad/crop, reorientation, and resampling (nearest-neighbor), in
    that order.  Output geometry equals the record's original dims/affine.
    """
    if not record.complete():
        raise RecordError("conform record is missing the original geometry")
    if record.resampled_dims is None:
        raise RecordError("conform record is missing the resampled dims")
    data = labels.data

    # 1. undo pad/crop: old[i] = new[i + o]
    mid_dims = _permuted_dims(record)
    undone = np.zeros(mid_dims, dtype=data.dtype)
    src, dst = [], []
    for n, o in zip(mid_dims, record.offsets):
        if o >= 0:
            src.append(slice(o, o + n))
            dst.append(slice(0, n))
        else:
            src.append(slice(0, CANONICAL_SIZE))
            dst.append(slice(-o, -o + CANONICAL_SIZE))
    undone[tuple(dst)] = data[tuple(src)]

    # 2. undo flips then permutation
    inv = tuple(record.permutation.index(w) for w in range(3))
    flips_on_ras = [record.flips[ax] for ax in inv]
    for w, flipped in enumerate(flips_on_ras):
        if flipped:
            undone = np.flip(undone, axis=w)
    undone = np.transpose(undone, record.permutation)

    # 3. undo resampling: nearest sample of the 1 mm grid at native centers
    if record.resample_skipped:
        native = undone
    else:
        factor = np.asarray(record.resample_factor)
        idx = [
            np.clip(np.rint(np.arange(n) / f).astype(int), 0, m - 1)
            for n, f, m in zip(record.original_dims, factor, undone.shape)
        ]
        native = undone[np.ix_(*idx)]

    if native.shape != tuple(record.original_dims):
        raise RecordError(
            f"restored dims {native.shape} do not match record {record.original_dims}"
        )
    spacing = tuple(np.linalg.norm(record.original_affine[:3, :3], axis=0))
    out = LabelVolume(
        np.ascontiguousarray(native), spacing, record.original_affine.copy(),
        list(labels.provenance),
    )
    out.record("restore_native")
    return out


def _permuted_dims(record):
    """Grid dims after resample+reorient, i.e. before the 256 pad/crop."""
    dims = record.resampled_dims
    inv = tuple(record.permutation.index(w) for w in range(3))
    return tuple(dims[ax] for ax in inv)


def _like(vol, data):
    cls = LabelVolume if isinstance(vol, LabelVolume) else Volume
    return cls(data, vol.spacing, vol.affine.copy(), list(vol.provenance))


def _rebuild(vol, data, spacing, affine):
    cls = LabelVolume if isinstance(vol, LabelVolume) else Volume
    return cls(data, spacing, affine, list(vol.provenance))
