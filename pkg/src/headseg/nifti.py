"""NIfTI-1 reader and writer for the supported subset.

Reads .nii / .nii.gz (plus .hdr/.img pairs), little- or big-endian headers,
datatypes uint8 / int16 / int32 / float32 / float64.  Always writes
little-endian single-file "n+1" images with the sform set.  Header
extensions are skipped; NIfTI-2 and 4D time series are out of scope.
"""

import gzip
import logging
import os
import struct

import numpy as np

from .errors import (
    GeometryError,
    LengthMismatchError,
    NiftiParseError,
    RangeError,
    UnsupportedDatatypeError,
)
from .volume import LabelVolume, Volume

log = logging.getLogger(__name__)

HEADER_SIZE = 348
SINGLE_MAGIC = b"n+1\x00"
PAIR_MAGIC = b"ni1\x00"

# struct layout of nifti_1_header, 348 bytes
_FIELDS = (
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "c"),
    ("dim_info", "c"),
    ("dim", "8h"),
    ("intent_p1", "f"),
    ("intent_p2", "f"),
    ("intent_p3", "f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "c"),
    ("xyzt_units", "c"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern_b", "f"),
    ("quatern_c", "f"),
    ("quatern_d", "f"),
    ("qoffset_x", "f"),
    ("qoffset_y", "f"),
    ("qoffset_z", "f"),
    ("srow_x", "4f"),
    ("srow_y", "4f"),
    ("srow_z", "4f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
)
_STRUCT_BODY = "".join(fmt for _, fmt in _FIELDS)

# datatype code -> numpy dtype (endian-less)
DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}


class NiftiHeader:
    """Parsed nifti_1_header as a plain attribute bag."""

    def __init__(self, **fields):
        self.__dict__.update(fields)

    @classmethod
    def from_bytes(cls, raw, byteorder):
        values = struct.unpack(byteorder + _STRUCT_BODY, raw)
        fields = {}
        pos = 0
        for name, fmt in _FIELDS:
            n = int(fmt[:-1]) if fmt[:-1].isdigit() and fmt[-1] in "hf" else 1
            if n > 1:
                fields[name] = values[pos : pos + n]
                pos += n
            else:
                fields[name] = values[pos]
                pos += 1
        fields["byteorder"] = byteorder
        return cls(**fields)

    def to_bytes(self, byteorder="<"):
        values = []
        for name, fmt in _FIELDS:
            v = getattr(self, name)
            if isinstance(v, tuple):
                values.extend(v)
            else:
                values.append(v)
        return struct.pack(byteorder + _STRUCT_BODY, *values)


def _is_gzip(path):
    with open(path, "rb") as fh:
        return fh.read(2) == b"\x1f\x8b"


def _read_all(path):
    if _is_gzip(path):
        with gzip.open(path, "rb") as fh:
            return fh.read()
    with open(path, "rb") as fh:
        return fh.read()


def _parse_header(raw):
    if len(raw) < HEADER_SIZE:
        raise NiftiParseError(
            f"file holds {len(raw)} bytes, shorter than the {HEADER_SIZE}-byte header"
        )
    # endianness heuristic: dim[0] must land in 1..7
    for bo in ("<", ">"):
        dim0 = struct.unpack(bo + "h", raw[40:42])[0]
        if 1 <= dim0 <= 7:
            hdr = NiftiHeader.from_bytes(raw[:HEADER_SIZE], bo)
            break
    else:
        raise NiftiParseError(
            f"dim[0] bytes {raw[40:42]!r} plausible in neither byte order"
        )
    if hdr.sizeof_hdr != HEADER_SIZE:
        raise NiftiParseError(f"sizeof_hdr is {hdr.sizeof_hdr}, expected {HEADER_SIZE}")
    if hdr.magic not in (SINGLE_MAGIC, PAIR_MAGIC):
        raise NiftiParseError(f"bad magic bytes {hdr.magic!r}")
    return hdr


def _quaternion_affine(hdr):
    b, c, d = hdr.quatern_b, hdr.quatern_c, hdr.quatern_d
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if hdr.pixdim[0] == -1.0 else 1.0
    zooms = np.array([hdr.pixdim[1], hdr.pixdim[2], qfac * hdr.pixdim[3]])
    affine = np.eye(4)
    affine[:3, :3] = rot * zooms
    affine[:3, 3] = (hdr.qoffset_x, hdr.qoffset_y, hdr.qoffset_z)
    return affine


def _affine_from_header(hdr):
    if hdr.sform_code > 0:
        affine = np.eye(4)
        affine[0] = hdr.srow_x
        affine[1] = hdr.srow_y
        affine[2] = hdr.srow_z
        return affine
    if hdr.qform_code > 0:
        return _quaternion_affine(hdr)
    affine = np.diag([hdr.pixdim[1] or 1.0, hdr.pixdim[2] or 1.0, hdr.pixdim[3] or 1.0, 1.0])
    return affine


def read_header(path):
    """Parse and return the header only."""
    return _parse_header(_read_all(path))


def read_nifti(path):
    """Read a NIfTI-1 file into a float32 Volume.

    Applies scl_slope / scl_inter when scl_slope is nonzero, prefers the
    sform over the qform, and zeroes non-finite voxels (counted in
    provenance).
    """
    raw = _read_all(path)
    hdr = _parse_header(raw)
    if hdr.datatype not in DTYPES:
        raise UnsupportedDatatypeError(
            f"datatype code {hdr.datatype} unsupported; supported codes: "
            f"{sorted(DTYPES)}"
        )
    ndim = hdr.dim[0]
    if ndim not in (3, 4):
        raise NiftiParseError(f"dim[0]={ndim}, only rank 3 (or 4 with a unit axis) handled")
    dims = tuple(int(d) for d in hdr.dim[1 : 1 + ndim])
    if ndim == 4:
        if dims[3] != 1:
            raise NiftiParseError(f"4D volume with dim[4]={dims[3]}; time series unsupported")
        dims = dims[:3]

    if hdr.magic == PAIR_MAGIC:
        img_path = _pair_img_path(path)
        payload = _read_all(img_path)
        offset = int(hdr.vox_offset)
    else:
        payload = raw
        offset = int(hdr.vox_offset) if hdr.vox_offset else HEADER_SIZE + 4

    dtype = DTYPES[hdr.datatype].newbyteorder(hdr.byteorder)
    expected = int(np.prod(dims)) * dtype.itemsize
    actual = len(payload) - offset
    if actual < expected:
        raise LengthMismatchError(
            f"data section holds {actual} bytes, expected {expected} "
            f"for dims {dims} at {dtype.itemsize} bytes/voxel"
        )
    flat = np.frombuffer(payload, dtype=dtype, count=int(np.prod(dims)), offset=offset)
    data = flat.reshape(dims, order="F").astype(np.float32)
    if hdr.scl_slope != 0.0 and not (hdr.scl_slope == 1.0 and hdr.scl_inter == 0.0):
        data = data * np.float32(hdr.scl_slope) + np.float32(hdr.scl_inter)

    bad = ~np.isfinite(data)
    n_bad = int(bad.sum())
    if n_bad:
        data = data.copy()
        data[bad] = 0.0
        log.warning("%s: zeroed %d non-finite voxels", path, n_bad)

    affine = _affine_from_header(hdr)
    rzs = affine[:3, :3]
    if abs(np.linalg.det(rzs)) < 1e-12:
        raise GeometryError(f"{path}: singular voxel-to-world affine")
    spacing = tuple(np.linalg.norm(rzs, axis=0))
    vol = Volume(data, spacing, affine)
    vol.record("read", path=str(path), datatype=int(hdr.datatype), nonfinite_zeroed=n_bad)
    return vol


def _pair_img_path(path):
    base = str(path)
    for ext in (".hdr.gz", ".hdr"):
        if base.endswith(ext):
            stem = base[: -len(ext)]
            for img in (stem + ".img", stem + ".img.gz"):
                if os.path.exists(img):
                    return img
    raise NiftiParseError(f"no .img companion found for header pair {path}")


def _cast_payload(data, dtype, datatype_code):
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        lo, hi = float(data.min()), float(data.max())
        if lo < info.min or hi > info.max:
            raise RangeError(
                f"values {lo}..{hi} exceed range of datatype {datatype_code} "
                f"({info.min}..{info.max})"
            )
        return np.rint(data).astype(dtype)
    return np.asarray(data, dtype=dtype)


def write_nifti(vol, path, datatype_code=16):
    """Write a Volume or LabelVolume as a single-file little-endian NIfTI-1.

    Sets sform = affine (sform_code 1), scl_slope 1 / scl_inter 0.  Label
    volumes must request unsigned 8-bit (code 2).
    """
    if datatype_code not in DTYPES:
        raise UnsupportedDatatypeError(
            f"datatype code {datatype_code} unsupported; supported codes: {sorted(DTYPES)}"
        )
    if isinstance(vol, LabelVolume) and datatype_code != 2:
        raise RangeError("label volumes must be written as unsigned 8-bit (code 2)")
    dtype = DTYPES[datatype_code].newbyteorder("<")
    payload = _cast_payload(vol.data, dtype, datatype_code)

    dims = vol.data.shape
    pixdim = [1.0] + [float(s) for s in vol.spacing] + [0.0] * 4
    hdr = NiftiHeader(
        sizeof_hdr=HEADER_SIZE,
        data_type=b"", db_name=b"", extents=0, session_error=0,
        regular=b"r", dim_info=b"\x00",
        dim=(3, dims[0], dims[1], dims[2], 1, 1, 1, 1),
        intent_p1=0.0, intent_p2=0.0, intent_p3=0.0, intent_code=0,
        datatype=datatype_code, bitpix=dtype.itemsize * 8, slice_start=0,
        pixdim=tuple(pixdim),
        vox_offset=float(HEADER_SIZE + 4),
        scl_slope=1.0, scl_inter=0.0,
        slice_end=0, slice_code=b"\x00", xyzt_units=b"\x02",
        cal_max=0.0, cal_min=0.0, slice_duration=0.0, toffset=0.0,
        glmax=0, glmin=0,
        descrip=b"headseg", aux_file=b"",
        qform_code=0, sform_code=1,
        quatern_b=0.0, quatern_c=0.0, quatern_d=0.0,
        qoffset_x=float(vol.affine[0, 3]),
        qoffset_y=float(vol.affine[1, 3]),
        qoffset_z=float(vol.affine[2, 3]),
        srow_x=tuple(float(v) for v in vol.affine[0]),
        srow_y=tuple(float(v) for v in vol.affine[1]),
        srow_z=tuple(float(v) for v in vol.affine[2]),
        intent_name=b"", magic=SINGLE_MAGIC,
        byteorder="<",
    )
    blob = hdr.to_bytes("<") + b"\x00\x00\x00\x00" + payload.tobytes(order="F")
    if str(path).endswith(".gz"):
        # mtime pinned so identical volumes produce identical files
        with open(path, "wb") as fh:
            with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(blob)
    else:
        with open(path, "wb") as fh:
            fh.write(blob)


def orientation_codes(affine):
    """Closest world axis (0=R, 1=A, 2=S) and sign for each voxel axis.

    World axes are assigned greedily by descending direction-cosine
    magnitude so the result is always a permutation.
    """
    affine = np.asarray(affine, dtype=np.float64)
    rzs = affine[:3, :3]
    if abs(np.linalg.det(rzs)) < 1e-12:
        raise GeometryError("orientation undefined for singular affine")
    cosines = rzs / np.linalg.norm(rzs, axis=0)
    perm = [-1, -1, -1]
    signs = [0, 0, 0]
    mags = np.abs(cosines)
    order = np.argsort(mags, axis=None)[::-1]
    done_vox, done_world = set(), set()
    for flat in order:
        world, vox = np.unravel_index(flat, (3, 3))
        if vox in done_vox or world in done_world:
            continue
        perm[vox] = int(world)
        signs[vox] = 1 if cosines[world, vox] >= 0 else -1
        done_vox.add(int(vox))
        done_world.add(int(world))
        if len(done_vox) == 3:
            break
    return tuple(perm), tuple(signs)
