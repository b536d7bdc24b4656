"""Reading and writing NIfTI-1 volumes.

Creates a small volume, writes it plain and gzip-compressed, reads both
back, and shows that the voxel payload survives bit-for-bit.
"""

import tempfile
from pathlib import Path

import numpy as np

from headseg import Volume, read_nifti, write_nifti
from headseg.nifti import read_header

workdir = Path(tempfile.mkdtemp())

rng = np.random.default_rng(0)
affine = np.diag([1.0, 1.0, 1.0, 1.0])
affine[:3, 3] = (-32.0, -32.0, -32.0)
vol = Volume(rng.standard_normal((64, 64, 64)).astype(np.float32), (1, 1, 1), affine)

plain = workdir / "demo.nii"
packed = workdir / "demo.nii.gz"
write_nifti(vol, plain, datatype_code=16)
write_nifti(vol, packed, datatype_code=16)

hdr = read_header(plain)
print("dims:", hdr.dim[1:4])
print("datatype code:", hdr.datatype)
print("sform row x:", hdr.srow_x)

back = read_nifti(plain)
back_gz = read_nifti(packed)
print("plain round trip bitwise:", np.array_equal(vol.data, back.data))
print("gzip matches plain:", np.array_equal(back.data, back_gz.data))
print("affine preserved:", np.allclose(vol.affine, back.affine, atol=1e-6))
