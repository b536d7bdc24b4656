"""Core volume containers and the shared percentile definition.

A :class:`Volume` is a 3D float32 grid with voxel spacing, a voxel-to-world
affine, and a provenance trail of applied transforms.  A
:class:`LabelVolume` carries tissue codes 0..6 on the same geometry.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, GeometryError

# Tissue codes.  0 background (extracerebral air), 1 air cavity,
# 2 white matter, 3 gray matter, 4 CSF, 5 bone, 6 skin / soft tissue.
BACKGROUND = 0
AIR = 1
WM = 2
GM = 3
CSF = 4
BONE = 5
SKIN = 6
N_CLASSES = 7
CLASS_NAMES = {
    BACKGROUND: "background",
    AIR: "air",
    WM: "white_matter",
    GM: "gray_matter",
    CSF: "csf",
    BONE: "bone",
    SKIN: "skin",
}


def _check_affine(affine, spacing):
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise GeometryError(f"affine must be 4x4, got {affine.shape}")
    rzs = affine[:3, :3]
    if abs(np.linalg.det(rzs)) < 1e-12:
        raise GeometryError("affine rotation/zoom block is singular")
    norms = np.linalg.norm(rzs, axis=0)
    spacing = np.asarray(spacing, dtype=np.float64)
    if np.any(spacing <= 0):
        raise GeometryError(f"spacing must be positive, got {tuple(spacing)}")
    if np.any(np.abs(norms - spacing) > 1e-4):
        raise GeometryError(
            f"spacing {tuple(spacing)} does not match affine column norms {tuple(norms)}"
        )
    return affine


@dataclass
class Volume:
    """3D scalar image: float32 data, mm spacing, voxel->world affine."""

    data: np.ndarray
    spacing: tuple
    affine: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise GeometryError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.affine = _check_affine(self.affine, self.spacing)

    @property
    def shape(self):
        return self.data.shape

    def record(self, step, **params):
        """Append a provenance entry describing an applied transform."""
        self.provenance.append({"step": step, **params})

    def copy_geometry(self, data, extra_step=None, **params):
        """New Volume with `data` on this volume's grid, provenance carried over."""
        vol = Volume(data, self.spacing, self.affine.copy(), list(self.provenance))
        if extra_step is not None:
            vol.record(extra_step, **params)
        return vol


@dataclass
class LabelVolume:
    """3D grid of tissue codes 0..6 sharing Volume geometry."""

    data: np.ndarray
    spacing: tuple
    affine: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise GeometryError(f"label data must be 3D, got shape {self.data.shape}")
        if self.data.dtype != np.uint8:
            mx = self.data.max() if self.data.size else 0
            mn = self.data.min() if self.data.size else 0
            if mn < 0 or mx > 255:
                raise GeometryError(f"label codes {mn}..{mx} outside uint8 range")
            self.data = self.data.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.affine = _check_affine(self.affine, self.spacing)

    @property
    def shape(self):
        return self.data.shape

    def record(self, step, **params):
        self.provenance.append({"step": step, **params})


@dataclass
class ConformRecord:
    """Invertible bookkeeping for the conform pipeline.

    Holds everything `restore_native` needs: the original grid, per-axis
    resample factors, the RAS permutation/flips, and signed pad/crop
    offsets (positive = padding inserted, negative = cropping removed).
    """

    original_dims: tuple = None
    original_affine: np.ndarray = None
    resample_skipped: bool = True
    resampled_dims: tuple = None
    resample_factor: tuple = (1.0, 1.0, 1.0)
    permutation: tuple = (0, 1, 2)
    flips: tuple = (False, False, False)
    offsets: tuple = (0, 0, 0)
    p95: float = None

    def complete(self):
        return self.original_dims is not None and self.original_affine is not None


def percentile(values, p):
    """Linear-interpolation percentile at fractional rank p*(n-1).

    `p` is a fraction in [0, 1]; `values` any nonempty collection of scalars.
    """
    values = np.ravel(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise DomainError("percentile of an empty multiset")
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"percentile fraction {p} outside [0, 1]")
    return float(np.quantile(values, p, method="linear"))
