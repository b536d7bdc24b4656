"""Rule-based anatomical cleanup of label volumes in conformed space.

Four rules, applied in a fixed order until nothing changes: external air
becomes background, enclosed background becomes bone, bone touching brain
becomes CSF, and small isolated components are absorbed into their
surroundings.  Anatomical rules use 6-connectivity; component-size cleanup
uses 26-connectivity.  Each rule reads only the pre-pass state, so a
single rule application is order-independent within itself.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import AIR, BACKGROUND, BONE, CSF, GM, WM, LabelVolume

STRUCT6 = ndimage.generate_binary_structure(3, 1)
STRUCT26 = ndimage.generate_binary_structure(3, 3)

RULES = (
    "clear_external_air",
    "fill_enclosed_background_as_bone",
    "relabel_bone_touching_brain",
    "remove_small_components",
)


def _unwrap(labels):
    if isinstance(labels, LabelVolume):
        return labels.data, labels
    return np.asarray(labels), None


def _rewrap(arr, template):
    if template is None:
        return arr
    return LabelVolume(arr, template.spacing, template.affine.copy(), list(template.provenance))


def _border_component_ids(component_map):
    ids = set()
    for axis in range(3):
        for face in (0, -1):
            ids.update(np.unique(np.take(component_map, face, axis=axis)))
    ids.discard(0)
    return ids


def relabel_bone_touching_brain(labels):
    """Bone voxels with a 6-connected WM/GM neighbor become CSF."""
    arr, template = _unwrap(labels)
    brain = (arr == WM) | (arr == GM)
    near_brain = ndimage.binary_dilation(brain, structure=STRUCT6)
    mask = (arr == BONE) & near_brain
    out = arr.copy()
    out[mask] = CSF
    return _rewrap(out, template)


def fill_enclosed_background_as_bone(labels):
    """Background components not 6-connected to the volume border become bone."""
    arr, template = _unwrap(labels)
    bg = arr == BACKGROUND
    comp, n = ndimage.label(bg, structure=STRUCT6)
    if n == 0:
        return _rewrap(arr.copy(), template)
    outside = _border_component_ids(comp)
    enclosed = bg & ~np.isin(comp, sorted(outside))
    out = arr.copy()
    out[enclosed] = BONE
    return _rewrap(out, template)


def clear_external_air(labels):
    """Air-cavity components 6-connected to the volume border become background."""
    arr, template = _unwrap(labels)
    air = arr == AIR
    comp, n = ndimage.label(air, structure=STRUCT6)
    if n == 0:
        return _rewrap(arr.copy(), template)
    outside = _border_component_ids(comp)
    external = air & np.isin(comp, sorted(outside))
    out = arr.copy()
    out[external] = BACKGROUND
    return _rewrap(out, template)


def remove_small_components(labels, min_voxels=27):
    """Absorb sub-threshold 26-connected nonbackground components.

    Each small component takes the plurality class of its 26-neighborhood
    boundary (pre-pass state; ties to the lowest code).  Background is
    exempt.
    """
    arr, template = _unwrap(labels)
    out = arr.copy()
    if min_voxels <= 1:
        return _rewrap(out, template)
    for code in np.unique(arr):
        if code == BACKGROUND:
            continue
        mask = arr == code
        comp, n = ndimage.label(mask, structure=STRUCT26)
        if n == 0:
            continue
        sizes = np.bincount(comp.ravel())
        small = [i for i in range(1, n + 1) if sizes[i] < min_voxels]
        if not small:
            continue
        boxes = ndimage.find_objects(comp)
        for cid in small:
            box = boxes[cid - 1]
            grown = tuple(
                slice(max(sl.start - 1, 0), min(sl.stop + 1, dim))
                for sl, dim in zip(box, arr.shape)
            )
            local = comp[grown] == cid
            ring = ndimage.binary_dilation(local, structure=STRUCT26) & ~local
            neighbors = arr[grown][ring]
            if neighbors.size == 0:
                continue
            counts = np.bincount(neighbors)
            out[grown][local] = np.argmax(counts)
    return _rewrap(out, template)


@dataclass
class RuleReport:
    """Changed-voxel counts per rule, accumulated over fixpoint passes."""

    counts: dict = field(default_factory=lambda: {name: 0 for name in RULES})
    passes: int = 0
    converged: bool = True

    def asdict(self):
        return {"passes": self.passes, "converged": self.converged, **self.counts}


def apply_all(labels, min_voxels=27, max_passes=100):
    """Run the four rules in order until a full pass changes nothing.

    Returns (labels', RuleReport).  Iterating to a fixpoint makes the
    operation idempotent and guarantees every rule's post-condition holds
    simultaneously on the result.
    """
    arr, template = _unwrap(labels)
    current = arr.copy()
    report = RuleReport()
    funcs = {
        "clear_external_air": clear_external_air,
        "fill_enclosed_background_as_bone": fill_enclosed_background_as_bone,
        "relabel_bone_touching_brain": relabel_bone_touching_brain,
        "remove_small_components": lambda a: remove_small_components(a, min_voxels),
    }
    for _ in range(max_passes):
        report.passes += 1
        changed_this_pass = 0
        for name in RULES:
            nxt = funcs[name](current)
            n_changed = int(np.count_nonzero(nxt != current))
            report.counts[name] += n_changed
            changed_this_pass += n_changed
            current = nxt
        if changed_this_pass == 0:
            break
    else:
        report.converged = False
    return _rewrap(current, template), report
