"""Checkpoint-to-MAXW conversion.

Checkpoints are read generically: every HDF5 dataset in the file becomes
a (path, array) pair, which survives the layout differences between
save_weights() generations.  A mapping (hand-edited or auto-suggested)
pairs those datasets with the tensors of the target architecture.
"""

from dataclasses import asdict, dataclass, field

import h5py
import numpy as np

from headseg.unet import UNetConfig, layer_manifest

from . import maxw
from .mapping import MappingError, apply_rule, suggest_mapping


@dataclass
class ConversionSummary:
    mapped: list = field(default_factory=list)  # (source, target, src shape, dst shape)
    out_path: str = ""

    def __str__(self):
        lines = [f"wrote {self.out_path} with {len(self.mapped)} tensors"]
        for src, tgt, s_shape, t_shape in self.mapped:
            lines.append(f"  {src} {s_shape} -> {tgt} {t_shape}")
        return "\n".join(lines)


def read_checkpoint_tensors(path):
    """All HDF5 datasets in file order as an ordered dict path -> float array."""
    tensors = {}

    def visit(name, obj):
        if isinstance(obj, h5py.Dataset) and obj.dtype.kind == "f":
            tensors[name] = np.asarray(obj)

    with h5py.File(path, "r") as fh:
        fh.visititems(visit)
    if not tensors:
        raise MappingError(f"no float datasets found in {path}")
    return tensors


def convert_checkpoint(src_path, config, out_path, mapping=None, role="axial"):
    """Convert a source checkpoint into a MAXW container for `config`.

    With mapping=None, an auto-suggested mapping (shape- and order-based)
    is used.  Every trainable tensor of the target architecture must be
    covered and every rule must produce the expected shape.
    Returns a ConversionSummary.
    """
    if isinstance(config, dict):
        config = UNetConfig(**config)
    source = read_checkpoint_tensors(src_path)
    manifest = layer_manifest(config)
    expected = dict(manifest)
    if mapping is None:
        mapping = suggest_mapping(source, manifest)

    by_target = {}
    for entry in mapping:
        if entry.source not in source:
            raise MappingError(
                f"mapping names source {entry.source!r}, not in checkpoint; "
                f"available: {sorted(source)[:8]}..."
            )
        if entry.target not in expected:
            raise MappingError(f"mapping names unknown target {entry.target!r}")
        by_target[entry.target] = entry

    missing = [name for name, _ in manifest if name not in by_target]
    if missing:
        raise MappingError(f"unmapped target tensors: {missing}")
    leftovers = set(source) - {e.source for e in mapping}
    if leftovers:
        raise MappingError(f"checkpoint tensors left unmapped: {sorted(leftovers)}")

    tensors = {}
    summary = ConversionSummary(out_path=str(out_path))
    for name, shape in manifest:
        entry = by_target[name]
        converted = apply_rule(source[entry.source], entry.rule)
        if converted.shape != shape:
            raise MappingError(
                f"tensor {name!r}: rule {entry.rule!r} turned source shape "
                f"{source[entry.source].shape} into {converted.shape}, expected {shape}"
            )
        tensors[name] = converted.astype(np.float32)
        summary.mapped.append(
            (entry.source, name, source[entry.source].shape, converted.shape)
        )
    maxw.write_container(out_path, tensors, maxw.unet_metadata(asdict(config), role))
    return summary
