"""Layer-name mapping between checkpoint tensors and MAXW targets.

A mapping is a list of (source path, target name, transpose rule).  Rules
encode the axis reordering between the source framework's kernel layout
and the MAXW convention (out, in, kh, kw):

  conv_kernel   (kh, kw, in, out)      -> transpose (3, 2, 0, 1)
  tconv_kernel  (kh, kw, out, in)      -> transpose (2, 3, 0, 1)
  conv3d_kernel (1, 1, 1, in, out)     -> squeeze + transpose -> (out, in)
  none          copied verbatim (biases, already-matching tensors)

Mapping files are editable text: one `source<TAB>target<TAB>rule` line per
tensor; blank lines and `#` comments are ignored.
"""

from dataclasses import dataclass

import numpy as np

RULES = ("none", "conv_kernel", "tconv_kernel", "conv3d_kernel")


class MappingError(Exception):
    """Mapping file inconsistent with the checkpoint or the target manifest."""


@dataclass(frozen=True)
class MapEntry:
    source: str
    target: str
    rule: str


def apply_rule(array, rule):
    array = np.asarray(array)
    if rule == "none":
        return array
    if rule == "conv_kernel":
        if array.ndim != 4:
            raise MappingError(f"conv_kernel rule needs a 4D tensor, got {array.shape}")
        return np.transpose(array, (3, 2, 0, 1))
    if rule == "tconv_kernel":
        if array.ndim != 4:
            raise MappingError(f"tconv_kernel rule needs a 4D tensor, got {array.shape}")
        return np.transpose(array, (2, 3, 0, 1))
    if rule == "conv3d_kernel":
        if array.ndim != 5 or array.shape[:3] != (1, 1, 1):
            raise MappingError(
                f"conv3d_kernel rule needs a (1,1,1,in,out) tensor, got {array.shape}"
            )
        return np.transpose(array[0, 0, 0], (1, 0))
    raise MappingError(f"unknown transpose rule {rule!r}; supported: {RULES}")


def rule_shape(shape, rule):
    """Target shape a source tensor of `shape` produces under `rule`."""
    if rule == "none":
        return tuple(shape)
    if rule == "conv_kernel":
        kh, kw, cin, cout = shape
        return (cout, cin, kh, kw)
    if rule == "tconv_kernel":
        kh, kw, cout, cin = shape
        return (cout, cin, kh, kw)
    if rule == "conv3d_kernel":
        _, _, _, cin, cout = shape
        return (cout, cin)
    raise MappingError(f"unknown transpose rule {rule!r}")


def parse_mapping(path):
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise MappingError(
                    f"{path}:{lineno}: expected 'source<TAB>target<TAB>rule', got {line!r}"
                )
            source, target, rule = parts
            if rule not in RULES:
                raise MappingError(f"{path}:{lineno}: unknown rule {rule!r}")
            entries.append(MapEntry(source, target, rule))
    _check_unique(entries)
    return entries


def write_mapping(path, entries):
    with open(path, "w") as fh:
        fh.write("# source\ttarget\trule\n")
        for e in entries:
            fh.write(f"{e.source}\t{e.target}\t{e.rule}\n")


def _check_unique(entries):
    seen_src, seen_tgt = set(), set()
    for e in entries:
        if e.source in seen_src:
            raise MappingError(f"source {e.source!r} mapped twice")
        if e.target in seen_tgt:
            raise MappingError(f"two sources map to target {e.target!r}")
        seen_src.add(e.source)
        seen_tgt.add(e.target)


def _candidate_rules(src_shape, tgt_shape):
    for rule in RULES:
        try:
            if rule_shape(src_shape, rule) == tuple(tgt_shape):
                yield rule
        except (MappingError, ValueError):
            continue


def suggest_mapping(source_tensors, manifest):
    """Propose a mapping by shape compatibility, preserving tensor order.

    source_tensors: dict path -> array (insertion-ordered, checkpoint
    order); manifest: ordered (target name, target shape) pairs.  Each
    source is greedily matched to the first unclaimed target a rule can
    reach.  The result is a starting point meant to be reviewed by hand.
    """
    entries = []
    claimed = set()
    for src, arr in source_tensors.items():
        for tgt, tgt_shape in manifest:
            if tgt in claimed:
                continue
            rules = list(_candidate_rules(arr.shape, tgt_shape))
            if rules:
                preferred = rules[0]
                if len(rules) > 1 and "kernel" in src:
                    kernels = [r for r in rules if r != "none"]
                    preferred = kernels[0] if kernels else rules[0]
                entries.append(MapEntry(src, tgt, preferred))
                claimed.add(tgt)
                break
    return entries
