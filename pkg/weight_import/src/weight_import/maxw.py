"""Standalone MAXW container writer.

Implements the container format from its byte-level definition so checks
against the consuming engine stay independent: magic "MAXW", u32 version,
u64 metadata length, UTF-8 JSON metadata (config echo plus ordered tensor
manifest of name / shape / payload byte offset), then contiguous
little-endian float32 payloads.
"""

import json
import struct

import numpy as np

MAGIC = b"MAXW"
VERSION = 1


def write_container(path, tensors, meta):
    """tensors: ordered dict name -> array; meta: JSON-serializable dict."""
    manifest = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    doc = dict(meta)
    doc["tensors"] = manifest
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def unet_metadata(config_fields, role="axial"):
    return {
        "kind": "unet",
        "role": role,
        "config": dict(config_fields),
        "format": "MAXW",
        "converted_by": "weight-import",
    }


def consensus_metadata(channel_order=("axial", "coronal", "sagittal"), bias=False):
    return {
        "kind": "consensus",
        "channel_order": list(channel_order),
        "bias": bias,
        "format": "MAXW",
        "converted_by": "weight-import",
    }
