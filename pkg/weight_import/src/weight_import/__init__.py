"""Convert released TensorFlow/Keras checkpoints into MAXW containers."""

from .convert import ConversionSummary, convert_checkpoint, read_checkpoint_tensors
from .mapping import (
    MapEntry,
    MappingError,
    apply_rule,
    parse_mapping,
    suggest_mapping,
    write_mapping,
)
from .verify import VerificationError, VerificationResult, verify_conversion

__all__ = [
    "ConversionSummary",
    "convert_checkpoint",
    "read_checkpoint_tensors",
    "MapEntry",
    "MappingError",
    "apply_rule",
    "parse_mapping",
    "suggest_mapping",
    "write_mapping",
    "VerificationError",
    "VerificationResult",
    "verify_conversion",
]
