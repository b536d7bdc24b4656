"""Whole-head MRI tissue segmentation with tri-planar 2D U-Nets.

Seven tissue classes (background, air, white matter, gray matter, CSF,
bone, skin) predicted by three per-axis 2D networks whose probability
fields are fused by a majority vote or a trainable consensus layer.
"""

from .volume import (
    AIR,
    BACKGROUND,
    BONE,
    CSF,
    GM,
    SKIN,
    WM,
    N_CLASSES,
    ConformRecord,
    LabelVolume,
    Volume,
    percentile,
)
from .nifti import orientation_codes, read_nifti, write_nifti
from .conform import (
    conform,
    conform_labels,
    conform_256,
    normalize_intensity,
    reorient_to_ras,
    resample_isotropic,
    restore_native,
)
from .unet import UNetConfig, build_unet, count_parameters, load_model, load_weights, save_weights
from .pipeline import (
    ConsensusWeights,
    ProbVolume,
    WeightBundle,
    consensus_merge,
    extract_slices,
    infer_axis,
    load_bundle,
    majority_vote,
    segment,
    soft_vote,
    write_manifest,
)
from .postprocess import apply_all
from .training import SliceSample, SplitPlan, augment, make_splits, slice_dataset, train_axis_model, train_consensus
from .evaluation import (
    DiceReport,
    build_report,
    cohort_stats,
    dice_per_class,
    emit_report,
    friedman,
    map_parcellation,
    parse_report,
    subject_score,
    wilcoxon_signed_rank,
)
from .phantom import make_phantom

__version__ = "0.1.0"

__all__ = [
    "AIR", "BACKGROUND", "BONE", "CSF", "GM", "SKIN", "WM", "N_CLASSES",
    "ConformRecord", "LabelVolume", "Volume", "percentile",
    "orientation_codes", "read_nifti", "write_nifti",
    "conform", "conform_labels", "conform_256", "normalize_intensity",
    "reorient_to_ras", "resample_isotropic", "restore_native",
    "UNetConfig", "build_unet", "count_parameters", "load_model",
    "load_weights", "save_weights",
    "ConsensusWeights", "ProbVolume", "WeightBundle", "consensus_merge",
    "extract_slices", "infer_axis", "load_bundle", "majority_vote",
    "segment", "soft_vote", "write_manifest",
    "apply_all",
    "SliceSample", "SplitPlan", "augment", "make_splits", "slice_dataset",
    "train_axis_model", "train_consensus",
    "DiceReport", "build_report", "cohort_stats", "dice_per_class",
    "emit_report", "friedman", "map_parcellation", "parse_report",
    "subject_score", "wilcoxon_signed_rank",
    "make_phantom",
    "__version__",
]
