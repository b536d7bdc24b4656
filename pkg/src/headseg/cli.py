"""Command-line entry point wiring the library into user workflows.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
All log lines go to standard error with timestamps; results go to files.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import evaluation, nifti, pipeline, postprocess, training, unet
from .conform import conform, conform_labels
from .errors import HeadsegError
from .volume import LabelVolume

log = logging.getLogger("headseg")

ENV_MANIFEST = "HEADSEG_WEIGHTS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser():
    p = _Parser(prog="headseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("conform", parents=[], help="preprocess a volume to canonical space")
    c.add_argument("-i", "--input", required=True)
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--record", help="where to write the conform record (JSON)")

    s = sub.add_parser("segment", help="full tri-axis segmentation")
    s.add_argument("-i", "--input", required=True)
    s.add_argument("-w", "--weights", default=os.environ.get(ENV_MANIFEST),
                   help=f"weight manifest path (default ${ENV_MANIFEST})")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--merge", choices=["vote", "consensus"], default="consensus")
    s.add_argument("--no-postprocess", action="store_true")
    s.add_argument("--min-component", type=int, default=27)
    s.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    s.add_argument("--deterministic", action="store_true", help="pin to one thread")

    pp = sub.add_parser("postprocess", help="anatomical rules on an existing label file")
    pp.add_argument("-i", "--input", required=True)
    pp.add_argument("-o", "--output", required=True)
    pp.add_argument("--min-component", type=int, default=27)

    t = sub.add_parser("train", help="train one per-axis model")
    t.add_argument("--manifest", required=True,
                   help="text file: image<TAB>label<TAB>subject per line")
    t.add_argument("--axis", choices=list(pipeline.AXES), required=True)
    t.add_argument("--epochs", type=int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--history", help="CSV of (epoch, loss, val_dice)")
    t.add_argument("--depth", type=int, default=6)
    t.add_argument("--base-filters", type=int, default=16)
    t.add_argument("--filter-cap", type=int, default=64)
    t.add_argument("--no-coords", action="store_true")
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-5)
    t.add_argument("--augment", action="store_true")
    t.add_argument("--val-subjects", type=int, default=0,
                   help="hold out the last N subjects for validation")
    t.add_argument("--patience", type=int)
    t.add_argument("--seed", type=int, default=0)

    tc = sub.add_parser("train-consensus", help="train the merge layer on cached probabilities")
    tc.add_argument("--manifest", required=True)
    tc.add_argument("--axial", required=True)
    tc.add_argument("--coronal", required=True)
    tc.add_argument("--sagittal", required=True)
    tc.add_argument("--out", required=True)
    tc.add_argument("--epochs", type=int, default=3000)
    tc.add_argument("--lr", type=float, default=1e-5)
    tc.add_argument("--stride", type=int, default=2,
                    help="voxel subsampling stride for the cached fields")
    tc.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("evaluate", help="Dice report of predictions against truth")
    e.add_argument("--pred", action="append", required=True)
    e.add_argument("--truth", action="append", required=True)
    e.add_argument("--subject", action="append", help="subject id per pair")
    e.add_argument("--classes", help="comma-separated class codes (default: all present)")
    e.add_argument("--out", required=True)
    e.add_argument("--format", choices=["csv", "text"], default="csv")

    m = sub.add_parser("map-labels", help="remap a parcellation onto WM/GM by overlap")
    m.add_argument("--parcels", required=True)
    m.add_argument("--truth", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--mapping-out", help="text file of parcel -> tissue decisions")

    sp = sub.add_parser("split", help="emit a train/validation/test split plan")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--sizes", required=True, help="train,val,test")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--fold", type=int, default=0)
    sp.add_argument("--out", required=True)

    i = sub.add_parser("info", help="inspect a NIfTI header or weight container")
    i.add_argument("path")

    return p


def _read_train_manifest(path):
    triples = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise HeadsegError(
                    f"manifest line not 'image<TAB>label<TAB>subject': {line!r}"
                )
            triples.append(tuple(parts))
    if not triples:
        raise HeadsegError(f"empty training manifest {path}")
    return triples


def _load_conformed_pairs(triples):
    pairs = []
    for img_path, lab_path, subject in triples:
        vol = nifti.read_nifti(img_path)
        raw_lab = nifti.read_nifti(lab_path)
        lab = LabelVolume(raw_lab.data, raw_lab.spacing, raw_lab.affine)
        cvol, _ = conform(vol)
        clab = conform_labels(lab)
        pairs.append((cvol, clab, subject))
    return pairs


def cmd_conform(args):
    vol = nifti.read_nifti(args.input)
    out, record = conform(vol)
    nifti.write_nifti(out, args.output, datatype_code=16)
    if args.record:
        doc = {
            "original_dims": list(record.original_dims),
            "original_affine": record.original_affine.tolist(),
            "resample_skipped": record.resample_skipped,
            "resampled_dims": list(record.resampled_dims),
            "resample_factor": list(record.resample_factor),
            "permutation": list(record.permutation),
            "flips": list(record.flips),
            "offsets": list(record.offsets),
            "p95": record.p95,
        }
        with open(args.record, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
    log.info("conformed %s -> %s (p95=%g)", args.input, args.output, record.p95)
    return 0


def cmd_segment(args):
    if not args.weights:
        raise UsageError(f"no weight manifest given (flag -w or ${ENV_MANIFEST})")
    threads = 1 if args.deterministic else max(1, args.threads)
    bundle = pipeline.load_bundle(args.weights)
    vol = nifti.read_nifti(args.input)
    labels, provenance = pipeline.segment(
        vol,
        bundle,
        merge=args.merge,
        postprocess=not args.no_postprocess,
        min_component=args.min_component,
        threads=threads,
    )
    nifti.write_nifti(labels, args.output, datatype_code=2)
    sidecar = args.output + ".provenance.txt"
    with open(sidecar, "w") as fh:
        for key in sorted(provenance):
            fh.write(f"{key}: {provenance[key]}\n")
    log.info("segmented %s -> %s (+ %s)", args.input, args.output, sidecar)
    return 0


def cmd_postprocess(args):
    raw = nifti.read_nifti(args.input)
    labels = LabelVolume(raw.data, raw.spacing, raw.affine)
    cleaned, report = postprocess.apply_all(labels, min_voxels=args.min_component)
    nifti.write_nifti(cleaned, args.output, datatype_code=2)
    for name, count in report.counts.items():
        log.info("rule %s changed %d voxels", name, count)
    log.info("postprocessed in %d pass(es)", report.passes)
    return 0


def cmd_train(args):
    config = unet.UNetConfig(
        depth=args.depth,
        base_filters=args.base_filters,
        filter_cap=args.filter_cap,
        coord_channels=0 if args.no_coords else 3,
        seed=args.seed,
    )
    triples = _read_train_manifest(args.manifest)
    val_triples = []
    if args.val_subjects:
        subjects = sorted({t[2] for t in triples})
        held = set(subjects[-args.val_subjects :])
        val_triples = [t for t in triples if t[2] in held]
        triples = [t for t in triples if t[2] not in held]
    pairs = _load_conformed_pairs(triples)
    samples = training.slice_dataset(pairs, args.axis)
    val_samples = None
    if val_triples:
        val_samples = training.slice_dataset(_load_conformed_pairs(val_triples), args.axis)
    log.info("training %s model on %d slices", args.axis, len(samples))
    model, history = training.train_axis_model(
        config,
        samples,
        epochs=args.epochs,
        seed=args.seed,
        batch_size=args.batch_size,
        lr=args.lr,
        augment_prob=0.5 if args.augment else 0.0,
        val_samples=val_samples,
        patience=args.patience,
    )
    unet.save_weights(model, args.out, role=args.axis)
    if args.history:
        with open(args.history, "w") as fh:
            fh.write("epoch,loss,val_dice\n")
            for epoch, loss, val in history.rows():
                fh.write(f"{epoch},{loss:.6g},{val:.6g}\n")
    log.info("wrote %s", args.out)
    return 0


def cmd_train_consensus(args):
    triples = _read_train_manifest(args.manifest)
    pairs = _load_conformed_pairs(triples)
    models = {
        "axial": unet.load_model(args.axial),
        "coronal": unet.load_model(args.coronal),
        "sagittal": unet.load_model(args.sagittal),
    }
    stride = max(1, args.stride)
    stacked, truths = [], []
    for cvol, clab, subject in pairs:
        fields = [
            pipeline.infer_axis(models[name], cvol, name).data
            for name in pipeline.CHANNEL_ORDER
        ]
        sub = (slice(None),) + (slice(None, None, stride),) * 3
        stacked.append(np.concatenate([f[sub] for f in fields], axis=0))
        truths.append(clab.data[sub[1:]])
        log.info("cached probability fields for subject %s", subject)
    fields = np.concatenate([s.reshape(s.shape[0], -1) for s in stacked], axis=1)
    truth = np.concatenate([t.reshape(-1) for t in truths])
    weights, _ = training.train_consensus(
        fields, truth, epochs=args.epochs, seed=args.seed, lr=args.lr
    )
    pipeline.save_consensus(args.out, weights)
    log.info("wrote %s", args.out)
    return 0


def cmd_evaluate(args):
    preds, truths = args.pred, args.truth
    if len(preds) != len(truths):
        raise UsageError("need as many --pred as --truth")
    subjects = args.subject or [f"s{i}" for i in range(len(preds))]
    if len(subjects) != len(preds):
        raise UsageError("need as many --subject as --pred")
    classes = None
    if args.classes:
        classes = [int(c) for c in args.classes.split(",")]
    per_subject = {}
    for subject, ppath, tpath in zip(subjects, preds, truths):
        pred = nifti.read_nifti(ppath)
        truth = nifti.read_nifti(tpath)
        scores = evaluation.dice_per_class(
            pred.data.astype(np.int64), truth.data.astype(np.int64), classes
        )
        per_subject[subject] = scores
    used = classes if classes is not None else sorted(
        {c for v in per_subject.values() for c in v}
    )
    report = evaluation.build_report(per_subject, used)
    evaluation.emit_report(report, args.out, fmt=args.format)
    log.info("wrote %s", args.out)
    return 0


def cmd_map_labels(args):
    parcels = nifti.read_nifti(args.parcels)
    truth = nifti.read_nifti(args.truth)
    mapping, remapped = evaluation.map_parcellation(
        parcels.data.astype(np.int64), truth.data.astype(np.int64)
    )
    out = LabelVolume(remapped, parcels.spacing, parcels.affine)
    nifti.write_nifti(out, args.out, datatype_code=2)
    if args.mapping_out:
        with open(args.mapping_out, "w") as fh:
            for code in sorted(mapping):
                m = mapping[code]
                fh.write(
                    f"{code}\t{m['tissue']}\twm={m['wm_overlap']}\tgm={m['gm_overlap']}\n"
                )
    log.info("wrote %s", args.out)
    return 0


def cmd_split(args):
    sizes = tuple(int(x) for x in args.sizes.split(","))
    if len(sizes) != 3:
        raise UsageError("--sizes must be train,val,test")
    plan = training.make_splits(args.n, sizes, args.seed, fold=args.fold)
    with open(args.out, "w") as fh:
        json.dump(
            {
                "train": plan.train,
                "validation": plan.validation,
                "test": plan.test,
                "seed": plan.seed,
                "fold": plan.fold,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
    log.info("wrote %s", args.out)
    return 0


def cmd_info(args):
    path = args.path
    if path.endswith((".nii", ".nii.gz", ".hdr", ".hdr.gz")):
        hdr = nifti.read_header(path)
        print(f"dims: {hdr.dim[1:1 + hdr.dim[0]]}")
        print(f"datatype: {hdr.datatype}")
        print(f"pixdim: {hdr.pixdim[1:4]}")
        print(f"scl_slope/inter: {hdr.scl_slope}/{hdr.scl_inter}")
        print(f"qform/sform codes: {hdr.qform_code}/{hdr.sform_code}")
        print(f"magic: {hdr.magic!r}  byteorder: {hdr.byteorder}")
        return 0
    meta, tensors = unet.load_container(path)
    print(f"kind: {meta.get('kind')}")
    if meta.get("kind") == "unet":
        config = unet.UNetConfig(**meta["config"])
        print(f"config: {meta['config']}")
        print(f"parameters: {unet.count_parameters(config)}")
    for entry in meta["tensors"]:
        print(f"  {entry['name']}  shape={tuple(entry['shape'])}  offset={entry['offset']}")
    return 0


COMMANDS = {
    "conform": cmd_conform,
    "segment": cmd_segment,
    "postprocess": cmd_postprocess,
    "train": cmd_train,
    "train-consensus": cmd_train_consensus,
    "evaluate": cmd_evaluate,
    "map-labels": cmd_map_labels,
    "split": cmd_split,
    "info": cmd_info,
}


def main(argv=None):
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except HeadsegError as exc:
        log.error("%s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit 3
        log.exception("internal error: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
