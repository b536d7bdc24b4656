"""Command-line front end: suggest a mapping, convert, and inspect."""

import argparse
import json
import sys

from headseg.unet import UNetConfig, layer_manifest

from .convert import convert_checkpoint, read_checkpoint_tensors
from .mapping import MappingError, parse_mapping, suggest_mapping, write_mapping


def build_parser():
    p = argparse.ArgumentParser(prog="weight-import", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("suggest", help="propose a mapping file for a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--config", required=True, help="JSON of UNetConfig fields")
    s.add_argument("--out", required=True)

    c = sub.add_parser("convert", help="convert a checkpoint to MAXW")
    c.add_argument("checkpoint")
    c.add_argument("--config", required=True, help="JSON of UNetConfig fields")
    c.add_argument("--mapping", help="mapping file (auto-suggested when omitted)")
    c.add_argument("--role", default="axial")
    c.add_argument("--out", required=True)

    ls = sub.add_parser("list", help="list float tensors in a checkpoint")
    ls.add_argument("checkpoint")
    return p


def _config(arg):
    return UNetConfig(**json.loads(arg))


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list":
            for name, arr in read_checkpoint_tensors(args.checkpoint).items():
                print(f"{name}\t{arr.shape}")
            return 0
        config = _config(args.config)
        if args.command == "suggest":
            tensors = read_checkpoint_tensors(args.checkpoint)
            entries = suggest_mapping(tensors, layer_manifest(config))
            write_mapping(args.out, entries)
            print(f"wrote {args.out} with {len(entries)} entries", file=sys.stderr)
            return 0
        mapping = parse_mapping(args.mapping) if args.mapping else None
        summary = convert_checkpoint(
            args.checkpoint, config, args.out, mapping=mapping, role=args.role
        )
        print(summary, file=sys.stderr)
        return 0
    except MappingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
