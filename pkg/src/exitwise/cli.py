"""Command-line entry point.

    exitwise --command gen-synthetic --config cfg.json --out runs/demo
    exitwise --command profile      --config cfg.json --out runs/demo
    exitwise --command train-heads  --config cfg.json --out runs/demo
    exitwise --command train-gate   --config cfg.json --out runs/demo
    exitwise --command sweep        --config cfg.json --out runs/demo
    exitwise --command evaluate     --config cfg.json --out runs/demo
    exitwise --command analyze      --config cfg.json --out runs/demo
    exitwise --command factorial    --config cfg.json --out runs/demo
    exitwise --command embed        --config cfg.json --out runs/demo
    exitwise --command validate-archive --archive file.tarc
"""

import argparse
import json
import os
import sys

from . import pipeline
from .archive import validate_archive
from .errors import ArchiveError, ConfigError, InputError

COMMANDS = {
    "gen-synthetic": pipeline.gen_synthetic,
    "profile": pipeline.cmd_profile,
    "train-heads": pipeline.cmd_train_heads,
    "train-gate": pipeline.cmd_train_gate,
    "sweep": pipeline.cmd_sweep,
    "evaluate": pipeline.cmd_evaluate,
    "analyze": pipeline.cmd_analyze,
    "factorial": pipeline.run_factorial,
    "embed": pipeline.cmd_embed,
}


def build_parser():
    p = argparse.ArgumentParser(
        prog="exitwise",
        description="Early-exit inference engine for INT8-quantized ViT encoders.",
    )
    p.add_argument("--command", required=True,
                   choices=sorted(list(COMMANDS) + ["validate-archive"]))
    p.add_argument("--config", help="path to the run-config JSON")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default=".", help="output directory for artifacts")
    p.add_argument("--archive", help="archive path (validate-archive only)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate-archive":
            if not args.archive:
                print("validate-archive requires --archive", file=sys.stderr)
                return 2
            entries = validate_archive(args.archive)
            for name, dtype, shape in entries:
                print(f"{name}\t{dtype}\t{list(shape)}")
            return 0
        if not args.config:
            print("missing --config", file=sys.stderr)
            return 2
        cfg = pipeline.RunConfig.from_json(args.config, seed_override=args.seed)
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](cfg, args.out)
        return 0
    except (ConfigError, InputError, ArchiveError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
