"""Command-line checkpoint export.

    exitwise-bridge --checkpoint openai/clip-vit-base-patch32 --out runs/clip
    exitwise-bridge --checkpoint ... --out runs/clip \
        --images imgs.npz --subset-size 100

The checkpoint argument is a Hugging Face model id or a local directory.
``--images`` points to an .npz with ``pixel_values`` [S, 3, H, W],
``labels`` [S], and ``text_embeddings`` [T, K, e] (per-template class
embeddings, pre-normalization).
"""

import argparse
import os
import sys

import numpy as np

from .export import (ExportError, build_text_bank, export_dataset,
                     export_model)


def build_parser():
    p = argparse.ArgumentParser(
        prog="exitwise-bridge",
        description="Export CLIP vision checkpoints into engine archives.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--images", help="npz with pixel_values/labels/text_embeddings")
    p.add_argument("--subset-size", type=int, default=None)
    p.add_argument("--logit-scale", type=float, default=100.0)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        import torch
        from transformers import CLIPVisionModelWithProjection

        model = CLIPVisionModelWithProjection.from_pretrained(args.checkpoint)
        model.eval()
        os.makedirs(args.out, exist_ok=True)
        manifest = export_model(
            model, os.path.join(args.out, "model.tarc"),
            model_name=args.checkpoint, logit_scale=args.logit_scale)

        if args.images:
            data = np.load(args.images)
            pixels = torch.from_numpy(data["pixel_values"]).float()
            labels = data["labels"]
            if args.subset_size:
                pixels = pixels[:args.subset_size]
                labels = labels[:args.subset_size]
            bank = build_text_bank(data["text_embeddings"])
            shape = export_dataset(
                model, pixels, labels, bank,
                os.path.join(args.out, "dataset.tarc"),
                logit_scale=args.logit_scale)
            manifest.subset_size = int(shape[0])
        manifest.save(os.path.join(args.out, "export_manifest.json"))
        return 0
    except (ExportError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
