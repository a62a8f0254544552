"""Command-line interface for the training/fitting/evaluation pipeline."""

from __future__ import annotations

import argparse
import sys

from . import config as config_mod
from . import pipeline, synth


def _add_common(p, manifest=True, models=True, out=False):
    p.add_argument("--config", help="INI config file overriding defaults")
    if manifest:
        p.add_argument("--manifest", required=True,
                       help="corpus manifest JSON")
    if models:
        p.add_argument("--models-dir", required=True,
                       help="directory of model files")
    if out:
        p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--threads", type=int, help="override [run] threads")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="occlufit",
        description="Occlusion-robust deep appearance models: train, fit, "
                    "reconstruct and evaluate on landmarked corpora.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-clean", type=int, default=100)
    p.add_argument("--train-occluded", type=int, default=50)
    p.add_argument("--test", type=int, default=50)
    p.add_argument("--occlusion-area", type=float, default=0.25)
    p.add_argument("--pose-fraction", type=float, default=0.0)

    for name, help_text in (
            ("train-shape", "train the shape model"),
            ("train-texture", "train the robust texture model"),
            ("train-joint", "train the joint layer")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("extract-masks", help="write training masks")
    _add_common(p, out=True)
    p.add_argument("--threshold", type=float,
                   help="override both intensity thresholds")

    p = sub.add_parser("fit", help="fit test images from perturbed starts")
    _add_common(p, out=True)
    p.add_argument("--mask-mode",
                   choices=("binary", "probability", "all-ones"))
    p.add_argument("--gibbs-sweeps", type=int)
    p.add_argument("--init-perturbation", type=float, default=5.0)

    p = sub.add_parser("reconstruct", help="reconstruct test images")
    _add_common(p, out=True)
    p.add_argument("--mask-mode",
                   choices=("binary", "probability", "all-ones"))
    p.add_argument("--gibbs-sweeps", type=int)
    p.add_argument("--baseline", action="store_true",
                   help="force the all-ones mask")

    p = sub.add_parser("evaluate", help="reconstruction metrics + summary")
    _add_common(p, out=True)
    p.add_argument("--gibbs-sweeps", type=int)
    return ap


def _resolve_config(args):
    cfg = config_mod.load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg["run"]["seed"] = str(args.seed)
    if getattr(args, "threads", None) is not None:
        cfg["run"]["threads"] = str(args.threads)
    if getattr(args, "mask_mode", None):
        cfg["fit"]["mask_mode"] = args.mask_mode
    if getattr(args, "gibbs_sweeps", None) is not None:
        cfg["fit"]["gibbs_sweeps"] = str(args.gibbs_sweeps)
    if getattr(args, "threshold", None) is not None:
        cfg["masks"]["sunglasses_threshold"] = str(args.threshold)
        cfg["masks"]["scarf_threshold"] = str(args.threshold)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            sc = synth.SynthConfig(
                n_train_clean=args.train_clean,
                n_train_occluded=args.train_occluded,
                n_test=args.test,
                occlusion_area=args.occlusion_area,
                pose_fraction=args.pose_fraction,
                seed=args.seed)
            manifest = synth.generate_synthetic_corpus(sc, args.out)
            print(f"wrote {len(manifest['entries'])} entries to {args.out}")
            return 0
        cfg = _resolve_config(args)
        corpus = pipeline.load_manifest(args.manifest)
        if args.command == "train-shape":
            pipeline.train_shape_stage(corpus, args.models_dir, cfg)
            print(f"shape model written to {args.models_dir}")
        elif args.command == "train-texture":
            pipeline.train_texture_stage(corpus, args.models_dir, cfg)
            print(f"texture model written to {args.models_dir}")
        elif args.command == "train-joint":
            pipeline.train_joint_stage(corpus, args.models_dir, cfg)
            print(f"joint layer written to {args.models_dir}")
        elif args.command == "extract-masks":
            written = pipeline.extract_masks_stage(corpus, args.models_dir,
                                                   args.out, cfg)
            print(f"wrote {len(written)} masks to {args.out}")
        elif args.command == "fit":
            rows = pipeline.fit_stage(corpus, args.models_dir, args.out, cfg,
                                      init_perturbation=args.init_perturbation)
            import numpy as np
            final = np.mean([r["final_error"] for r in rows]) if rows else 0.0
            print(f"fit {len(rows)} images, mean landmark error {final:.5f}")
        elif args.command == "reconstruct":
            rows = pipeline.reconstruct_stage(corpus, args.models_dir,
                                              args.out, cfg,
                                              baseline=args.baseline)
            print(f"reconstructed {len(rows)} images into {args.out}")
        elif args.command == "evaluate":
            summary = pipeline.evaluate_stage(corpus, args.models_dir,
                                              args.out, cfg)
            for k, v in sorted(summary.items()):
                print(f"{k}: {v}")
        return 0
    except (pipeline.PipelineError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
