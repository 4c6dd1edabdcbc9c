"""Command-line interface for the feature exporter."""

from __future__ import annotations

import argparse
import sys


def _add_synth(sub):
    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--pad", type=int, default=2)
    p.add_argument("--train", type=int, default=20,
                   help="train samples per category")
    p.add_argument("--nominal-test", type=int, default=10)
    p.add_argument("--anomalous-test", type=int, default=10)
    p.add_argument("--categories", default="camA,camB")
    p.add_argument("--layers", default="8,12")


def _add_export(sub):
    p = sub.add_parser("export", help="run a frozen ViT over a dataset")
    p.add_argument("--dataset-root", required=True,
                   help="dataset in MVTec-style layout")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--backbone", default="dinov2_vitb14",
                   choices=["dinov2_vitb14", "vit_b16"])
    p.add_argument("--weights", default=None,
                   help="local checkpoint (state dict); tries torch.hub if omitted")
    p.add_argument("--random-weights", action="store_true",
                   help="deterministic random init, for format/geometry checks")
    p.add_argument("--target-side", type=int, default=1036)
    p.add_argument("--layers", default="8,12")
    p.add_argument("--categories", default=None,
                   help="comma-separated subset; default all")
    p.add_argument("--device", default="cpu")
    p.add_argument("--seed", type=int, default=0)


def _add_selftest(sub):
    p = sub.add_parser("selftest", help="validate the writer against the golden file")
    p.add_argument("--golden", default=None,
                   help="golden PEFG file; defaults to the checked-in one")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vitfeatures")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_synth(sub)
    _add_export(sub)
    _add_selftest(sub)
    args = parser.parse_args(argv)

    if args.command == "synth":
        from .synthetic import SynthConfig, generate
        config = SynthConfig(
            out_dir=args.out_dir, seed=args.seed, grid=args.grid, dim=args.dim,
            patch_size=args.patch_size, pad=args.pad,
            categories=tuple(args.categories.split(",")),
            train_per_category=args.train,
            nominal_test_per_category=args.nominal_test,
            anomalous_test_per_category=args.anomalous_test,
            layer_pair=tuple(int(x) for x in args.layers.split(",")),
        )
        manifest = generate(config)
        print(f"wrote {manifest}")
        return 0

    if args.command == "export":
        from .export import ExportConfig, export_dataset
        config = ExportConfig(
            dataset_root=args.dataset_root, out_dir=args.out_dir,
            backbone=args.backbone, weights=args.weights,
            random_weights=args.random_weights, target_side=args.target_side,
            layers=tuple(int(x) for x in args.layers.split(",")),
            categories=tuple(args.categories.split(",")) if args.categories else None,
            device=args.device, seed=args.seed,
        )
        manifest = export_dataset(config)
        print(f"wrote {manifest}")
        return 0

    if args.command == "selftest":
        from .selftest import run_selftest
        ok = run_selftest(args.golden)
        print("format self-test:", "OK" if ok else "FAILED")
        return 0 if ok else 1

    return 2


if __name__ == "__main__":
    sys.exit(main())
