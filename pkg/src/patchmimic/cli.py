"""Command-line entry point: train, infer, evaluate, report, ablate.

Flag precedence is flags > --config file > built-in defaults; every command
prints its fully materialized configuration before doing any work, so a run
is reproducible from its banner. Exit codes: 0 success, 2 usage error,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor


from .anomaly_map import (
    AnomalyMap,
    InferConfig,
    infer_from_grids,
    load_anomaly_map,
    save_anomaly_map,
    to_ground_truth_resolution,
)
from .errors import DataError, NumericError, PatchmimicError
from .feature_store import load_manifest, read_feature_grid, sample_fewshot
from .metrics import evaluate
from .report import (
    format_report_table,
    render_figures,
    read_scores_csv,
    write_curves_csv,
    write_report_csv,
    write_scores_csv,
)
from .student import TrainConfig, load_model, save_model, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

PAPER_DEFAULTS = {
    "layers": "8,12",
    "epochs": 50,
    "lr": 0.001,
    "train_distance": "cosine",
    "loss_reduction": "mean",
    "hidden": None,
    "seed": 0,
    "infer_distance": "l2",
    "fusion": "product",
    "sigma": 4.0,
    "top_fraction": 0.001,
    "smooth_before_crop": False,
    "limits": "0.3,0.05",
    "num_levels": 500,
    "dump_curves": False,
    "shots": None,
    "shots_seed": 0,
    "workers": None,
}


def _default_workers() -> int:
    env = os.environ.get("PATCHMIMIC_WORKERS", "")
    if env.strip():
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def _merge_config(args: argparse.Namespace, keys) -> dict:
    """flags > config file > paper defaults; returns the effective dict."""
    file_cfg = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read config file {config_path}: {e}") from e
        unknown = set(file_cfg) - set(PAPER_DEFAULTS)
        if unknown:
            raise DataError(f"unknown config file keys: {sorted(unknown)}")
    effective = {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            effective[key] = flag
        elif key in file_cfg:
            effective[key] = file_cfg[key]
        else:
            effective[key] = PAPER_DEFAULTS[key]
    if "workers" in effective and effective["workers"] is None:
        effective["workers"] = _default_workers()
    return effective


def _banner(command: str, effective: dict, paths: dict) -> None:
    materialized = dict(paths)
    materialized.update(effective)
    print(f"[patchmimic {command}] config: "
          f"{json.dumps(materialized, sort_keys=True, default=str)}")


def _parse_pair(text) -> tuple[int, int]:
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 2:
        raise DataError(f"expected 'j,k', got '{text}'")
    return int(parts[0]), int(parts[1])


def _parse_limits(text) -> tuple[float, ...]:
    limits = tuple(float(x) for x in str(text).split(",") if x.strip())
    if not limits:
        raise DataError("empty --limits")
    return limits


def _safe_filename(sample_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", sample_id)


# --- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _merge_config(args, ["layers", "epochs", "lr", "train_distance",
                               "loss_reduction", "hidden", "seed", "shots",
                               "shots_seed"])
    _banner("train", cfg, {"manifest": args.manifest, "model_out": args.model_out})
    manifest = load_manifest(args.manifest)
    if cfg["shots"]:
        manifest = sample_fewshot(manifest, int(cfg["shots"]), int(cfg["shots_seed"]))
        print(f"few-shot subset: {len(manifest.train_samples())} train samples kept")
    train_cfg = TrainConfig(
        layer_pair=_parse_pair(cfg["layers"]),
        epochs=int(cfg["epochs"]),
        learning_rate=float(cfg["lr"]),
        loss_distance=cfg["train_distance"],
        seed=int(cfg["seed"]),
        hidden_units=int(cfg["hidden"]) if cfg["hidden"] else None,
        loss_reduction=cfg["loss_reduction"],
    )
    train_cfg.validate()

    def progress(epoch, loss_f, loss_b):
        print(f"epoch {epoch + 1}/{train_cfg.epochs}  "
              f"loss_forward={loss_f:.6f}  loss_backward={loss_b:.6f}")

    s_f, s_b, log = train(manifest, train_cfg, progress=progress)
    os.makedirs(os.path.dirname(os.path.abspath(args.model_out)), exist_ok=True)
    save_model(args.model_out, s_f, s_b, train_cfg)
    with open(args.model_out + ".log.json", "w", encoding="utf-8") as f:
        json.dump({"epoch_loss_forward": log.epoch_loss_forward,
                   "epoch_loss_backward": log.epoch_loss_backward}, f, indent=1)
    print(f"saved model to {args.model_out}")
    return EXIT_OK


# --- infer -------------------------------------------------------------------


def _infer_one(sample, s_f, s_b, layer_pair, infer_cfg):
    """Load grids, compute the map, and return (AnomalyMap, compute seconds)."""
    j, k = layer_pair
    try:
        f_j = read_feature_grid(sample.feature_paths[j])
        f_k = read_feature_grid(sample.feature_paths[k])
        if f_j.layer_index != j or f_k.layer_index != k:
            raise DataError(
                f"feature files are for layers ({f_j.layer_index}, "
                f"{f_k.layer_index}), expected ({j}, {k})"
            )
        t0 = time.perf_counter()
        amap = infer_from_grids(sample.sample_id, f_j, f_k, s_f, s_b, infer_cfg)
        elapsed = time.perf_counter() - t0
        return to_ground_truth_resolution(amap, sample.image_dims), elapsed
    except PatchmimicError as e:
        raise type(e)(f"sample '{sample.sample_id}': {e}") from None


def _check_layers_available(samples, layer_pair):
    j, k = layer_pair
    for s in samples:
        have = sorted(s.feature_paths)
        if j not in s.feature_paths or k not in s.feature_paths:
            raise DataError(
                f"layer-pair mismatch: model expects layers ({j}, {k}) but "
                f"sample '{s.sample_id}' provides {have}"
            )


def cmd_infer(args) -> int:
    cfg = _merge_config(args, ["infer_distance", "fusion", "sigma",
                               "top_fraction", "smooth_before_crop", "workers"])
    _banner("infer", cfg, {"manifest": args.manifest, "model": args.model,
                           "out_dir": args.out_dir})
    manifest = load_manifest(args.manifest)
    s_f, s_b, train_cfg = load_model(args.model)
    layer_pair = train_cfg.layer_pair
    test = manifest.test_samples()
    if not test:
        raise DataError("manifest has no test samples")
    _check_layers_available(test, layer_pair)
    infer_cfg = InferConfig(
        infer_distance=cfg["infer_distance"],
        fusion=cfg["fusion"],
        smoothing_sigma=float(cfg["sigma"]),
        top_fraction=float(cfg["top_fraction"]),
        smooth_before_crop=bool(cfg["smooth_before_crop"]),
    )
    infer_cfg.validate()

    os.makedirs(args.out_dir, exist_ok=True)
    maps_dir = os.path.join(args.out_dir, "maps")
    os.makedirs(maps_dir, exist_ok=True)
    names = {}
    for s in test:
        name = _safe_filename(s.sample_id) + ".pefg"
        if name in names:
            raise DataError(f"map filename collision: '{s.sample_id}' vs "
                            f"'{names[name]}'")
        names[name] = s.sample_id

    _infer_one(test[0], s_f, s_b, layer_pair, infer_cfg)  # warm-up, untimed

    workers = max(1, int(cfg["workers"]))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda s: _infer_one(s, s_f, s_b, layer_pair, infer_cfg), test))
    else:
        results = [_infer_one(s, s_f, s_b, layer_pair, infer_cfg) for s in test]

    rows = []
    total = 0.0
    for sample, (amap, elapsed) in zip(test, results):
        total += elapsed
        rel = os.path.join("maps", _safe_filename(sample.sample_id) + ".pefg")
        save_anomaly_map(amap, os.path.join(args.out_dir, rel))
        rows.append((sample.sample_id, amap.global_score, sample.label, rel))
    write_scores_csv(rows, os.path.join(args.out_dir, "scores.csv"))
    print(f"wrote {len(rows)} maps to {maps_dir}")
    print(f"mean map-computation time: {1000.0 * total / len(test):.3f} ms/sample "
          f"(features in memory, post warm-up)")
    return EXIT_OK


# --- evaluate ------------------------------------------------------------------


def _load_maps(manifest, maps_dir):
    scores_path = os.path.join(maps_dir, "scores.csv")
    maps = {}
    if os.path.isfile(scores_path):
        for row in read_scores_csv(scores_path):
            path = os.path.join(maps_dir, row["map_path"])
            if not os.path.isfile(path):
                raise DataError(f"scores.csv names missing map file {path}")
            amap = load_anomaly_map(path, row["sample_id"])
            maps[row["sample_id"]] = AnomalyMap(
                sample_id=row["sample_id"], map=amap.map,
                global_score=float(row["global_score"]))
    else:
        for s in manifest.test_samples():
            path = os.path.join(maps_dir, "maps",
                                _safe_filename(s.sample_id) + ".pefg")
            if os.path.isfile(path):
                maps[s.sample_id] = load_anomaly_map(path, s.sample_id)
    return maps


def cmd_evaluate(args) -> int:
    cfg = _merge_config(args, ["limits", "num_levels", "dump_curves", "workers"])
    _banner("evaluate", cfg, {"manifest": args.manifest, "maps_dir": args.maps_dir,
                              "out_dir": args.out_dir})
    manifest = load_manifest(args.manifest)
    maps = _load_maps(manifest, args.maps_dir)
    limits = _parse_limits(cfg["limits"])
    report = evaluate(manifest, maps, limits=limits,
                      num_levels=int(cfg["num_levels"]),
                      workers=max(1, int(cfg["workers"])))
    os.makedirs(args.out_dir, exist_ok=True)
    report_path = os.path.join(args.out_dir, "report.csv")
    write_report_csv(report, report_path)
    print(f"wrote {report_path}")
    if cfg["dump_curves"]:
        curves_path = os.path.join(args.out_dir, "curves.csv")
        write_curves_csv(report, curves_path)
        print(f"wrote {curves_path}")
    table = format_report_table(report)
    with open(os.path.join(args.out_dir, "report.txt"), "w", encoding="utf-8") as f:
        f.write(table + "\n")
    print(table)
    return EXIT_OK


# --- report --------------------------------------------------------------------


def cmd_report(args) -> int:
    out_dir = args.out_dir or args.eval_dir
    _banner("report", {}, {"eval_dir": args.eval_dir, "out_dir": out_dir})
    report_csv = os.path.join(args.eval_dir, "report.csv")
    if not os.path.isfile(report_csv):
        raise DataError(f"no report.csv in {args.eval_dir}; run evaluate first")
    curves_csv = os.path.join(args.eval_dir, "curves.csv")
    written = render_figures(report_csv, out_dir,
                             curves_csv if os.path.isfile(curves_csv) else None)
    for path in written:
        print(f"wrote {path}")
    if not os.path.isfile(curves_csv):
        print("note: no curves.csv found (run evaluate --dump-curves for PRO"
              " curve figures)")
    return EXIT_OK


# --- ablate --------------------------------------------------------------------


def cmd_ablate(args) -> int:
    cfg = _merge_config(args, ["epochs", "lr", "seed", "limits", "num_levels",
                               "sigma", "top_fraction", "workers"])
    pairs = [p for p in (args.layer_pairs or "").split(";") if p.strip()]
    train_distances = [d for d in args.train_distances.split(",") if d.strip()]
    infer_distances = [d for d in args.infer_distances.split(",") if d.strip()]
    fusions = [f for f in args.fusions.split(",") if f.strip()]
    if not pairs or not train_distances or not infer_distances or not fusions:
        print("error: empty ablation grid", file=sys.stderr)
        return EXIT_USAGE
    _banner("ablate", cfg, {
        "manifest": args.manifest, "out_dir": args.out_dir,
        "layer_pairs": pairs, "train_distances": train_distances,
        "infer_distances": infer_distances, "fusions": fusions,
    })
    manifest = load_manifest(args.manifest)
    limits = _parse_limits(cfg["limits"])
    os.makedirs(os.path.join(args.out_dir, "models"), exist_ok=True)

    import csv as _csv
    rows = []
    for pair_text in pairs:
        layer_pair = _parse_pair(pair_text)
        missing = [s.sample_id for s in manifest.samples
                   if layer_pair[0] not in s.feature_paths
                   or layer_pair[1] not in s.feature_paths]
        if missing:
            raise DataError(
                f"missing layer features for pair {layer_pair} on samples "
                f"{missing[:5]}{'...' if len(missing) > 5 else ''}"
            )
        for train_distance in train_distances:
            train_cfg = TrainConfig(
                layer_pair=layer_pair, epochs=int(cfg["epochs"]),
                learning_rate=float(cfg["lr"]), loss_distance=train_distance,
                seed=int(cfg["seed"]))
            train_cfg.validate()
            print(f"training layers={layer_pair} train_distance={train_distance}")
            s_f, s_b, _ = train(manifest, train_cfg)
            model_path = os.path.join(
                args.out_dir, "models",
                f"model_{layer_pair[0]}_{layer_pair[1]}_{train_distance}.pmdl")
            save_model(model_path, s_f, s_b, train_cfg)
            for infer_distance in infer_distances:
                for fusion in fusions:
                    infer_cfg = InferConfig(
                        infer_distance=infer_distance, fusion=fusion,
                        smoothing_sigma=float(cfg["sigma"]),
                        top_fraction=float(cfg["top_fraction"]))
                    infer_cfg.validate()
                    test = manifest.test_samples()
                    maps = {}
                    for s in test:
                        amap, _ = _infer_one(s, s_f, s_b, layer_pair, infer_cfg)
                        maps[s.sample_id] = amap
                    rep = evaluate(manifest, maps, limits=limits,
                                   num_levels=int(cfg["num_levels"]),
                                   workers=max(1, int(cfg["workers"])))
                    row = {
                        "layers": f"[{layer_pair[0]}, {layer_pair[1]}]",
                        "train_distance": train_distance,
                        "infer_distance": infer_distance,
                        "fusion": fusion,
                        "i_auroc": f"{rep.mean_i_auroc:.6f}",
                    }
                    for limit in limits:
                        row[f"aupro@{limit * 100:g}%"] = f"{rep.mean_aupro[limit]:.6f}"
                    rows.append(row)
                    print("  " + "  ".join(f"{k}={v}" for k, v in row.items()))

    out_csv = os.path.join(args.out_dir, "ablation.csv")
    with open(out_csv, "w", newline="", encoding="utf-8") as f:
        writer = _csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {out_csv}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchmimic",
        description="Anomaly detection from frozen-transformer patch embeddings: "
                    "train bidirectional students, compute anomaly maps, and run "
                    "the size-aware evaluation protocol.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the student pair on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument("--layers", help="j,k layer pair (default 8,12)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--train-distance", choices=["cosine", "l2"])
    p.add_argument("--loss-reduction", choices=["mean", "sum"])
    p.add_argument("--hidden", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--shots", type=int, help="few-shot: train samples per category")
    p.add_argument("--shots-seed", type=int)
    p.add_argument("--config", help="JSON config file (flags still win)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="compute anomaly maps for test samples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--infer-distance", choices=["l2", "cosine"])
    p.add_argument("--fusion", choices=["product", "sum", "delta_j_only",
                                        "delta_k_only"])
    p.add_argument("--sigma", type=float)
    p.add_argument("--top-fraction", type=float)
    p.add_argument("--smooth-before-crop", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--workers", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="metrics report from maps and ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--maps-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--limits", help="integration limits, e.g. 0.3,0.05")
    p.add_argument("--num-levels", type=int)
    p.add_argument("--dump-curves", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--workers", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render figures from an evaluation directory")
    p.add_argument("--eval-dir", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="sweep layer pairs, distances, fusions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--layer-pairs", required=True,
                   help="semicolon-separated pairs, e.g. '8,12;10,12'")
    p.add_argument("--train-distances", default="cosine")
    p.add_argument("--infer-distances", default="l2")
    p.add_argument("--fusions", default="product,delta_j_only,delta_k_only")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--limits")
    p.add_argument("--num-levels", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--top-fraction", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
