"""Command-line surface: train, eval, infer, ablate, heatmap.

Exit codes: 0 success, 2 usage/config problem, 3 checkpoint/compatibility
problem, 4 runtime numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import (
    ENCODER_VARIANTS,
    POS_EMBED_VARIANTS,
    QUERY_STRATEGIES,
    ConfigKeyError,
    RunConfig,
)
from .evaluation import EvalConfig, evaluate_dataset
from .imaging import ImageError, read_image, write_ppm
from .inference import infer_directory, render_heatmap
from .model import Detector, build_model
from .train import DataError, NumericFailure, train, write_provenance

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_NUMERIC = 4

SDC_COUNT_GRID = ((2, 2, 4), (1, 1, 2), (3, 3, 6), (4, 4, 6))
POINTWISE_ROWS = (
    ("keep-both", {"depth.sdc_pointwise": True, "depth.rgfi_pointwise": True}),
    ("drop-sdc", {"depth.sdc_pointwise": False, "depth.rgfi_pointwise": True}),
    ("drop-rgfi", {"depth.sdc_pointwise": True, "depth.rgfi_pointwise": False}),
    ("drop-both", {"depth.sdc_pointwise": False, "depth.rgfi_pointwise": False}),
)


def ablation_rows(axis: str) -> list[tuple[str, dict]]:
    """Sweep definition per axis: (row label, config overrides)."""
    if axis == "query_strategy":
        return [(s, {"queries.strategy": s}) for s in QUERY_STRATEGIES]
    if axis == "encoder":
        return [(v, {"encoder.variant": v}) for v in ENCODER_VARIANTS]
    if axis == "sdc_counts":
        return [
            (",".join(str(c) for c in counts), {"depth.sdc_counts": counts, "depth.variant": "A"})
            for counts in SDC_COUNT_GRID
        ]
    if axis == "pointwise":
        return [(label, {**overrides, "depth.variant": "A"}) for label, overrides in POINTWISE_ROWS]
    if axis == "pos_embed":
        return [(v, {"depth.pos_embed": v}) for v in POS_EMBED_VARIANTS]
    raise KeyError(axis)


ABLATION_AXES = ("query_strategy", "encoder", "sdc_counts", "pointwise", "pos_embed")


def _fail(message: str, code: int) -> int:
    print(f"mdnx: {message}", file=sys.stderr)
    return code


def _load_config(path: str, seed: int | None):
    cfg_path = Path(path)
    if not cfg_path.is_file():
        raise ConfigKeyError(f"config file {path!r} does not exist")
    cfg = RunConfig.from_file(cfg_path)
    if seed is not None:
        cfg = cfg.updated({"seed": seed})
    return cfg


def _load_model(cfg: RunConfig, checkpoint_path: str) -> Detector:
    model = build_model(cfg)
    state = load_checkpoint(checkpoint_path)
    try:
        model.load_state_dict(state)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint does not match the configured model: {exc}") from exc
    return model


def _thresholds(args, cfg: RunConfig) -> list[float]:
    if args.iou_thresholds:
        return [float(tok) for tok in args.iou_thresholds.split(",") if tok]
    if cfg["eval.iou_thresholds"]:
        return list(cfg["eval.iou_thresholds"])
    raise ConfigKeyError(
        "IoU thresholds are required: pass --iou-thresholds or set eval.iou_thresholds"
    )


def cmd_train(args) -> int:
    try:
        cfg = _load_config(args.config, args.seed)
        outcome = train(cfg, args.out)
    except ConfigKeyError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except DataError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except NumericFailure as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    print(f"trained {outcome.steps} steps; checkpoint at {outcome.checkpoint_path}")
    return EXIT_OK


def _eval_into(cfg: RunConfig, model: Detector, data_dir: Path, out_dir: Path, thresholds) -> dict:
    pred_dir = out_dir / "predictions"
    infer_directory(model, cfg, data_dir / "image_2", data_dir / "calib", pred_dir)
    report = evaluate_dataset(
        pred_dir,
        data_dir / "label_2",
        data_dir / "calib",
        EvalConfig(iou_thresholds=thresholds, categories=list(cfg["model.classes"])),
    )
    report.write(out_dir)
    return report.results


def cmd_eval(args) -> int:
    try:
        cfg = _load_config(args.config, args.seed)
        thresholds = _thresholds(args, cfg)
    except ConfigKeyError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    data_dir = Path(args.data)
    if not (data_dir / "label_2").is_dir():
        return _fail(f"{data_dir} does not look like a dataset directory (no label_2/)", EXIT_CONFIG)
    try:
        model = _load_model(cfg, args.checkpoint)
    except (CheckpointError, FileNotFoundError) as exc:
        return _fail(str(exc), EXIT_CHECKPOINT)
    out = Path(args.out)
    write_provenance(cfg, out)
    _eval_into(cfg, model, data_dir, out, thresholds)
    print(f"evaluation written to {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    try:
        cfg = _load_config(args.config, args.seed)
    except ConfigKeyError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    image_dir = Path(args.images)
    if not image_dir.is_dir():
        return _fail(f"image directory {image_dir} does not exist", EXIT_CONFIG)
    try:
        model = _load_model(cfg, args.checkpoint)
    except (CheckpointError, FileNotFoundError) as exc:
        return _fail(str(exc), EXIT_CHECKPOINT)
    out = Path(args.out)
    write_provenance(cfg, out)
    try:
        outcome = infer_directory(model, cfg, image_dir, args.calib, out, strict=args.strict)
    except (ImageError, ValueError) as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    print(f"wrote {len(outcome.written)} prediction files to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        cfg = _load_config(args.config, args.seed)
        rows = ablation_rows(args.axis)
        thresholds = _thresholds(args, cfg)
    except KeyError:
        return _fail(f"unknown ablation axis {args.axis!r}; valid: {', '.join(ABLATION_AXES)}", EXIT_CONFIG)
    except ConfigKeyError as exc:
        return _fail(str(exc), EXIT_CONFIG)

    out = Path(args.out)
    write_provenance(cfg, out)
    thr_key = f"{thresholds[0]:.2f}"
    category = cfg["model.classes"][0]
    table_rows = []
    try:
        for label, overrides in rows:
            row_dir = out / "rows" / label.replace(",", "_").replace("+", "_")
            row_cfg = cfg.updated(overrides)
            outcome = train(row_cfg, row_dir)
            model = _load_model(row_cfg, outcome.checkpoint_path)
            results = _eval_into(row_cfg, model, outcome.dataset_dir, row_dir / "eval", thresholds)
            tiers = results[category][thr_key]
            table_rows.append(
                (label, tiers["easy"]["ap_3d"], tiers["moderate"]["ap_3d"], tiers["hard"]["ap_3d"])
            )
    except NumericFailure as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    except ConfigKeyError as exc:
        return _fail(str(exc), EXIT_CONFIG)

    lines = [f"axis: {args.axis}\tcategory: {category}\tiou: {thr_key}"]
    lines.append("variant\teasy\tmoderate\thard")
    for label, easy, mod, hard in table_rows:
        lines.append(f"{label}\t{easy:.6f}\t{mod:.6f}\t{hard:.6f}")
    table = "\n".join(lines) + "\n"
    (out / "ablation.txt").write_text(table)
    (out / "ablation.json").write_text(
        json.dumps(
            {
                "axis": args.axis,
                "iou_threshold": thresholds[0],
                "category": category,
                "rows": [
                    {"variant": label, "easy": e, "moderate": m, "hard": h}
                    for label, e, m, h in table_rows
                ],
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    print(table, end="")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    try:
        cfg = _load_config(args.config, args.seed)
    except ConfigKeyError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    try:
        model = _load_model(cfg, args.checkpoint)
    except (CheckpointError, FileNotFoundError) as exc:
        return _fail(str(exc), EXIT_CHECKPOINT)
    try:
        image = read_image(args.image)
        raster = render_heatmap(model, cfg, image)
    except (ImageError, ValueError) as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    write_ppm(args.out, raster)
    print(f"heatmap written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdnx", description="desk-scale monocular 3D detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a KITTI-format directory")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou-thresholds", default=None, help="comma-separated, e.g. 0.5,0.7")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="write KITTI-format predictions for a directory of images")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("ablate", help="train/evaluate one ablation axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou-thresholds", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("heatmap", help="render decoder attention over an image")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
