"""Detection metrics: average precision at 40 recall positions.

Matching is greedy in descending score order (devkit convention); each
ground-truth box is consumed at most once and a match requires IoU at or
above the threshold. Ground truth outside the evaluated difficulty tier is
"don't care": predictions landing on it are dropped from the curve instead
of counting as false positives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import imaging
from .geometry import Box3D, bev_iou, iou_3d
from .kitti_io import DIFFICULTY_NAMES, Annotation, parse_kitti_calib, parse_kitti_label

N_RECALL_POSITIONS = 40
RECALL_GRID = np.arange(1, N_RECALL_POSITIONS + 1) / N_RECALL_POSITIONS


@dataclass
class APResult:
    ap: float
    n_gt: int
    curve: list[tuple[float, float]]  # (recall, precision) after each counted prediction
    interpolated: np.ndarray  # precision at the 40 recall positions
    warning: Optional[str] = None


def average_precision_40(
    predictions: Mapping[str, Sequence[Box3D]],
    ground_truth: Mapping[str, Sequence[tuple[Box3D, int]]],
    iou_threshold: float,
    difficulty: int,
    iou_fn: Callable[[Box3D, Box3D], float] = iou_3d,
) -> APResult:
    """AP|R40 over a set of images.

    ground_truth values are (box, difficulty_tier) pairs; tier -1 marks boxes
    never evaluated. Predictions must carry scores.
    """
    gt_boxes: dict[str, list[Box3D]] = {}
    gt_countable: dict[str, np.ndarray] = {}
    gt_matched: dict[str, np.ndarray] = {}
    n_gt = 0
    for image_id, entries in ground_truth.items():
        boxes = [b for b, _ in entries]
        countable = np.array([0 <= tier <= difficulty for _, tier in entries], dtype=bool)
        gt_boxes[image_id] = boxes
        gt_countable[image_id] = countable
        gt_matched[image_id] = np.zeros(len(boxes), dtype=bool)
        n_gt += int(countable.sum())

    flat = []
    for image_id, preds in predictions.items():
        for k, box in enumerate(preds):
            if box.score is None:
                raise ValueError(f"prediction without score in image {image_id!r}")
            flat.append((-box.score, image_id, k, box))
    flat.sort(key=lambda item: (item[0], item[1], item[2]))

    warning = None
    if n_gt == 0:
        if flat:
            warning = "no countable ground truth at this difficulty; AP forced to 0"
        return APResult(ap=0.0, n_gt=0, curve=[], interpolated=np.zeros(N_RECALL_POSITIONS), warning=warning)

    tp = fp = 0
    curve: list[tuple[float, float]] = []
    for _, image_id, _, pred in flat:
        boxes = gt_boxes.get(image_id, [])
        matched = gt_matched.get(image_id)
        countable = gt_countable.get(image_id)
        best_iou, best_j = 0.0, -1
        dontcare_hit = False
        for j, gt in enumerate(boxes):
            if gt.category != pred.category:
                continue
            iou = iou_fn(pred, gt)
            if iou < iou_threshold:
                continue
            if countable[j] and not matched[j]:
                if iou > best_iou:
                    best_iou, best_j = iou, j
            elif not countable[j]:
                dontcare_hit = True
        if best_j >= 0:
            matched[best_j] = True
            tp += 1
        elif dontcare_hit:
            continue  # neither counts nor penalizes
        else:
            fp += 1
        curve.append((tp / n_gt, tp / (tp + fp)))

    interpolated = np.zeros(N_RECALL_POSITIONS)
    recalls = np.array([r for r, _ in curve])
    precisions = np.array([p for _, p in curve])
    for i, r in enumerate(RECALL_GRID):
        mask = recalls >= r - 1e-12
        interpolated[i] = precisions[mask].max() if mask.any() else 0.0
    return APResult(ap=float(interpolated.mean()), n_gt=n_gt, curve=curve, interpolated=interpolated, warning=warning)


@dataclass
class EvalConfig:
    iou_thresholds: Sequence[float]
    categories: Sequence[str] = ("Car",)
    skip_missing: bool = False


@dataclass
class DatasetReport:
    results: dict  # category -> threshold-str -> tier name -> {"ap_3d", "ap_bev", "n_gt"}
    curves: dict  # (category, threshold-str, tier name, metric) -> np.ndarray
    missing: list[str]
    warnings: list[str]
    n_images: int

    def to_json(self) -> str:
        payload = {
            "schema_version": 1,
            "n_images": self.n_images,
            "missing_predictions": sorted(self.missing),
            "warnings": sorted(self.warnings),
            "results": self.results,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        lines = ["category\tiou\tmetric\teasy\tmoderate\thard"]
        for cat in sorted(self.results):
            for thr in sorted(self.results[cat]):
                for metric in ("ap_3d", "ap_bev"):
                    vals = [self.results[cat][thr][DIFFICULTY_NAMES[t]][metric] for t in (0, 1, 2)]
                    lines.append(cat + "\t" + thr + "\t" + metric + "\t" + "\t".join(f"{v:.6f}" for v in vals))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(self.to_json())
        (out / "metrics.txt").write_text(self.to_table())
        for (cat, thr, tier, metric), interp in sorted(self.curves.items()):
            img = render_pr_curve(interp)
            imaging.write_ppm(out / f"pr_{cat}_{thr}_{tier}_{metric}.ppm", img)


def _annotation_entries(ann: Annotation, category: str) -> list[tuple[Box3D, int]]:
    return [(o.box3d, o.difficulty()) for o in ann.objects if o.category == category]


def _prediction_boxes(ann: Annotation, category: str) -> list[Box3D]:
    return [o.box3d for o in ann.objects if o.category == category]


def evaluate_parsed(
    predictions: Mapping[str, Annotation],
    ground_truth: Mapping[str, Annotation],
    config: EvalConfig,
) -> DatasetReport:
    results: dict = {}
    curves: dict = {}
    warnings: list[str] = []
    for cat in config.categories:
        pred_cat = {img: _prediction_boxes(a, cat) for img, a in predictions.items()}
        gt_cat = {img: _annotation_entries(a, cat) for img, a in ground_truth.items()}
        results[cat] = {}
        for thr in config.iou_thresholds:
            thr_key = f"{thr:.2f}"
            results[cat][thr_key] = {}
            for tier, tier_name in DIFFICULTY_NAMES.items():
                cell = {}
                for metric, fn in (("ap_3d", iou_3d), ("ap_bev", bev_iou)):
                    res = average_precision_40(pred_cat, gt_cat, thr, tier, iou_fn=fn)
                    cell[metric] = res.ap
                    cell["n_gt"] = res.n_gt
                    curves[(cat, thr_key, tier_name, metric)] = res.interpolated
                    if res.warning:
                        warnings.append(f"{cat}/{thr_key}/{tier_name}/{metric}: {res.warning}")
                results[cat][thr_key][tier_name] = cell
    return DatasetReport(
        results=results,
        curves=curves,
        missing=[],
        warnings=warnings,
        n_images=len(ground_truth),
    )


def evaluate_dataset(pred_dir, gt_dir, calib_dir, config: EvalConfig) -> DatasetReport:
    """Score a directory of KITTI-format predictions against ground truth."""
    pred_dir, gt_dir, calib_dir = Path(pred_dir), Path(gt_dir), Path(calib_dir)
    stems = sorted(p.stem for p in gt_dir.glob("*.txt"))
    predictions: dict[str, Annotation] = {}
    ground_truth: dict[str, Annotation] = {}
    missing: list[str] = []
    for stem in stems:
        gt = parse_kitti_label((gt_dir / f"{stem}.txt").read_text())
        calib_path = calib_dir / f"{stem}.txt"
        if calib_path.exists():
            parse_kitti_calib(calib_path.read_text())  # validates the file
        pred_path = pred_dir / f"{stem}.txt"
        if not pred_path.exists():
            missing.append(stem)
            if config.skip_missing:
                continue
            predictions[stem] = Annotation()
            ground_truth[stem] = gt
            continue
        predictions[stem] = parse_kitti_label(pred_path.read_text())
        ground_truth[stem] = gt
    report = evaluate_parsed(predictions, ground_truth, config)
    report.missing = missing
    return report


def render_pr_curve(interpolated: np.ndarray, size: int = 200) -> np.ndarray:
    """Plot the 40-point interpolated precision curve on a small raster."""
    img = np.ones((3, size, size))
    margin = 10
    span = size - 2 * margin
    axis_color = (0.6, 0.6, 0.6)
    imaging.draw_polyline(img, [(margin, size - margin), (size - margin, size - margin)], axis_color)
    imaging.draw_polyline(img, [(margin, margin), (margin, size - margin)], axis_color)
    points = []
    for r, p in zip(RECALL_GRID, interpolated):
        x = int(round(margin + r * span))
        y = int(round(size - margin - p * span))
        points.append((x, y))
    imaging.draw_polyline(img, points, (0.8, 0.1, 0.1))
    return img
