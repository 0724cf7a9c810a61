"""Batch inference over KITTI-format directories and attention heatmaps."""

from __future__ import annotations

import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import RunConfig
from .detect import decode_to_boxes
from .geometry import Box2D, Box3D, CameraCalib, wrap_angle
from .imaging import ImageError, apply_colormap, blend, blue_red_colormap, read_image, write_ppm
from .kitti_io import Annotation, ObjectLabel, parse_kitti_calib, serialize_annotation
from .model import Detector

IMAGE_SUFFIXES = (".ppm", ".png", ".jpg", ".jpeg")


def worker_count() -> int:
    """Bounded worker pool size from the MDNX_THREADS environment variable."""
    raw = os.environ.get("MDNX_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class InferenceOutcome:
    written: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


def predict_annotation(model: Detector, cfg: RunConfig, image: np.ndarray, calib: CameraCalib) -> Annotation:
    """Eval-mode forward of one image decoded to a scored KITTI annotation."""
    result = model(Tensor(image[None]))
    pairs = decode_to_boxes(result.prediction, calib, list(cfg["model.classes"]))
    objects = []
    for box3d, box2d in pairs:
        x, _, z = box3d.location
        objects.append(
            ObjectLabel(
                category=box3d.category,
                truncation=0.0,
                occlusion=0,
                alpha=wrap_angle(box3d.yaw - math.atan2(x, z)),
                box2d=box2d,
                box3d=box3d,
                score=box3d.score,
            )
        )
    return Annotation(objects)


def infer_directory(
    model: Detector,
    cfg: RunConfig,
    image_dir,
    calib_dir,
    out_dir,
    strict: bool = False,
) -> InferenceOutcome:
    """One 16-field prediction file per readable image, score-sorted."""
    image_dir, calib_dir, out_dir = Path(image_dir), Path(calib_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    outcome = InferenceOutcome()
    paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)

    def process(path: Path):
        stem = path.stem
        calib_path = calib_dir / f"{stem}.txt"
        try:
            if not calib_path.exists():
                raise ImageError(f"no calibration for {stem}")
            image = read_image(path)
            calib = parse_kitti_calib(calib_path.read_text())
            ann = predict_annotation(model, cfg, image, calib)
        except (ImageError, ValueError) as exc:
            if strict:
                raise
            return (stem, None, str(exc))
        return (stem, serialize_annotation(ann), None)

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(process, paths))
    else:
        results = [process(p) for p in paths]

    for stem, text, err in results:  # deterministic: paths were sorted
        if text is None:
            outcome.skipped.append(stem)
            print(f"skipped {stem}: {err}", file=sys.stderr)
            continue
        (out_dir / f"{stem}.txt").write_text(text)
        outcome.written.append(stem)
    return outcome


def render_heatmap(model: Detector, cfg: RunConfig, image: np.ndarray, top_queries: int = 5) -> np.ndarray:
    """Final-layer visual cross-attention of the best-scoring queries blended
    over the input image; returns a float [3, H, W] raster."""
    model.eval()
    result = model(Tensor(image[None]))
    attn = result.visual_attention.data[0]  # [heads, Q, T]
    per_query = attn.mean(axis=0)  # [Q, T]
    probs = 1.0 / (1.0 + np.exp(-result.prediction.class_logits.data[0]))
    scores = probs.max(axis=-1) * np.exp(-np.exp(result.prediction.depth_log_sigma.data[0]))
    top = np.argsort(-scores, kind="stable")[: min(top_queries, scores.shape[0])]
    heat_tokens = per_query[top].max(axis=0)  # [T]

    _, _, gh, gw = result.f_v.shape
    heat = heat_tokens.reshape(gh, gw)
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    _, h_img, w_img = image.shape
    heat_full = np.repeat(np.repeat(heat, h_img // gh, axis=0), w_img // gw, axis=1)
    overlay = apply_colormap(heat_full, blue_red_colormap())
    return blend(image, overlay, 0.5)


def attention_rows_normalized(model: Detector, image: np.ndarray, atol: float = 1e-6) -> bool:
    """Check that per-query attention rows sum to one before rendering."""
    model.eval()
    result = model(Tensor(image[None]))
    sums = result.visual_attention.data.sum(axis=-1)
    return bool(np.allclose(sums, 1.0, atol=atol))
