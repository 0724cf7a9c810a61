"""Synthetic road scenes: verifiable stand-in data for training and metrics.

Boxes sit on a ground plane below a fixed camera and render as flat-shaded
cuboids whose brightness falls off with depth, so metric depth is visually
recoverable. Geometry, labels and pixels are all pure functions of the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .geometry import Box3D, CameraCalib, box3d_corners, project_box2d, project_point, wrap_angle
from .imaging import to_uint8
from .kitti_io import Annotation, ObjectLabel, serialize_annotation, serialize_calib
from .geometry import Box2D

CAMERA_HEIGHT = 1.65  # meters above the ground plane
GROUND_Y = CAMERA_HEIGHT

# (h, w, l) sampling ranges per category
DIMENSION_RANGES = {
    "Car": ((1.35, 1.75), (1.55, 1.95), (3.4, 4.6)),
    "Pedestrian": ((1.55, 1.9), (0.45, 0.7), (0.45, 0.7)),
    "Cyclist": ((1.5, 1.85), (0.45, 0.7), (1.5, 1.95)),
}
DEFAULT_DIM_RANGE = ((1.0, 2.0), (0.8, 1.6), (1.5, 3.5))

BASE_COLORS = {
    "Car": np.array([0.85, 0.45, 0.30]),
    "Pedestrian": np.array([0.35, 0.75, 0.40]),
    "Cyclist": np.array([0.35, 0.45, 0.9]),
}
DEFAULT_COLOR = np.array([0.7, 0.7, 0.7])

# cuboid faces as corner indices (bottom ring 0-3, top ring 4-7)
FACES = (
    (0, 1, 2, 3),
    (4, 5, 6, 7),
    (0, 1, 5, 4),
    (1, 2, 6, 5),
    (2, 3, 7, 6),
    (3, 0, 4, 7),
)
LIGHT_DIR = np.array([0.45, -0.8, 0.35]) / np.linalg.norm([0.45, -0.8, 0.35])


@dataclass
class SyntheticScene:
    image: np.ndarray  # float [3, H, W] in [0, 1], already uint8-quantized
    annotation: Annotation
    calib: CameraCalib
    seed: int


def default_calib(image_size: tuple[int, int]) -> CameraCalib:
    w, h = image_size
    f = 1.0 * w
    P = np.array([[f, 0.0, w / 2.0, 0.0], [0.0, f, h / 2.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    return CameraCalib(P=P, image_size=(w, h))


def _sample_box(rng: np.random.Generator, cfg: RunConfig, calib: CameraCalib) -> Box3D | None:
    w_img, _ = calib.image_size
    f = calib.P[0, 0]
    cx = calib.P[0, 2]
    d_lo, d_hi = cfg["data.depth_range"]
    category = str(rng.choice(list(cfg["data.categories"])))
    (h_r, w_r, l_r) = DIMENSION_RANGES.get(category, DEFAULT_DIM_RANGE)
    dims = (rng.uniform(*h_r), rng.uniform(*w_r), rng.uniform(*l_r))
    z = rng.uniform(d_lo, d_hi)
    # keep the projected center comfortably inside the horizontal extent
    x_span = 0.85 * (w_img / 2.0) * z / f
    x = rng.uniform(-x_span, x_span)
    yaw = rng.uniform(-math.pi, math.pi)
    return Box3D(location=(x, GROUND_Y, z), dimensions=dims, yaw=yaw, category=category)


def _visible_fraction(box2d, calib: CameraCalib) -> float:
    w, h = calib.image_size
    ix0, iy0 = max(box2d.x_min, 0.0), max(box2d.y_min, 0.0)
    ix1, iy1 = min(box2d.x_max, float(w)), min(box2d.y_max, float(h))
    if ix0 >= ix1 or iy0 >= iy1:
        return 0.0
    return ((ix1 - ix0) * (iy1 - iy0)) / (box2d.width * box2d.height)


def _overlap_fraction(own: Box2D, nearer: list[Box2D]) -> float:
    """Fraction of own 2D area covered by any nearer box (upper bound sum)."""
    area = own.width * own.height
    covered = 0.0
    for other in nearer:
        ix0 = max(own.x_min, other.x_min)
        iy0 = max(own.y_min, other.y_min)
        ix1 = min(own.x_max, other.x_max)
        iy1 = min(own.y_max, other.y_max)
        if ix0 < ix1 and iy0 < iy1:
            covered += (ix1 - ix0) * (iy1 - iy0)
    return min(covered / area, 1.0)


def synth_scene(seed: int, cfg: RunConfig) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    calib = default_calib(tuple(cfg["data.image_size"]))
    n_boxes = int(rng.integers(1, cfg["data.max_objects"] + 1))

    boxes: list[Box3D] = []
    boxes2d: list = []
    for _ in range(n_boxes):
        for _attempt in range(100):
            box = _sample_box(rng, cfg, calib)
            box2d = project_box2d(box, calib)
            if _visible_fraction(box2d, calib) <= 0.05:
                continue
            footprint_clear = all(
                abs(box.location[0] - other.location[0]) + abs(box.location[2] - other.location[2])
                > 0.6 * (box.dimensions[2] + other.dimensions[2])
                for other in boxes
            )
            if footprint_clear:
                boxes.append(box)
                boxes2d.append(box2d)
                break
        # after 100 rejected samples the box is dropped

    image = _render(boxes, calib, cfg)

    objects = []
    order = np.argsort([-b.location[2] for b in boxes])  # far to near
    for rank, idx in enumerate(order):
        box, box2d = boxes[idx], boxes2d[idx]
        nearer = [boxes2d[j] for j in order[rank + 1 :]]
        truncation = round(1.0 - _visible_fraction(box2d, calib), 2)
        occ_frac = _overlap_fraction(box2d, nearer)
        occlusion = 0 if occ_frac < 0.2 else (1 if occ_frac < 0.5 else 2)
        alpha = wrap_angle(box.yaw - math.atan2(box.location[0], box.location[2]))
        objects.append(
            ObjectLabel(
                category=box.category,
                truncation=truncation,
                occlusion=occlusion,
                alpha=alpha,
                box2d=box2d,
                box3d=box,
            )
        )
    # KITTI files list objects in no particular order; keep far-to-near
    return SyntheticScene(image=image, annotation=Annotation(objects), calib=calib, seed=seed)


def _render(boxes: list[Box3D], calib: CameraCalib, cfg: RunConfig) -> np.ndarray:
    w, h = calib.image_size
    d_lo, d_hi = cfg["data.depth_range"]
    img = _background(w, h)
    for box in sorted(boxes, key=lambda b: -b.location[2]):  # painter's order
        corners3d = box3d_corners(box)
        pts = np.array([project_point(c, calib) for c in corners3d])
        shade = 1.0 - 0.8 * (box.location[2] - d_lo) / max(d_hi - d_lo, 1e-9)
        shade = float(np.clip(shade, 0.15, 1.0))
        base = BASE_COLORS.get(box.category, DEFAULT_COLOR)
        faces = sorted(FACES, key=lambda f: -corners3d[list(f), 2].mean())
        for face in faces:
            quad = pts[list(face)]
            normal = np.cross(
                corners3d[face[1]] - corners3d[face[0]], corners3d[face[3]] - corners3d[face[0]]
            )
            norm = np.linalg.norm(normal)
            lambert = abs(float(normal @ LIGHT_DIR)) / norm if norm > 0 else 0.0
            color = base * shade * (0.55 + 0.45 * lambert)
            _fill_quad(img, quad, color)
    return to_uint8(img).astype(np.float64) / 255.0


def _background(w: int, h: int) -> np.ndarray:
    rows = np.linspace(0.32, 0.12, h).reshape(1, h, 1)
    img = np.broadcast_to(rows, (3, h, w)).copy()
    img[2] += 0.06  # slightly blue sky-to-ground ramp
    return img


def _fill_quad(img: np.ndarray, quad: np.ndarray, color: np.ndarray) -> None:
    """Rasterize a convex quad by half-plane tests on its pixel bounding box."""
    _, h, w = img.shape
    x0 = max(int(math.floor(quad[:, 0].min())), 0)
    x1 = min(int(math.ceil(quad[:, 0].max())) + 1, w)
    y0 = max(int(math.floor(quad[:, 1].min())), 0)
    y1 = min(int(math.ceil(quad[:, 1].max())) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    xs, ys = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
    area = 0.0
    for i in range(4):
        ax, ay = quad[i]
        bx, by = quad[(i + 1) % 4]
        area += ax * by - ay * bx
    orient = 1.0 if area >= 0 else -1.0
    inside = np.ones(xs.shape, dtype=bool)
    for i in range(4):
        ax, ay = quad[i]
        bx, by = quad[(i + 1) % 4]
        inside &= orient * ((bx - ax) * (ys - ay) - (by - ay) * (xs - ax)) >= 0.0
    region = img[:, y0:y1, x0:x1]
    region[:, inside] = color.reshape(3, 1)


def scene_seed(base_seed: int, index: int) -> int:
    """Stable per-scene seed derived from the run seed."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def write_scene(scene: SyntheticScene, data_dir, stem: str) -> None:
    from pathlib import Path

    from .imaging import write_ppm

    root = Path(data_dir)
    for sub in ("image_2", "label_2", "calib"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_ppm(root / "image_2" / f"{stem}.ppm", scene.image)
    (root / "label_2" / f"{stem}.txt").write_text(serialize_annotation(scene.annotation))
    (root / "calib" / f"{stem}.txt").write_text(serialize_calib(scene.calib))


def generate_dataset(cfg: RunConfig, data_dir) -> list[str]:
    """Materialize data.scenes synthetic scenes in KITTI layout; returns stems."""
    stems = []
    for i in range(cfg["data.scenes"]):
        scene = synth_scene(scene_seed(cfg["seed"], i), cfg)
        stem = f"{i:06d}"
        write_scene(scene, data_dir, stem)
        stems.append(stem)
    return stems
