"""KITTI label and calibration text formats.

Label lines carry 15 whitespace-separated fields for ground truth and 16 for
predictions (trailing score):

    type truncated occluded alpha x_min y_min x_max y_max h w l x y z ry [score]

Difficulty tiers are derived from 2D box height, occlusion and truncation
with the devkit thresholds (40/25/25 px, 0/1/2, 0.15/0.30/0.50).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Box2D, Box3D, CameraCalib

KNOWN_CATEGORIES = (
    "Car",
    "Van",
    "Truck",
    "Pedestrian",
    "Person_sitting",
    "Cyclist",
    "Tram",
    "Misc",
    "DontCare",
)

# (min 2D height px, max occlusion level, max truncation) per tier
DIFFICULTY_THRESHOLDS = ((40.0, 0, 0.15), (25.0, 1, 0.30), (25.0, 2, 0.50))

EASY, MODERATE, HARD = 0, 1, 2
DIFFICULTY_NAMES = {EASY: "easy", MODERATE: "moderate", HARD: "hard"}
NOT_EVALUATED = -1


class LabelParseError(ValueError):
    pass


class CalibParseError(ValueError):
    pass


@dataclass
class ObjectLabel:
    category: str
    truncation: float
    occlusion: int
    alpha: float
    box2d: Box2D
    box3d: Box3D
    score: Optional[float] = None
    known_category: bool = True

    def difficulty(self) -> int:
        """Easiest tier this object satisfies, or NOT_EVALUATED."""
        height = self.box2d.height
        for tier, (min_h, max_occ, max_trunc) in enumerate(DIFFICULTY_THRESHOLDS):
            if height >= min_h and self.occlusion <= max_occ and self.truncation <= max_trunc:
                return tier
        return NOT_EVALUATED


@dataclass
class Annotation:
    objects: list[ObjectLabel] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.objects)

    def __iter__(self):
        return iter(self.objects)

    def by_category(self, category: str) -> list[ObjectLabel]:
        return [o for o in self.objects if o.category == category]


def _parse_float(token: str, line_no: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise LabelParseError(f"line {line_no}: non-numeric field {token!r}") from None


def parse_kitti_label(text: str) -> Annotation:
    objects = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) not in (15, 16):
            raise LabelParseError(f"line {line_no}: expected 15 or 16 fields, got {len(fields)}")
        category = fields[0]
        vals = [_parse_float(tok, line_no) for tok in fields[1:]]
        trunc, occ, alpha = vals[0], int(vals[1]), vals[2]
        x_min, y_min, x_max, y_max = vals[3:7]
        h, w, l = vals[7:10]
        x, y, z = vals[10:13]
        ry = vals[13]
        score = vals[14] if len(fields) == 16 else None
        box2d = Box2D(x_min, y_min, x_max, y_max)
        box3d = Box3D(location=(x, y, z), dimensions=(h, w, l), yaw=ry, category=category, score=score)
        objects.append(
            ObjectLabel(
                category=category,
                truncation=trunc,
                occlusion=occ,
                alpha=alpha,
                box2d=box2d,
                box3d=box3d,
                score=score,
                known_category=category in KNOWN_CATEGORIES,
            )
        )
    return Annotation(objects)


def format_label_line(obj: ObjectLabel) -> str:
    parts = [
        obj.category,
        f"{obj.truncation:.2f}",
        str(obj.occlusion),
        f"{obj.alpha:.6f}",
        f"{obj.box2d.x_min:.6f}",
        f"{obj.box2d.y_min:.6f}",
        f"{obj.box2d.x_max:.6f}",
        f"{obj.box2d.y_max:.6f}",
        f"{obj.box3d.dimensions[0]:.6f}",
        f"{obj.box3d.dimensions[1]:.6f}",
        f"{obj.box3d.dimensions[2]:.6f}",
        f"{obj.box3d.location[0]:.6f}",
        f"{obj.box3d.location[1]:.6f}",
        f"{obj.box3d.location[2]:.6f}",
        f"{obj.box3d.yaw:.6f}",
    ]
    if obj.score is not None:
        parts.append(f"{obj.score:.6f}")
    return " ".join(parts)


def serialize_annotation(ann: Annotation) -> str:
    return "".join(format_label_line(o) + "\n" for o in ann.objects)


def parse_kitti_calib(text: str) -> CameraCalib:
    """Extract the 3x4 P2 matrix; image size from an optional image_size line."""
    p2 = None
    image_size = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        key, _, rest = line.partition(":")
        tokens = rest.split()
        if key == "P2":
            if len(tokens) != 12:
                raise CalibParseError(f"line {line_no}: P2 needs 12 values, got {len(tokens)}")
            vals = []
            for tok in tokens:
                try:
                    vals.append(float(tok))
                except ValueError:
                    raise CalibParseError(f"line {line_no}: bad float {tok!r} in P2") from None
            p2 = np.array(vals).reshape(3, 4)
        elif key == "image_size":
            if len(tokens) != 2:
                raise CalibParseError(f"line {line_no}: image_size needs 2 values")
            image_size = (int(float(tokens[0])), int(float(tokens[1])))
    if p2 is None:
        raise CalibParseError("no P2 line found in calibration text")
    if image_size is None:
        # KITTI devkit files do not carry the extent; fall back to the standard one
        image_size = (1242, 375)
    return CameraCalib(P=p2, image_size=image_size)


def serialize_calib(calib: CameraCalib) -> str:
    flat = " ".join(f"{v:.12g}" for v in calib.P.reshape(-1))
    return f"P2: {flat}\nimage_size: {calib.image_size[0]} {calib.image_size[1]}\n"
