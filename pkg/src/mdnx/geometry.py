"""3D/2D box geometry: corners, camera projection, rotated-box IoU.

Camera frame follows the KITTI convention: x right, y down, z forward;
Box3D.location is the center of the bottom face and yaw rotates around the
vertical (y) axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class ProjectionError(ValueError):
    pass


@dataclass
class CameraCalib:
    """Pinhole projection: 3x4 matrix in pixels plus the image extent."""

    P: np.ndarray
    image_size: tuple[int, int]  # (W, H)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64).reshape(3, 4)
        if self.P[0, 0] <= 0 or self.P[1, 1] <= 0:
            raise ValueError(f"non-positive focal lengths in projection matrix: {self.P[0,0]}, {self.P[1,1]}")


@dataclass
class Box2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    center3d_proj: Optional[tuple[float, float]] = None  # projected 3D center (x_c, y_c)

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate 2D box: {(self.x_min, self.y_min, self.x_max, self.y_max)}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min


@dataclass
class Box3D:
    """Oriented box: bottom-center location (m), dimensions h/w/l (m), yaw (rad)."""

    location: tuple[float, float, float]
    dimensions: tuple[float, float, float]  # (h, w, l)
    yaw: float
    category: str = "Car"
    score: Optional[float] = None

    def __post_init__(self):
        h, w, l = self.dimensions
        if min(h, w, l) <= 0:
            raise ValueError(f"non-positive box dimensions {self.dimensions}")

    @property
    def volume(self) -> float:
        h, w, l = self.dimensions
        return h * w * l

    def center(self) -> np.ndarray:
        """Geometric 3D center (half a height above the bottom face, y down)."""
        x, y, z = self.location
        return np.array([x, y - self.dimensions[0] / 2.0, z])


def project_point(point: Sequence[float], calib: CameraCalib) -> tuple[float, float]:
    """Homogeneous pinhole projection of one camera-frame point to pixels."""
    p = calib.P @ np.array([point[0], point[1], point[2], 1.0])
    if p[2] <= 0:
        raise ProjectionError(f"point {tuple(point)} projects behind the camera (w={p[2]:.4f})")
    return (p[0] / p[2], p[1] / p[2])


def project_center(box: Box3D, calib: CameraCalib) -> tuple[float, float]:
    """Pixel coordinates of the box's 3D geometric center."""
    if box.location[2] <= 0:
        raise ProjectionError(f"box at z={box.location[2]} is behind the camera")
    return project_point(box.center(), calib)


def box3d_corners(box: Box3D) -> np.ndarray:
    """8x3 corner array; the first four corners form the bottom face."""
    h, w, l = box.dimensions
    xs = np.array([l, l, -l, -l, l, l, -l, -l]) / 2.0
    ys = np.array([0.0, 0.0, 0.0, 0.0, -h, -h, -h, -h])
    zs = np.array([w, -w, -w, w, w, -w, -w, w]) / 2.0
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return (rot @ np.stack([xs, ys, zs])).T + np.asarray(box.location)


def bev_footprint(box: Box3D) -> np.ndarray:
    """Ground-plane rectangle as a 4x2 counter-clockwise polygon in (x, z)."""
    corners = box3d_corners(box)[:4, [0, 2]]
    # bottom corners are ordered clockwise when seen in (x, z); flip them
    return corners[::-1].copy()


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area; positive for counter-clockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    x, z = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(z, -1)) - np.dot(z, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon against a convex CCW window."""
    output = [tuple(p) for p in subject]
    n_clip = len(clip)
    for i in range(n_clip):
        if not output:
            break
        ax, az = clip[i]
        bx, bz = clip[(i + 1) % n_clip]
        ex, ez = bx - ax, bz - az
        points = output
        output = []
        prev = points[-1]
        prev_in = ex * (prev[1] - az) - ez * (prev[0] - ax) >= 0.0
        for cur in points:
            cur_in = ex * (cur[1] - az) - ez * (cur[0] - ax) >= 0.0
            if cur_in != prev_in:
                # edge crosses the clip line: solve for the intersection
                dx, dz = cur[0] - prev[0], cur[1] - prev[1]
                den = ex * dz - ez * dx
                if den != 0.0:
                    t = (ez * (prev[0] - ax) - ex * (prev[1] - az)) / den
                    output.append((prev[0] + t * dx, prev[1] + t * dz))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.empty((0, 2))


def _bev_intersection_area(a: Box3D, b: Box3D) -> float:
    inter = clip_polygon(bev_footprint(a), bev_footprint(b))
    return abs(polygon_area(inter))


def _box_sort_key(box: Box3D) -> tuple:
    return (*box.location, *box.dimensions, box.yaw)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two yaw-rotated ground-plane rectangles.

    The pair is ordered canonically before clipping so the result is exactly
    symmetric in its arguments.
    """
    if _box_sort_key(a) == _box_sort_key(b):
        return 1.0
    if _box_sort_key(b) < _box_sort_key(a):
        a, b = b, a
    ha, wa, la = a.dimensions
    hb, wb, lb = b.dimensions
    inter = _bev_intersection_area(a, b)
    union = wa * la + wb * lb - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU: BEV intersection area times the vertical overlap."""
    if _box_sort_key(a) == _box_sort_key(b):
        return 1.0
    if _box_sort_key(b) < _box_sort_key(a):
        a, b = b, a
    # y grows downward: the box spans [y - h, y]
    ya0, ya1 = a.location[1] - a.dimensions[0], a.location[1]
    yb0, yb1 = b.location[1] - b.dimensions[0], b.location[1]
    overlap_y = min(ya1, yb1) - max(ya0, yb0)
    if overlap_y <= 0.0:
        return 0.0
    inter = _bev_intersection_area(a, b) * overlap_y
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def project_box2d(box: Box3D, calib: CameraCalib) -> Box2D:
    """Tight axis-aligned hull of the eight projected corners.

    The hull is not clipped to the image: corners of truncated objects fall
    outside the image bounds and the hull still contains them.
    """
    corners = box3d_corners(box)
    if np.any(corners[:, 2] <= 0):
        raise ProjectionError("box crosses the image plane; cannot project its corners")
    pts = np.array([project_point(c, calib) for c in corners])
    cx, cy = project_center(box, calib)
    return Box2D(
        x_min=float(pts[:, 0].min()),
        y_min=float(pts[:, 1].min()),
        x_max=float(pts[:, 0].max()),
        y_max=float(pts[:, 1].max()),
        center3d_proj=(cx, cy),
    )


def back_project(x_pix: float, y_pix: float, depth: float, calib: CameraCalib) -> np.ndarray:
    """Invert the projection at a given camera-frame depth z.

    Assumes the third projection row is [0, 0, 1, t_z] (KITTI P2 layout).
    """
    P = calib.P
    w = depth + P[2, 3]
    y = (y_pix * w - P[1, 2] * depth - P[1, 3]) / P[1, 1]
    x = (x_pix * w - P[0, 1] * y - P[0, 2] * depth - P[0, 3]) / P[0, 0]
    return np.array([x, y, depth])


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi
