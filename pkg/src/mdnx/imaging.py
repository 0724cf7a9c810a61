"""Dependency-free raster I/O and rendering helpers.

Images travel as float arrays in [0, 1] with shape [3, H, W]; files are
binary portable pixmaps (P6) so byte-exact comparisons need no codecs.
Pillow, when importable, widens reading to PNG/JPEG.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageError(ValueError):
    pass


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """img: float [3, H, W] in [0, 1] or uint8 [3, H, W]."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    _, h, w = arr.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 pixmap to float [3, H, W] in [0, 1]."""
    blob = Path(path).read_bytes()
    if blob[:2] != b"P6":
        raise ImageError(f"{path}: not a P6 pixmap")
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ImageError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageError(f"{path}: only .ppm readable without Pillow installed") from exc
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def blue_red_colormap() -> np.ndarray:
    """Fixed 256-entry lookup from blue (cold) to red (hot), float [256, 3]."""
    t = np.arange(256) / 255.0
    return np.stack([t, np.zeros_like(t), 1.0 - t], axis=1)


def apply_colormap(values: np.ndarray, lut: np.ndarray) -> np.ndarray:
    """Map [H, W] values in [0, 1] through a [256, 3] lookup to [3, H, W]."""
    idx = np.clip(np.rint(values * 255.0), 0, 255).astype(np.int64)
    return lut[idx].transpose(2, 0, 1)


def blend(base: np.ndarray, overlay: np.ndarray, alpha: float) -> np.ndarray:
    return (1.0 - alpha) * base + alpha * overlay


def draw_polyline(img: np.ndarray, points: list[tuple[int, int]], color: tuple[float, float, float]) -> None:
    """Rasterize straight segments between integer (x, y) points, in place."""
    _, h, w = img.shape
    col = np.asarray(color).reshape(3, 1)
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        n = max(abs(x1 - x0), abs(y1 - y0), 1)
        xs = np.rint(np.linspace(x0, x1, n + 1)).astype(int)
        ys = np.rint(np.linspace(y0, y1, n + 1)).astype(int)
        keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        img[:, ys[keep], xs[keep]] = col
