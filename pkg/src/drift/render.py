"""Bird's-eye-view rendering to binary PPM (P6).

Forward (+x) points up and +y points left. Pixel ``(r, c)`` covers
``x in (x_max - (r+1) p, x_max - r p]`` and the matching ``y`` strip, with
``p`` the pixel size in metres.
"""
from __future__ import annotations

import math
import re
from pathlib import Path

import numpy as np

from .frames import RadarFrame
from .geometry import box_corners
from .heads import Detection
from .pillars import GridSpec

BACKGROUND = (20, 20, 20)
POINT_COLOR = (170, 170, 170)
GT_COLOR = (255, 255, 255)
CLASS_COLORS = ((0, 0, 255), (0, 255, 0), (255, 0, 0))   # car, pedestrian, cyclist
FREE_COLOR = (255, 255, 0)
FREE_ALPHA = 0.4


class Canvas:
    def __init__(self, grid: GridSpec, pixels_per_cell: int = 1):
        self.grid = grid
        self.px = grid.voxel_size[0] / pixels_per_cell
        self.h = grid.H * pixels_per_cell
        self.w = round((grid.y_range[1] - grid.y_range[0]) / self.px)
        self.img = np.empty((self.h, self.w, 3), dtype=np.uint8)
        self.img[:] = BACKGROUND

    def to_pixel(self, xy: np.ndarray) -> np.ndarray:
        """Continuous ``(row, col)`` coordinates; integer part is the pixel index."""
        xy = np.atleast_2d(xy)
        return np.stack([(self.grid.x_range[1] - xy[:, 0]) / self.px,
                         (self.grid.y_range[1] - xy[:, 1]) / self.px], axis=1)

    def pixel_centers(self) -> np.ndarray:
        r, c = np.meshgrid(np.arange(self.h), np.arange(self.w), indexing="ij")
        return np.stack([self.grid.x_range[1] - (r + 0.5) * self.px,
                         self.grid.y_range[1] - (c + 0.5) * self.px], axis=-1)

    def plot(self, rc: np.ndarray, color) -> None:
        rc = np.floor(rc).astype(np.int64)
        ok = (rc[:, 0] >= 0) & (rc[:, 0] < self.h) & (rc[:, 1] >= 0) & (rc[:, 1] < self.w)
        self.img[rc[ok, 0], rc[ok, 1]] = color

    def line(self, a: np.ndarray, b: np.ndarray, color) -> None:
        self.plot(line_samples(a, b), color)

    def box(self, bev, color) -> None:
        corners = self.to_pixel(box_corners(*bev))
        for k in range(4):
            self.line(corners[k], corners[(k + 1) % 4], color)

    def overlay(self, mask: np.ndarray, mask_grid: GridSpec, color, alpha: float) -> None:
        centers = self.pixel_centers().reshape(-1, 2)
        inside = mask_grid.in_range(centers)
        cells = mask_grid.cell_of(centers)
        hit = inside & mask[cells[:, 0], cells[:, 1]]
        flat = self.img.reshape(-1, 3)
        blend = (1 - alpha) * flat[hit] + alpha * np.array(color, dtype=np.float64)
        flat[hit] = np.round(blend).astype(np.uint8)


def line_samples(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """DDA: ``n + 1`` evenly spaced points with ``n = ceil(max |b - a|)``, so consecutive
    samples fall in 8-connected pixels."""
    n = max(1, math.ceil(float(np.abs(np.asarray(b) - np.asarray(a)).max())))
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    return np.asarray(a)[None] * (1 - t) + np.asarray(b)[None] * t


def render_frame(frame: RadarFrame, grid: GridSpec, detections: list[Detection] | None = None,
                 free_mask: np.ndarray | None = None, mask_grid: GridSpec | None = None,
                 pixels_per_cell: int = 1, show_gt: bool = True) -> np.ndarray:
    """Layers, bottom to top: free-road overlay, points, ground-truth outlines, predictions."""
    cv = Canvas(grid, pixels_per_cell)
    if free_mask is not None:
        cv.overlay(np.asarray(free_mask, dtype=bool), mask_grid or grid, FREE_COLOR, FREE_ALPHA)
    if frame.N:
        cv.plot(cv.to_pixel(frame.points[:, :2]), POINT_COLOR)
    if show_gt:
        for b in frame.boxes:
            cv.box(b.bev, GT_COLOR)
    for d in detections or []:
        cv.box(d.box.bev, CLASS_COLORS[d.cls])
    return cv.img


def encode_ppm(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", buf)
    if m is None:
        raise ValueError("not a binary 8-bit PPM")
    w, h = int(m.group(1)), int(m.group(2))
    data = buf[m.end():]
    if len(data) < w * h * 3:
        raise ValueError("truncated PPM")
    return np.frombuffer(data[:w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))
