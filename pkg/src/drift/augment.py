"""Training-time frame augmentation: flips, rotation, scaling and ground-truth pasting."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .frames import Y, Z, BoxLabel, RadarFrame, rasterize_boxes
from .geometry import intersection_area, points_in_box, rot2
from .pillars import GridSpec
from .raycast import raycast_free_road

FLAGS = ("flip_y", "rotate", "scale", "gt_sample")
MAX_ROT = math.pi / 8
SCALE_RANGE = (0.95, 1.05)


@dataclass
class GTSample:
    box: BoxLabel
    points: np.ndarray


def box_points(frame: RadarFrame, box: BoxLabel, margin: float = 0.0) -> np.ndarray:
    """Indices of points inside the box footprint (grown by ``margin``) and its height span."""
    p = frame.points
    inside = points_in_box(p[:, :2], box.cx, box.cy, box.l + margin, box.w + margin, box.yaw)
    inside &= np.abs(p[:, Z] - box.cz) <= box.h / 2 + margin
    return np.flatnonzero(inside)


def build_gt_database(frames: list[RadarFrame]) -> list[GTSample]:
    return [GTSample(b, f.points[box_points(f, b, 0.1)].copy()) for f in frames for b in f.boxes]


def _with_masks(frame: RadarFrame, boxes, mask_grid: GridSpec | None, n_rays: int) -> RadarFrame:
    if frame.occupancy_mask is None and frame.free_road_mask is None:
        return frame
    if mask_grid is None:
        raise ValueError("frame carries masks; pass mask_grid so they can be re-derived")
    occ = rasterize_boxes(boxes, mask_grid)
    free = raycast_free_road(occ, mask_grid.origin_cell(), n_rays)
    return replace(frame, occupancy_mask=occ, free_road_mask=free)


def flip_y(frame: RadarFrame) -> RadarFrame:
    """Mirror across the x axis. Radial velocities are unchanged: a mirrored scene has the same ranges."""
    p = frame.points.copy()
    p[:, Y] = -p[:, Y]
    boxes = [replace(b, cy=-b.cy, yaw=-b.yaw) for b in frame.boxes]
    out = replace(frame, points=p, boxes=boxes)
    if frame.free_road_mask is not None:
        out.free_road_mask = frame.free_road_mask[:, ::-1].copy()
    if frame.occupancy_mask is not None:
        out.occupancy_mask = frame.occupancy_mask[:, ::-1].copy()
    return out


def rotate(frame: RadarFrame, theta: float) -> RadarFrame:
    """Rotate about the sensor; Doppler values are scalar radial speeds and stay as they are."""
    r = rot2(theta)
    p = frame.points.copy()
    p[:, :2] = p[:, :2] @ r.T
    boxes = []
    for b in frame.boxes:
        c = r @ np.array([b.cx, b.cy])
        boxes.append(replace(b, cx=float(c[0]), cy=float(c[1]), yaw=b.yaw + theta))
    return replace(frame, points=p, boxes=boxes)


def scale(frame: RadarFrame, s: float) -> RadarFrame:
    p = frame.points.copy()
    p[:, :3] *= s
    boxes = [replace(b, cx=b.cx * s, cy=b.cy * s, cz=b.cz * s, l=b.l * s, w=b.w * s, h=b.h * s)
             for b in frame.boxes]
    return replace(frame, points=p, boxes=boxes)


def gt_sample(frame: RadarFrame, database: list[GTSample], rng, max_paste: int = 5,
              n_candidates: int = 15) -> RadarFrame:
    """Paste up to ``max_paste`` database objects whose footprints overlap no existing box."""
    if not database:
        return frame
    boxes = list(frame.boxes)
    pts = frame.points
    pasted = 0
    for idx in rng.permutation(len(database))[:n_candidates]:
        if pasted >= max_paste:
            break
        cand = database[int(idx)]
        if any(intersection_area(cand.box.bev, b.bev) > 0 for b in boxes):
            continue
        # points already inside the pasted footprint would contradict the new label
        clear = np.ones(len(pts), dtype=bool)
        clear[box_points(RadarFrame(0, pts), cand.box, 0.1)] = False
        pts = np.concatenate([pts[clear], cand.points], axis=0)
        boxes.append(cand.box)
        pasted += 1
    return replace(frame, points=pts, boxes=boxes)


def augment(frame: RadarFrame, flags, rng, database: list[GTSample] | None = None,
            mask_grid: GridSpec | None = None, n_rays: int = 360) -> RadarFrame:
    """Apply the requested augmentations in a fixed order: gt_sample, flip, rotate, scale.

    Masks of a transformed frame are re-derived from its boxes on ``mask_grid``.
    """
    bad = set(flags) - set(FLAGS)
    if bad:
        raise ValueError(f"unknown augmentation flags {sorted(bad)}")
    out = frame
    rederive = False
    if "gt_sample" in flags and database:
        out = gt_sample(out, database, rng)
        rederive = True
    if "flip_y" in flags and rng.uniform() < 0.5:
        out = flip_y(out)
        rederive = True  # the sensor cell is not centred on the mirror axis
    if "rotate" in flags:
        out = rotate(out, rng.uniform(-MAX_ROT, MAX_ROT))
        rederive = True
    if "scale" in flags:
        out = scale(out, rng.uniform(*SCALE_RANGE))
        rederive = True
    if rederive:
        out = _with_masks(out, out.boxes, mask_grid, n_rays)
    return out

