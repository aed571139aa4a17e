"""Planar rigid transforms and rotated-rectangle geometry in bird's-eye view."""
from __future__ import annotations

import math

import numpy as np


def wrap_angle(a):
    """Map angles to (-pi, pi]; angles already in range come back bit-identical."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    w = np.where((a > -np.pi) & (a <= np.pi), a, w)
    return float(w) if np.ndim(w) == 0 else w


def rot2(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def se2_apply(pose, xy: np.ndarray) -> np.ndarray:
    """Map points from the frame described by ``pose = (x, y, yaw)`` into its parent frame."""
    x, y, yaw = pose
    return xy @ rot2(yaw).T + np.array([x, y])


def se2_inverse_apply(pose, xy: np.ndarray) -> np.ndarray:
    x, y, yaw = pose
    return (xy - np.array([x, y])) @ rot2(yaw)


def box_corners(cx: float, cy: float, l: float, w: float, yaw: float) -> np.ndarray:
    """Footprint corners, counter-clockwise, shape (4, 2)."""
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) * 0.5
    return local @ rot2(yaw).T + np.array([cx, cy])


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def intersection_area(a, b) -> float:
    """Overlap area of two BEV boxes given as ``(cx, cy, l, w, yaw)``."""
    pa = box_corners(*a)
    pb = box_corners(*b)
    return max(0.0, polygon_area(clip_polygon(pa, pb)))


def bev_iou_raw(a, b) -> float:
    area_a = a[2] * a[3]
    area_b = b[2] * b[3]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = intersection_area(a, b)
    union = area_a + area_b - inter
    return float(min(1.0, max(0.0, inter / union))) if union > 0 else 0.0


def points_in_box(xy: np.ndarray, cx, cy, l, w, yaw) -> np.ndarray:
    local = (xy - np.array([cx, cy])) @ rot2(yaw)
    return (np.abs(local[:, 0]) <= l / 2) & (np.abs(local[:, 1]) <= w / 2)
