"""Training targets and losses for the detection and occupancy heads."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .frames import CLASSES, BoxLabel
from .heads import N_REG, encode_box
from .pillars import GridSpec

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0


def gaussian_radius(l_cells: float, w_cells: float, min_overlap: float = 0.1) -> float:
    """Largest centre offset keeping IoU >= ``min_overlap`` for an ``l x w`` box (three-case bound)."""
    h, w = l_cells, w_cells
    b1 = h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * c1)) / 2
    b2 = 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 + math.sqrt(b2 ** 2 - 16 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def draw_gaussian(heat: np.ndarray, cell: tuple[int, int], radius: int) -> None:
    """Max-splat ``exp(-d^2 / 2 sigma^2)`` with ``sigma = (2r + 1) / 6`` around ``cell`` in place."""
    sigma = (2 * radius + 1) / 6
    i, j = cell
    h, w = heat.shape
    i0, i1 = max(0, i - radius), min(h, i + radius + 1)
    j0, j1 = max(0, j - radius), min(w, j + radius + 1)
    di = np.arange(i0, i1)[:, None] - i
    dj = np.arange(j0, j1)[None, :] - j
    g = np.exp(-(di * di + dj * dj) / (2 * sigma * sigma))
    np.maximum(heat[i0:i1, j0:j1], g, out=heat[i0:i1, j0:j1])


@dataclass
class DetectionTargets:
    heat: np.ndarray        # (B, H, W, K) in [0, 1], exactly 1 at centre cells
    index: np.ndarray       # (N,) flat index into B*H*W of each positive cell
    reg: np.ndarray         # (N, 8)


def detection_targets(boxes_per_frame: list[list[BoxLabel]], grid: GridSpec, min_radius: int = 2,
                      n_classes: int = len(CLASSES)) -> DetectionTargets:
    """Heatmap and regression targets on the head ``grid``; the first box claims a shared centre cell."""
    h, w = grid.H, grid.W
    heat = np.zeros((len(boxes_per_frame), h, w, n_classes))
    index, reg = [], []
    vx, vy = grid.voxel_size
    for b, boxes in enumerate(boxes_per_frame):
        taken = set()
        for box in boxes:
            enc = encode_box(box, grid)
            if enc is None:
                continue
            cell, target = enc
            r = max(min_radius, int(gaussian_radius(box.l / vx, box.w / vy)))
            draw_gaussian(heat[b, :, :, box.cls], cell, r)
            if cell in taken:
                continue
            taken.add(cell)
            index.append((b * h + cell[0]) * w + cell[1])
            reg.append(target)
    return DetectionTargets(heat, np.array(index, dtype=np.int64),
                            np.array(reg, dtype=np.float64).reshape(-1, N_REG))


def focal_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Penalty-reduced focal loss on centre heatmaps, summed and divided by the number of centres.

    Computed from logits: ``log p = -softplus(-x)``, ``log(1 - p) = -softplus(x)``.
    """
    if logits.shape != target.shape:
        raise ValueError(f"heatmap shape {logits.shape} != target {target.shape}")
    dt = logits.dtype
    pos = (target == 1.0).astype(dt)
    neg_w = ((1.0 - target) ** FOCAL_BETA * (1.0 - pos)).astype(dt)
    p = F.sigmoid(logits)
    log_p = F.neg(F.softplus(F.neg(logits)))
    log_1mp = F.neg(F.softplus(logits))
    pos_term = F.mul(F.mul(F.power(F.sub(1.0, p), FOCAL_ALPHA), log_p), pos)
    neg_term = F.mul(F.mul(F.power(p, FOCAL_ALPHA), log_1mp), neg_w)
    n_pos = max(1.0, float(pos.sum()))
    return F.mul(F.sum(F.add(pos_term, neg_term)), -1.0 / n_pos)


def regression_loss(reg: Tensor, targets: DetectionTargets) -> Tensor:
    """Mean L1 over the 8 channels at positive cells; zero without boxes."""
    if len(targets.index) == 0:
        return F.mul(F.sum(reg), 0.0)
    flat = F.reshape(reg, (-1, N_REG))
    pred = F.take_rows(flat, targets.index)
    diff = F.abs(F.sub(pred, targets.reg.astype(reg.dtype)))
    return F.mean(diff)


def detection_loss(heat_logits: Tensor, reg: Tensor, targets: DetectionTargets, w_heat: float = 1.0,
                   w_reg: float = 0.25) -> tuple[Tensor, dict]:
    lh = focal_loss(heat_logits, targets.heat.astype(heat_logits.dtype))
    lr = regression_loss(reg, targets)
    total = F.add(F.mul(lh, w_heat), F.mul(lr, w_reg))
    return total, {"heat": float(lh.data), "reg": float(lr.data)}


def occupancy_loss(logits: Tensor, occupied: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with logits: ``softplus(x) - y * x``."""
    y = np.asarray(occupied).astype(logits.dtype)
    if logits.shape != y.shape:
        raise ValueError(f"occupancy logits {logits.shape} do not match mask {y.shape}")
    return F.mean(F.sub(F.softplus(logits), F.mul(logits, y)))
