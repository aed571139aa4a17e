"""Dense BEV neck, center-style detection head with decoding, and the occupancy head."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Linear, Module, Parameter, Tensor
from .autodiff import functional as F
from .frames import CLASSES, BoxLabel
from .geometry import wrap_angle
from .pillars import GridSpec, SparsePillarSet
from .raycast import raycast_free_road  # noqa: F401  (re-exported: part of the head's public surface)

N_REG = 8  # dx, dy, z, log l, log w, log h, sin yaw, cos yaw
LOG_EXTENT_CLIP = 10.0
HEAT_BIAS = -2.19  # sigmoid(-2.19) ~ 0.1, the usual prior for sparse centre maps


def densify(pillars: SparsePillarSet, batch_size: int) -> Tensor:
    """Scatter active rows into a zero ``(B, H, W, C)`` map."""
    h, w = pillars.dims
    flat = (pillars.coords[:, 0] * h + pillars.coords[:, 1]) * w + pillars.coords[:, 2]
    dense = F.scatter_rows(pillars.features, flat, batch_size * h * w)
    return F.reshape(dense, (batch_size, h, w, pillars.C))


def sparsify(dense: Tensor, coords: np.ndarray) -> Tensor:
    b, h, w, c = dense.shape
    flat = (coords[:, 0] * h + coords[:, 1]) * w + coords[:, 2]
    return F.take_rows(F.reshape(dense, (b * h * w, c)), flat)


class Conv3x3(Module):
    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float32, bias: bool = True, stride: int = 1):
        bound = 1.0 / np.sqrt(9 * c_in)
        self.stride = stride
        self.w = Parameter(rng.uniform(-bound, bound, (9 * c_in, c_out)).astype(dtype))
        self.b = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.w, self.b, self.stride)


class ConvTranspose2x(Module):
    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(9 * c_in)
        self.w = Parameter(rng.uniform(-bound, bound, (9 * c_out, c_in)).astype(dtype))
        self.b = Parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x: Tensor, out_hw=None) -> Tensor:
        return F.conv_transpose2d(x, self.w, self.b, out_hw)


class FPN(Module):
    """Top-down pyramid over three pillar stages, output at the finest of them.

    Lateral 1x1 projections and the 3x3 output conv are bias-free, so an
    all-zero input gives an all-zero map.
    """

    def __init__(self, in_channels: tuple[int, int, int], width: int, rng, dtype=np.float32):
        self.laterals = [Linear(c, width, rng, dtype, bias=False) for c in in_channels]
        self.out = Conv3x3(width, width, rng, dtype, bias=False)

    def forward(self, stages: list[SparsePillarSet], batch_size: int) -> Tensor:
        if len(stages) != 3:
            raise ValueError("fpn takes exactly three stages")
        for fine, coarse in zip(stages[:-1], stages[1:]):
            if (math.ceil(fine.dims[0] / 2), math.ceil(fine.dims[1] / 2)) != tuple(coarse.dims):
                raise ValueError(f"stage resolution mismatch: {fine.dims} then {coarse.dims}")
        maps = [lat(densify(s, batch_size)) for lat, s in zip(self.laterals, stages)]
        top = maps[2]
        for lateral in (maps[1], maps[0]):
            top = F.add(lateral, F.upsample2x(top, lateral.shape[1:3]))
        return self.out(top)


class CenterHead(Module):
    """Shared 3x3 conv, then per-class heat logits and 8 regression channels."""

    def __init__(self, c_in: int, width: int, rng, dtype=np.float32, n_classes: int = len(CLASSES)):
        self.shared = Conv3x3(c_in, width, rng, dtype)
        self.heat = Conv3x3(width, n_classes, rng, dtype)
        self.heat.b.data[:] = HEAT_BIAS
        self.reg = Conv3x3(width, N_REG, rng, dtype)

    def forward(self, bev: Tensor) -> tuple[Tensor, Tensor]:
        """Returns ``(heat_logits, regression)``; apply a sigmoid for heatmaps."""
        h = F.gelu(self.shared(bev))
        return self.heat(h), self.reg(h)


class OccupancyHead(Module):
    """Eight 3x3 layers with GELU; layer five is a 2x transposed conv; the last emits one logit."""

    def __init__(self, c_in: int, width: int, rng, dtype=np.float32):
        self.pre = [Conv3x3(c_in if i == 0 else width, width, rng, dtype) for i in range(4)]
        self.up = ConvTranspose2x(width, width, rng, dtype)
        self.post = [Conv3x3(width, width, rng, dtype) for _ in range(2)]
        self.final = Conv3x3(width, 1, rng, dtype)

    def forward(self, bev: Tensor, out_hw=None) -> Tensor:
        x = bev
        for conv in self.pre:
            x = F.gelu(conv(x))
        x = F.gelu(self.up(x, out_hw))
        for conv in self.post:
            x = F.gelu(conv(x))
        return self.final(x)


# ---------------------------------------------------------------- box coding

@dataclass
class Detection:
    box: BoxLabel
    score: float
    frame_id: int = 0

    @property
    def cls(self) -> int:
        return self.box.cls


def head_grid(grid: GridSpec, stride: int = 2) -> GridSpec:
    """The grid the detection head predicts on: the base grid coarsened by ``stride``."""
    if grid.H % stride or grid.W % stride:
        raise ValueError(f"grid {grid.H}x{grid.W} is not divisible by the head stride {stride}")
    return GridSpec(grid.x_range, grid.y_range, grid.cell_size(stride))


def encode_box(box: BoxLabel, grid: GridSpec) -> tuple[tuple[int, int], np.ndarray] | None:
    """Centre cell and regression target on ``grid``; ``None`` when the centre is off-grid."""
    xy = np.array([[box.cx, box.cy]])
    if not grid.in_range(xy)[0]:
        return None
    cell = grid.cell_of(xy)[0]
    center = grid.cell_center(cell[None])[0]
    vx, vy = grid.voxel_size
    target = np.array([(box.cx - center[0]) / vx, (box.cy - center[1]) / vy, box.cz,
                       math.log(box.l), math.log(box.w), math.log(box.h),
                       math.sin(box.yaw), math.cos(box.yaw)])
    return (int(cell[0]), int(cell[1])), target


def decode_box(cell: tuple[int, int], reg: np.ndarray, grid: GridSpec, cls: int) -> BoxLabel:
    center = grid.cell_center(np.array([cell]))[0]
    vx, vy = grid.voxel_size
    logs = np.clip(reg[3:6], -LOG_EXTENT_CLIP, LOG_EXTENT_CLIP)
    return BoxLabel(center[0] + reg[0] * vx, center[1] + reg[1] * vy, reg[2],
                    math.exp(logs[0]), math.exp(logs[1]), math.exp(logs[2]),
                    wrap_angle(math.atan2(reg[6], reg[7])), cls)


def peak_mask(heat: np.ndarray) -> np.ndarray:
    """3x3 local maxima of an ``(H, W, K)`` map; among equal values the first in raster order wins."""
    h, w = heat.shape[:2]
    pad = np.pad(heat, ((1, 1), (1, 1), (0, 0)), constant_values=-np.inf)
    keep = np.ones(heat.shape, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = pad[1 + di:1 + di + h, 1 + dj:1 + dj + w]
            earlier = di < 0 or (di == 0 and dj < 0)
            keep &= (heat > nb) if earlier else (heat >= nb)
    return keep


def decode_detections(heat: np.ndarray, reg: np.ndarray, grid: GridSpec, score_thresh: float = 0.1,
                      max_dets: int = 100, frame_id: int = 0) -> list[Detection]:
    """Peaks of one frame's sigmoid heatmap ``(H, W, K)`` with regression ``(H, W, 8)``, best first."""
    peaks = peak_mask(heat) & (heat > score_thresh)
    ii, jj, kk = np.nonzero(peaks)
    scores = heat[ii, jj, kk]
    order = np.lexsort((kk, jj, ii, -scores))[:max_dets]
    return [Detection(decode_box((int(ii[o]), int(jj[o])), reg[ii[o], jj[o]], grid, int(kk[o])),
                      float(scores[o]), frame_id) for o in order]


# ---------------------------------------------------------------- text format

def format_detections(dets: list[Detection]) -> str:
    """One line per detection: ``frame_id,class,score,cx,cy,cz,l,w,h,yaw``."""
    lines = []
    for d in dets:
        b = d.box
        vals = [b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw]
        lines.append(",".join([str(d.frame_id), CLASSES[b.cls], repr(d.score)] + [repr(float(v)) for v in vals]))
    return "".join(line + "\n" for line in lines)


def parse_detections(text: str) -> list[Detection]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 10 or parts[1] not in CLASSES:
            raise ValueError(f"line {n}: malformed detection {line!r}")
        vals = [float(v) for v in parts[3:]]
        out.append(Detection(BoxLabel(*vals, CLASSES.index(parts[1])), float(parts[2]), int(parts[0])))
    return out
