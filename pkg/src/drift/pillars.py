"""Sparse BEV pillar grids: voxelization, coordinate hashing, point/pillar lookups."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import LayerNorm, Linear, Module, Tensor
from .autodiff import functional as F


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = (0.0, 51.2)
    y_range: tuple[float, float] = (-25.6, 25.6)
    voxel_size: tuple[float, float] = (0.16, 0.16)

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range):
            if not lo < hi:
                raise ValueError(f"empty grid range ({lo}, {hi})")
        for extent, v in ((self.x_range[1] - self.x_range[0], self.voxel_size[0]),
                          (self.y_range[1] - self.y_range[0], self.voxel_size[1])):
            n = round(extent / v)
            if n <= 0 or abs(n * v - extent) > 1e-6 * max(1.0, extent):
                raise ValueError(f"extent {extent} is not a whole number of {v} m cells")

    @property
    def H(self) -> int:
        return round((self.x_range[1] - self.x_range[0]) / self.voxel_size[0])

    @property
    def W(self) -> int:
        return round((self.y_range[1] - self.y_range[0]) / self.voxel_size[1])

    def dims(self, scale: int = 1) -> tuple[int, int]:
        return math.ceil(self.H / scale), math.ceil(self.W / scale)

    def cell_size(self, scale: int = 1) -> tuple[float, float]:
        return self.voxel_size[0] * scale, self.voxel_size[1] * scale

    def in_range(self, xy: np.ndarray) -> np.ndarray:
        x, y = xy[:, 0], xy[:, 1]
        return ((x >= self.x_range[0]) & (x < self.x_range[1])
                & (y >= self.y_range[0]) & (y < self.y_range[1]))

    def cell_of(self, xy: np.ndarray, scale: int = 1) -> np.ndarray:
        """Integer cell ``(gx, gy)`` per point at a coarsening ``scale`` of the base grid."""
        gx = np.floor((xy[:, 0] - self.x_range[0]) / self.voxel_size[0]).astype(np.int64)
        gy = np.floor((xy[:, 1] - self.y_range[0]) / self.voxel_size[1]).astype(np.int64)
        gx = np.clip(gx, 0, self.H - 1)
        gy = np.clip(gy, 0, self.W - 1)
        return np.stack([gx // scale, gy // scale], axis=1)

    def cell_center(self, cells: np.ndarray, scale: int = 1) -> np.ndarray:
        vx, vy = self.cell_size(scale)
        return np.stack([self.x_range[0] + (cells[:, 0] + 0.5) * vx,
                         self.y_range[0] + (cells[:, 1] + 0.5) * vy], axis=1)

    def origin_cell(self) -> tuple[int, int]:
        """Cell holding the sensor at (0, 0), clamped into the grid."""
        c = self.cell_of(np.array([[max(0.0, self.x_range[0]), 0.0]]))[0]
        return int(c[0]), int(c[1])


def pack_keys(coords: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    h, w = dims
    return (coords[:, 0].astype(np.int64) * h + coords[:, 1]) * w + coords[:, 2]


class CoordHash:
    """Lookup from ``(batch, gx, gy)`` to row index over sorted packed keys."""

    def __init__(self, coords: np.ndarray, dims: tuple[int, int]):
        self.dims = dims
        keys = pack_keys(coords, dims)
        self.order = np.argsort(keys, kind="stable")
        self.keys = keys[self.order]

    def find(self, coords: np.ndarray) -> np.ndarray:
        """Row per query coordinate, ``-1`` when absent or out of bounds."""
        h, w = self.dims
        inside = ((coords[:, 1] >= 0) & (coords[:, 1] < h) & (coords[:, 2] >= 0) & (coords[:, 2] < w))
        q = pack_keys(np.where(inside[:, None], coords, 0), self.dims)
        pos = np.searchsorted(self.keys, q)
        pos = np.minimum(pos, max(len(self.keys) - 1, 0))
        if len(self.keys) == 0:
            return np.full(len(coords), -1, dtype=np.int64)
        hit = inside & (self.keys[pos] == q)
        return np.where(hit, self.order[pos], -1)


@dataclass
class SparsePillarSet:
    features: Tensor
    coords: np.ndarray          # (M, 3) int64: batch, gx, gy
    dims: tuple[int, int]       # grid H, W at this stage
    scale: int = 1              # coarsening relative to the base grid
    stage: int = 0
    _hash: CoordHash | None = field(default=None, repr=False, compare=False)

    @property
    def M(self) -> int:
        return len(self.coords)

    @property
    def C(self) -> int:
        return self.features.shape[1]

    @property
    def batch(self) -> np.ndarray:
        return self.coords[:, 0]

    @property
    def hash(self) -> CoordHash:
        if self._hash is None:
            self._hash = CoordHash(self.coords, self.dims)
        return self._hash

    def with_features(self, features: Tensor) -> "SparsePillarSet":
        return SparsePillarSet(features, self.coords, self.dims, self.scale, self.stage, self._hash)

    def validate(self) -> None:
        h, w = self.dims
        if self.features.shape[0] != self.M:
            raise ValueError("features and coords are not row-aligned")
        if self.M and (self.coords[:, 1].min() < 0 or self.coords[:, 1].max() >= h
                       or self.coords[:, 2].min() < 0 or self.coords[:, 2].max() >= w):
            raise ValueError("pillar coordinate outside grid")
        if len(np.unique(pack_keys(self.coords, self.dims))) != self.M:
            raise ValueError("duplicate pillar coordinates")


def dump_csv(pillars: SparsePillarSet, path) -> None:
    """Debug dump: one row per pillar, ``batch, gx, gy, f0..fC``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["batch", "gx", "gy"] + [f"f{i}" for i in range(pillars.C)])
        for c, f in zip(pillars.coords, pillars.features.data):
            wr.writerow([int(c[0]), int(c[1]), int(c[2])] + [repr(float(v)) for v in f])


class PillarEncoder(Module):
    """Per-point linear + norm + GELU, max-pooled within each pillar."""

    def __init__(self, in_dim: int, out_dim: int, rng, dtype=np.float32, offsets: str = "center"):
        if offsets not in ("center", "mean"):
            raise ValueError(f"unknown pillar offset mode {offsets!r}")
        self.offsets = offsets
        self.lin = Linear(in_dim + 2, out_dim, rng, dtype)
        self.norm = LayerNorm(out_dim, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.gelu(self.norm(self.lin(x)))


def pillarize(points: np.ndarray, batch: np.ndarray | None, grid: GridSpec, encoder: PillarEncoder,
              max_points: int = 32, dtype=None) -> tuple[SparsePillarSet, np.ndarray]:
    """Bin points into pillars and encode each non-empty pillar to one vector.

    Returns the pillar set (coords sorted by ``(batch, gx, gy)``) and, per input
    point, its pillar row (``-1`` for out-of-range points). Within a pillar only
    the first ``max_points`` points in input order feed the encoder.
    """
    dtype = dtype or encoder.lin.w.dtype
    n = len(points)
    batch = np.zeros(n, dtype=np.int64) if batch is None else np.asarray(batch, dtype=np.int64)
    inside = grid.in_range(points[:, :2]) if n else np.zeros(0, dtype=bool)
    cells = grid.cell_of(points[:, :2]) if n else np.zeros((0, 2), dtype=np.int64)
    full = np.concatenate([batch[:, None], cells], axis=1)
    dims = (grid.H, grid.W)
    keys = pack_keys(full[inside], dims)
    ukeys, inv = np.unique(keys, return_inverse=True)
    m = len(ukeys)
    coords = np.stack([ukeys // (dims[0] * dims[1]), (ukeys // dims[1]) % dims[0], ukeys % dims[1]],
                      axis=1).astype(np.int64) if m else np.zeros((0, 3), dtype=np.int64)
    point_rows = np.full(n, -1, dtype=np.int64)
    point_rows[inside] = inv

    idx_in = np.flatnonzero(inside)
    order = np.argsort(inv, kind="stable")
    sorted_rows = inv[order]
    first = np.searchsorted(sorted_rows, sorted_rows, side="left")
    rank = np.empty(len(inv), dtype=np.int64)
    rank[order] = np.arange(len(inv)) - first
    keep = rank < max_points
    sel = idx_in[keep]
    rows = inv[keep]

    pts = points[sel]
    if encoder.offsets == "center":
        ref = grid.cell_center(coords[rows, 1:]) if m else np.zeros((0, 2))
    else:
        sums = np.zeros((m, 2))
        np.add.at(sums, rows, pts[:, :2])
        ref = (sums / np.maximum(np.bincount(rows, minlength=m), 1)[:, None])[rows]
    aug = np.concatenate([pts, pts[:, :2] - ref], axis=1).astype(dtype)
    feats, _ = F.segment_max(encoder(Tensor(aug)), rows, m)
    return SparsePillarSet(feats, coords, dims, scale=1, stage=0), point_rows


def point_cells(xy: np.ndarray, batch: np.ndarray, grid: GridSpec, scale: int) -> np.ndarray:
    cells = grid.cell_of(xy, scale)
    return np.concatenate([np.asarray(batch, dtype=np.int64)[:, None], cells], axis=1)


def lookup_rows(xy: np.ndarray, batch: np.ndarray, grid: GridSpec, pillars: SparsePillarSet) -> np.ndarray:
    """Pillar row per point at the pillar set's resolution, ``-1`` for empty cells."""
    if len(xy) == 0:
        return np.zeros(0, dtype=np.int64)
    rows = pillars.hash.find(point_cells(xy, batch, grid, pillars.scale))
    return np.where(grid.in_range(xy), rows, -1)


def lookup_features(xy: np.ndarray, batch: np.ndarray, grid: GridSpec,
                    pillars: SparsePillarSet) -> tuple[Tensor, np.ndarray]:
    """Feature row of each point's pillar; zeros and ``found=False`` where the cell is empty."""
    rows = lookup_rows(xy, batch, grid, pillars)
    found = rows >= 0
    if pillars.M == 0:
        return Tensor(np.zeros((len(xy), pillars.C), dtype=pillars.features.dtype)), found
    gathered = F.take_rows(pillars.features, np.where(found, rows, 0))
    return F.mul(gathered, found[:, None].astype(pillars.features.dtype)), found


def voxelize_features(xy: np.ndarray, batch: np.ndarray, features: Tensor, grid: GridSpec,
                      target: SparsePillarSet) -> tuple[Tensor, np.ndarray]:
    """Max-pool point features into the target's pillars; ``coverage`` marks pillars with points."""
    rows = lookup_rows(xy, batch, grid, target)
    valid = rows >= 0
    pooled, coverage = F.segment_max(F.take_rows(features, np.flatnonzero(valid)), rows[valid], target.M)
    return pooled, coverage


def downsample_coords(coords: np.ndarray, dims: tuple[int, int], stride: int) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Child coords ``floor(parent / stride)``, deduplicated and sorted; parent-to-child map; child dims."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    cdims = (math.ceil(dims[0] / stride), math.ceil(dims[1] / stride))
    child = coords.copy()
    child[:, 1:] //= stride
    keys = pack_keys(child, cdims)
    ukeys, inv = np.unique(keys, return_inverse=True)
    h, w = cdims
    out = np.stack([ukeys // (h * w), (ukeys // w) % h, ukeys % w], axis=1).astype(np.int64)
    return out.reshape(-1, 3), inv.reshape(-1).astype(np.int64), cdims
