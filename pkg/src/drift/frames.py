"""Radar frames, labels, multi-scan accumulation, a synthetic scene generator and frame files."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .geometry import box_corners, points_in_box, rot2, se2_apply, se2_inverse_apply, wrap_angle
from .geometry import intersection_area
from .pillars import GridSpec
from .raycast import raycast_free_road

CLASSES = ("car", "pedestrian", "cyclist")
X, Y, Z, RCS, VR, VRC, T = range(7)
POINT_DIM = 7


class RadarPoint(NamedTuple):
    x: float
    y: float
    z: float
    rcs: float
    v_r: float
    v_rc: float
    t: float


@dataclass
class BoxLabel:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float
    cls: int

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got {(self.l, self.w, self.h)}")
        if not 0 <= self.cls < len(CLASSES):
            raise ValueError(f"unknown class id {self.cls}")
        self.yaw = wrap_angle(self.yaw)

    @property
    def bev(self) -> tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.l, self.w, self.yaw)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw])


@dataclass
class RadarFrame:
    frame_id: int
    points: np.ndarray                    # (N, 7): x y z rcs v_r v_rc t
    ego_pose: tuple[float, float, float] = (0.0, 0.0, 0.0)
    boxes: list[BoxLabel] = field(default_factory=list)
    n_scans: int = 1
    free_road_mask: np.ndarray | None = None
    occupancy_mask: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, POINT_DIM)

    @property
    def N(self) -> int:
        return len(self.points)

    def point(self, i: int) -> RadarPoint:
        return RadarPoint(*map(float, self.points[i]))

    def box_array(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 8))
        return np.array([list(b.as_array()) + [b.cls] for b in self.boxes])

    def __eq__(self, other) -> bool:
        if not isinstance(other, RadarFrame):
            return NotImplemented
        return (self.frame_id == other.frame_id and self.n_scans == other.n_scans
                and tuple(self.ego_pose) == tuple(other.ego_pose)
                and np.array_equal(self.points, other.points)
                and np.array_equal(self.box_array(), other.box_array())
                and _mask_eq(self.free_road_mask, other.free_road_mask)
                and _mask_eq(self.occupancy_mask, other.occupancy_mask))


def _mask_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


# ----------------------------------------------------------------- transforms

def accumulate_scans(scans: list[RadarFrame], poses: list, n_scans: int) -> RadarFrame:
    """Merge single scans into the newest scan's sensor frame; ``t`` becomes scan age.

    ``scans[0]`` and ``poses[0]`` are the newest; poses are sensor-in-world SE(2).
    """
    if not (len(scans) == len(poses) == n_scans):
        raise ValueError(f"expected {n_scans} scans and poses, got {len(scans)} and {len(poses)}")
    ref = poses[0]
    parts = []
    for age, (scan, pose) in enumerate(zip(scans, poses)):
        pts = scan.points.copy()
        if len(pts):
            world = se2_apply(pose, pts[:, :2])
            pts[:, :2] = se2_inverse_apply(ref, world)
            pts[:, T] = age
        parts.append(pts)
    newest = scans[0]
    return RadarFrame(newest.frame_id, np.concatenate(parts, axis=0), tuple(ref), list(newest.boxes),
                      n_scans, newest.free_road_mask, newest.occupancy_mask)


def crop(frame: RadarFrame, x_range=(0.0, 51.2), y_range=(-25.6, 25.6), z_range=(-3.0, 2.0)) -> RadarFrame:
    """Keep points inside the half-open box ``[min, max)``; drop boxes centred outside it."""
    for lo, hi in (x_range, y_range, z_range):
        if not lo < hi:
            raise ValueError(f"crop interval ({lo}, {hi}) is empty")
    p = frame.points
    keep = ((p[:, X] >= x_range[0]) & (p[:, X] < x_range[1]) & (p[:, Y] >= y_range[0])
            & (p[:, Y] < y_range[1]) & (p[:, Z] >= z_range[0]) & (p[:, Z] < z_range[1]))
    boxes = [b for b in frame.boxes
             if x_range[0] <= b.cx < x_range[1] and y_range[0] <= b.cy < y_range[1]
             and z_range[0] <= b.cz < z_range[1]]
    return replace(frame, points=p[keep], boxes=boxes)


# ----------------------------------------------------------------- synthesis

@dataclass
class SceneConfig:
    x_range: tuple[float, float] = (0.0, 51.2)
    y_range: tuple[float, float] = (-25.6, 25.6)
    z_range: tuple[float, float] = (-3.0, 2.0)
    place_x: tuple[float, float] = (3.0, 46.0)
    place_y: tuple[float, float] = (-20.0, 20.0)
    object_counts: tuple = ((1, 3), (1, 3), (0, 2))          # per class (min, max) inclusive
    size_mean: tuple = ((4.2, 1.8, 1.5), (0.7, 0.6, 1.75), (1.8, 0.7, 1.7))
    size_std: tuple = ((0.3, 0.1, 0.1), (0.1, 0.08, 0.1), (0.15, 0.08, 0.1))
    points_at_ref: tuple = (5.0, 1.5, 2.0)                  # mean points per object per scan at ref_range
    ref_range: float = 10.0
    min_points_per_object: int = 1
    rcs_mean: tuple = (10.0, -5.0, 0.0)
    rcs_std: float = 3.0
    speed_max: tuple = (10.0, 1.5, 6.0)
    static_prob: float = 0.3
    clutter_rate: float = 8.0                                # mean clutter points per scan
    doppler_noise: float = 0.1
    n_scans: int = 5
    scan_dt: float = 0.1
    ego_speed: tuple[float, float] = (0.0, 8.0)
    ego_yaw_rate: tuple[float, float] = (-0.1, 0.1)
    mask_grid: GridSpec | None = field(default_factory=lambda: GridSpec(voxel_size=(0.2, 0.2)))
    n_rays: int = 360
    max_tries: int = 200
    min_gap: float = 0.5
    ground_z: float = -1.0

    def __post_init__(self):
        rates = list(self.points_at_ref) + [self.clutter_rate, self.doppler_noise, self.static_prob]
        if any(r < 0 for r in rates) or any(lo < 0 or hi < lo for lo, hi in self.object_counts):
            raise ValueError("scene rates and counts must be non-negative")


class PlacementError(RuntimeError):
    pass


def _ego_poses(rng, cfg: SceneConfig):
    """Sensor-in-world poses for ages 0..S-1 plus the ego velocity (world frame) at each."""
    speed = rng.uniform(*cfg.ego_speed)
    yaw_rate = rng.uniform(*cfg.ego_yaw_rate)
    pose0 = (rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(-np.pi, np.pi))
    poses, vels = [], []
    x, y, yaw = pose0
    for _ in range(cfg.n_scans):
        poses.append((x, y, wrap_angle(yaw)))
        vels.append(speed * np.array([math.cos(yaw), math.sin(yaw)]))
        # step one scan back in time along the arc
        yaw_prev = yaw - yaw_rate * cfg.scan_dt
        mid = 0.5 * (yaw + yaw_prev)
        x -= speed * cfg.scan_dt * math.cos(mid)
        y -= speed * cfg.scan_dt * math.sin(mid)
        yaw = yaw_prev
    return poses, vels


def _place_objects(rng, cfg: SceneConfig) -> list[tuple[BoxLabel, np.ndarray]]:
    placed: list[tuple[BoxLabel, np.ndarray]] = []
    for cls, (lo, hi) in enumerate(cfg.object_counts):
        for _ in range(int(rng.integers(lo, hi + 1))):
            for _attempt in range(cfg.max_tries):
                l, w, h = np.maximum(rng.normal(cfg.size_mean[cls], cfg.size_std[cls]), 0.2)
                yaw = rng.uniform(-np.pi, np.pi)
                cx, cy = rng.uniform(*cfg.place_x), rng.uniform(*cfg.place_y)
                cz = cfg.ground_z + h / 2
                box = BoxLabel(cx, cy, cz, l, w, h, yaw, cls)
                grown = (cx, cy, l + cfg.min_gap, w + cfg.min_gap, box.yaw)
                if all(intersection_area(grown, (b.cx, b.cy, b.l + cfg.min_gap, b.w + cfg.min_gap, b.yaw)) <= 0
                       for b, _ in placed):
                    moving = rng.uniform() >= cfg.static_prob
                    speed = rng.uniform(0, cfg.speed_max[cls]) if moving else 0.0
                    vel = speed * np.array([math.cos(box.yaw), math.sin(box.yaw)])
                    placed.append((box, vel))
                    break
            else:
                raise PlacementError(f"could not place a {CLASSES[cls]} after {cfg.max_tries} tries")
    return placed


def _surface_points(rng, box: BoxLabel, n: int) -> np.ndarray:
    """``n`` points on the box's side faces, in the box-centred world-aligned frame."""
    per = 2 * (box.l + box.w)
    s = rng.uniform(0, per, size=n)
    u = np.empty((n, 2))
    hl, hw = box.l / 2, box.w / 2
    for i, si in enumerate(s):
        if si < box.l:
            u[i] = (-hl + si, -hw)
        elif si < box.l + box.w:
            u[i] = (hl, -hw + si - box.l)
        elif si < 2 * box.l + box.w:
            u[i] = (hl - (si - box.l - box.w), hw)
        else:
            u[i] = (-hl, hw - (si - 2 * box.l - box.w))
    z = rng.uniform(box.cz - box.h / 2, box.cz + box.h / 2, size=n)
    return np.concatenate([u @ rot2(box.yaw).T, z[:, None]], axis=1)


def _doppler(rng, xyz_sensor: np.ndarray, v_obj_sensor: np.ndarray, v_ego_sensor: np.ndarray, sigma: float):
    """Measured radial velocity and its ego-compensated counterpart.

    ``v_r = (v_obj - v_ego) . u + noise`` is what a moving sensor observes;
    ``v_rc = v_r + v_ego . u`` removes the ego motion again.
    """
    rng_ = np.linalg.norm(xyz_sensor, axis=1, keepdims=True)
    u = xyz_sensor / np.maximum(rng_, 1e-9)
    ego_proj = u[:, :2] @ v_ego_sensor
    v_r = np.einsum("ij,ij->i", u[:, :2], v_obj_sensor) - ego_proj
    if sigma > 0:
        v_r = v_r + rng.normal(0, sigma, size=len(v_r))
    return v_r, v_r + ego_proj


def generate_frame(cfg: SceneConfig, seed: int, frame_id: int | None = None) -> RadarFrame:
    """Deterministic synthetic multi-scan radar frame for ``(cfg, seed)``."""
    rng = np.random.default_rng(seed)
    poses, ego_vels = _ego_poses(rng, cfg)
    objects = _place_objects(rng, cfg)
    pose0 = poses[0]
    # objects are placed in the newest sensor frame; express their motion in world
    world_objs = []
    for box, vel in objects:
        c_w = se2_apply(pose0, np.array([[box.cx, box.cy]]))[0]
        v_w = rot2(pose0[2]) @ vel
        world_objs.append((box, c_w, v_w, box.yaw + pose0[2]))

    scans = []
    for age, (pose, v_ego_w) in enumerate(zip(poses, ego_vels)):
        v_ego = rot2(pose[2]).T @ v_ego_w
        rows = []
        for box, c_w, v_w, yaw_w in world_objs:
            center_now = c_w - v_w * age * cfg.scan_dt
            c_s = se2_inverse_apply(pose, center_now[None])[0]
            dist = float(np.hypot(*c_s))
            lam = cfg.points_at_ref[box.cls] * min(1.0, cfg.ref_range / max(dist, 1e-3))
            n = int(rng.poisson(lam)) if lam > 0 else 0
            if age == 0:
                n = max(n, cfg.min_points_per_object)
            if n == 0:
                continue
            local_box = replace(box, cx=0.0, cy=0.0, yaw=yaw_w - pose[2])
            offs = _surface_points(rng, local_box, n)
            xyz = np.concatenate([offs[:, :2] + c_s, offs[:, 2:]], axis=1)
            v_obj = np.broadcast_to(rot2(pose[2]).T @ v_w, (n, 2))
            v_r, v_rc = _doppler(rng, xyz, v_obj, v_ego, cfg.doppler_noise)
            rcs = rng.normal(cfg.rcs_mean[box.cls], cfg.rcs_std, size=n)
            rows.append(np.column_stack([xyz, rcs, v_r, v_rc, np.zeros(n)]))
        n_clutter = int(rng.poisson(cfg.clutter_rate))
        if n_clutter:
            xyz = np.column_stack([rng.uniform(*cfg.x_range, size=n_clutter),
                                   rng.uniform(*cfg.y_range, size=n_clutter),
                                   rng.uniform(cfg.z_range[0], cfg.z_range[1], size=n_clutter)])
            v_r, v_rc = _doppler(rng, xyz, np.zeros((n_clutter, 2)), v_ego, cfg.doppler_noise)
            rcs = rng.normal(-5.0, 5.0, size=n_clutter)
            rows.append(np.column_stack([xyz, rcs, v_r, v_rc, np.zeros(n_clutter)]))
        pts = np.concatenate(rows, axis=0) if rows else np.zeros((0, POINT_DIM))
        scans.append(RadarFrame(frame_id if frame_id is not None else seed, pts))

    boxes = [b for b, _ in objects]
    scans[0].boxes = boxes
    if cfg.mask_grid is not None:
        occ = rasterize_boxes(boxes, cfg.mask_grid)
        scans[0].occupancy_mask = occ
        scans[0].free_road_mask = raycast_free_road(occ, cfg.mask_grid.origin_cell(), cfg.n_rays)
    frame = accumulate_scans(scans, poses, cfg.n_scans)
    return crop(frame, cfg.x_range, cfg.y_range, cfg.z_range)


def rasterize_boxes(boxes: list[BoxLabel], grid: GridSpec) -> np.ndarray:
    """Cells whose centres fall inside a box footprint."""
    occ = np.zeros((grid.H, grid.W), dtype=bool)
    for b in boxes:
        corners = box_corners(*b.bev)
        lo = grid.cell_of(corners.min(axis=0, keepdims=True))[0]
        hi = grid.cell_of(corners.max(axis=0, keepdims=True))[0]
        gx, gy = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij")
        cells = np.stack([gx.ravel(), gy.ravel()], axis=1)
        inside = points_in_box(grid.cell_center(cells), *b.bev)
        occ[cells[inside, 0], cells[inside, 1]] = True
    return occ


# ----------------------------------------------------------------- files

FRAME_MAGIC = b"DRFR"
FRAME_VERSION = 1


class FrameFormatError(ValueError):
    pass


class BadMagicError(FrameFormatError):
    pass


class VersionMismatchError(FrameFormatError):
    pass


class TruncatedFileError(FrameFormatError):
    pass


def encode_mask(mask: np.ndarray) -> bytes:
    h, w = mask.shape
    return struct.pack("<II", h, w) + np.packbits(mask.astype(bool).ravel(), bitorder="little").tobytes()


def decode_mask(buf: bytes, pos: int) -> tuple[np.ndarray, int]:
    if pos + 8 > len(buf):
        raise TruncatedFileError("truncated mask header")
    h, w = struct.unpack_from("<II", buf, pos)
    pos += 8
    nbytes = (h * w + 7) // 8
    if pos + nbytes > len(buf):
        raise TruncatedFileError("truncated mask data")
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=pos), bitorder="little")
    return bits[:h * w].reshape(h, w).astype(bool), pos + nbytes


MASK_MAGIC = b"DRMK"


def encode_masks(free: np.ndarray | None, occupancy: np.ndarray | None) -> bytes:
    """Standalone mask file: magic, version, the frame file's flag byte and bit-packed masks."""
    out = [MASK_MAGIC, struct.pack("<I", FRAME_VERSION),
           bytes([(free is not None) | ((occupancy is not None) << 1)])]
    out += [encode_mask(m) for m in (free, occupancy) if m is not None]
    return b"".join(out)


def decode_masks(buf: bytes) -> tuple[np.ndarray | None, np.ndarray | None]:
    if buf[:4] != MASK_MAGIC:
        raise BadMagicError("bad mask file magic")
    if len(buf) < 9:
        raise TruncatedFileError("truncated mask file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FRAME_VERSION:
        raise VersionMismatchError(f"mask file version {version}, expected {FRAME_VERSION}")
    flags, pos = buf[8], 9
    free = occ = None
    if flags & 1:
        free, pos = decode_mask(buf, pos)
    if flags & 2:
        occ, pos = decode_mask(buf, pos)
    return free, occ


def encode_frame(frame: RadarFrame) -> bytes:
    out = [FRAME_MAGIC, struct.pack("<IQ", FRAME_VERSION, frame.frame_id),
           struct.pack("<3d", *frame.ego_pose), struct.pack("<I", frame.n_scans),
           struct.pack("<I", frame.N), np.ascontiguousarray(frame.points, dtype="<f4").tobytes(),
           struct.pack("<I", len(frame.boxes))]
    for b in frame.boxes:
        # eighth float is reserved (written as 0)
        out.append(struct.pack("<8fB", b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, 0.0, b.cls))
    flags = (frame.free_road_mask is not None) | ((frame.occupancy_mask is not None) << 1)
    out.append(bytes([flags]))
    if frame.free_road_mask is not None:
        out.append(encode_mask(frame.free_road_mask))
    if frame.occupancy_mask is not None:
        out.append(encode_mask(frame.occupancy_mask))
    return b"".join(out)


def decode_frame(buf: bytes) -> RadarFrame:
    if len(buf) < 4 or buf[:4] != FRAME_MAGIC:
        raise BadMagicError("bad magic")
    try:
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != FRAME_VERSION:
            raise VersionMismatchError(f"frame version {version}, expected {FRAME_VERSION}")
        (frame_id,) = struct.unpack_from("<Q", buf, 8)
        pose = struct.unpack_from("<3d", buf, 16)
        n_scans, n = struct.unpack_from("<II", buf, 40)
        pos = 48
        if pos + 28 * n > len(buf):
            raise TruncatedFileError("truncated point block")
        pts = np.frombuffer(buf, dtype="<f4", count=7 * n, offset=pos).reshape(n, 7).astype(np.float64)
        pos += 28 * n
        (nb,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        boxes = []
        for _ in range(nb):
            vals = struct.unpack_from("<7f", buf, pos)
            cls = buf[pos + 32] if pos + 32 < len(buf) else None
            if cls is None:
                raise TruncatedFileError("truncated box block")
            boxes.append(BoxLabel(*(float(v) for v in vals), cls=int(cls)))
            pos += 33
        if pos >= len(buf):
            raise TruncatedFileError("missing mask flags")
        flags = buf[pos]
        pos += 1
        free = occ = None
        if flags & 1:
            free, pos = decode_mask(buf, pos)
        if flags & 2:
            occ, pos = decode_mask(buf, pos)
    except struct.error as exc:
        raise TruncatedFileError("truncated frame file") from exc
    return RadarFrame(int(frame_id), pts, tuple(pose), boxes, int(n_scans), free, occ)


def write_frame(frame: RadarFrame, path) -> None:
    Path(path).write_bytes(encode_frame(frame))


def read_frame(path) -> RadarFrame:
    return decode_frame(Path(path).read_bytes())


def quantize(frame: RadarFrame) -> RadarFrame:
    """The frame as it reads back from a file (points and boxes stored as float32)."""
    return decode_frame(encode_frame(frame))


# ----------------------------------------------------------------- datasets

MANIFEST = "manifest.json"


def write_dataset(frames: list[RadarFrame], out_dir, splits: list[str]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for frame, split in zip(frames, splits):
        name = f"frame_{frame.frame_id:06d}.drfr"
        write_frame(frame, out / name)
        entries.append({"frame_id": frame.frame_id, "file": name, "split": split})
    (out / MANIFEST).write_text(json.dumps({"version": 1, "frames": entries}, indent=1))
    return out


def read_dataset(root, split: str | None = None) -> list[RadarFrame]:
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text())
    return [read_frame(root / e["file"]) for e in manifest["frames"] if split is None or e["split"] == split]
