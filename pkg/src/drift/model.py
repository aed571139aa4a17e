"""The assembled network: pillar and point backbones with feature sharing, FPN neck, task head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Module, Tensor, no_grad
from .autodiff import functional as F
from .config import RunConfig
from .frames import POINT_DIM, RadarFrame, rasterize_boxes
from .fusion import DualState, FeatureSharingBlock
from .heads import FPN, CenterHead, Detection, OccupancyHead, decode_detections, head_grid
from .losses import detection_loss, detection_targets, occupancy_loss
from .pillar_path import PillarBlock, PillarBlockConfig
from .pillars import PillarEncoder, pillarize
from .point_path import PointBlock, PointBlockConfig, PointState
from .raycast import raycast_free_road


@dataclass
class ModelOutput:
    batch_size: int
    heat: Tensor | None = None     # (B, H/2, W/2, 3) logits
    reg: Tensor | None = None      # (B, H/2, W/2, 8)
    occ: Tensor | None = None      # (B, H, W) logits
    n_points: np.ndarray | None = None   # (B,) in-grid points per frame


def stack_points(frames: list[RadarFrame], grid) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate the in-grid points of every frame with their batch index."""
    pts, batch = [], []
    for b, f in enumerate(frames):
        p = f.points[grid.in_range(f.points[:, :2])] if f.N else f.points
        pts.append(p)
        batch.append(np.full(len(p), b, dtype=np.int64))
    if not pts:
        return np.zeros((0, POINT_DIM)), np.zeros(0, dtype=np.int64)
    return np.concatenate(pts), np.concatenate(batch)


class DriftModel(Module):
    """Four pillar blocks, optionally paired with point blocks and feature sharing at chosen stages.

    With ``dual_path`` off the point path and every fusion block are absent, so
    the parameter registry holds pillar-path, neck and head weights only.
    """

    def __init__(self, cfg: RunConfig, dtype=np.float32, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        m = cfg.model
        ch = m.widths
        self.cfg = cfg
        self.dtype = dtype
        self.grid = cfg.grid.spec()
        self.encoder = PillarEncoder(POINT_DIM, ch[0], rng, dtype, m.pillar_offsets)
        self.pillar_blocks = [
            PillarBlock(PillarBlockConfig(ch[max(i - 1, 0)], ch[i], m.strides[i], m.transformer[i], m.heads,
                                          m.ffn_mult, m.conv_counts[i], m.max_tokens), rng, dtype)
            for i in range(4)]
        self.point_blocks = []
        self.fusion = []
        if m.dual_path:
            self.point_blocks = [
                PointBlock(PointBlockConfig(POINT_DIM if i == 0 else ch[i - 1], ch[i], m.strides[i], m.point_k,
                                            m.point_encoder_layers if m.transformer[i] else 0), rng, dtype)
                for i in range(4)]
            active = m.fusion.p2v != "off" or m.fusion.v2p != "off"
            self.fusion = [FeatureSharingBlock(ch[i], ch[i], m.fusion, rng, dtype)
                           if active and i + 1 in m.fusion.stages else None for i in range(4)]
        self.neck = FPN((ch[1], ch[2], ch[3]), m.neck_width, rng, dtype)
        if cfg.task == "detection":
            self.head = CenterHead(m.neck_width, m.head_width, rng, dtype)
        else:
            self.head = OccupancyHead(m.neck_width, m.occ_width, rng, dtype)
        self.assign_names()

    @property
    def dual(self) -> bool:
        return bool(self.point_blocks)

    def forward(self, frames: list[RadarFrame]) -> ModelOutput:
        bsz = len(frames)
        points, batch = stack_points(frames, self.grid)
        pillars, _ = pillarize(points, batch, self.grid, self.encoder, self.cfg.model.max_points_per_pillar,
                               self.dtype)
        pts = PointState(points[:, :3], Tensor(points.astype(self.dtype)), batch) if self.dual else None
        stages = []
        for i, block in enumerate(self.pillar_blocks):
            pillars = block(pillars)
            if pts is not None:
                pts = self.point_blocks[i](pts)
                if self.fusion[i] is not None:
                    shared = self.fusion[i](DualState(pts, pillars, i + 1), self.grid)
                    pts, pillars = shared.point, shared.pillar
            stages.append(pillars)
        bev = self.neck(stages[1:], bsz)
        counts = np.bincount(batch, minlength=bsz)
        if self.cfg.task == "detection":
            heat, reg = self.head(bev)
            return ModelOutput(bsz, heat=heat, reg=reg, n_points=counts)
        logits = self.head(bev, (self.grid.H, self.grid.W))
        return ModelOutput(bsz, occ=F.reshape(logits, (bsz, self.grid.H, self.grid.W)), n_points=counts)

    def occupancy_targets(self, frames: list[RadarFrame]) -> np.ndarray:
        shape = (self.grid.H, self.grid.W)
        masks = []
        for f in frames:
            occ = f.occupancy_mask
            if occ is None or occ.shape != shape:
                occ = rasterize_boxes(f.boxes, self.grid)
            masks.append(occ)
        return np.stack(masks) if masks else np.zeros((0, *shape), dtype=bool)

    def free_road_targets(self, frames: list[RadarFrame], occupancy: np.ndarray) -> list[np.ndarray]:
        """Stored free-road masks, re-derived from ``occupancy`` where a frame lacks one on this grid."""
        n_rays = self.cfg.eval.n_rays
        return [f.free_road_mask if f.free_road_mask is not None and f.free_road_mask.shape == occ.shape
                else raycast_free_road(occ, self.grid.origin_cell(), n_rays) for f, occ in zip(frames, occupancy)]

    def loss(self, frames: list[RadarFrame], out: ModelOutput | None = None) -> tuple[Tensor, dict]:
        out = out if out is not None else self(frames)
        t = self.cfg.train
        if self.cfg.task == "detection":
            targets = detection_targets([f.boxes for f in frames], head_grid(self.grid), t.min_radius)
            return detection_loss(out.heat, out.reg, targets, t.w_heat, t.w_reg)
        lo = F.mul(occupancy_loss(out.occ, self.occupancy_targets(frames)), t.w_occ)
        return lo, {"occ": float(lo.data)}

    def decode(self, out: ModelOutput, frame_ids) -> list:
        """Per frame: a detection list, or ``(free_road, occupancy)`` boolean masks.

        A frame without a single in-grid point yields no detections: the head
        would otherwise report its bias prior everywhere.
        """
        ev = self.cfg.eval
        results = []
        if self.cfg.task == "detection":
            heat = F.sigmoid(out.heat).data.astype(np.float64)
            reg = out.reg.data.astype(np.float64)
            hg = head_grid(self.grid)
            for b, fid in enumerate(frame_ids):
                if out.n_points is not None and out.n_points[b] == 0:
                    results.append([])
                    continue
                results.append(decode_detections(heat[b], reg[b], hg, ev.score_thresh, ev.max_dets, fid))
            return results
        prob = F.sigmoid(out.occ).data
        for b in range(out.batch_size):
            occ = prob[b] > ev.occ_threshold
            results.append((raycast_free_road(occ, self.grid.origin_cell(), ev.n_rays), occ))
        return results

    def predict(self, frames: list[RadarFrame], frame_ids=None) -> list:
        frame_ids = list(range(len(frames))) if frame_ids is None else list(frame_ids)
        with no_grad():
            return self.decode(self(frames), frame_ids)


def detections_of(results: list[list[Detection]]) -> list[Detection]:
    return [d for frame in results for d in frame]
