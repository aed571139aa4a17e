"""Bi-directional feature sharing between the point and pillar paths at one stage.

``v2p`` paints pillar features onto points; ``p2v`` voxelizes point features
onto pillars. Both directions read the same input state, so the block has no
ordering dependence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, Tensor
from .autodiff import functional as F
from .pillars import GridSpec, SparsePillarSet, lookup_features, voxelize_features
from .point_path import PointState

STRATEGIES = ("add", "concat", "attention", "off")


@dataclass
class FusionConfig:
    p2v: str = "attention"
    v2p: str = "attention"
    stages: tuple[int, ...] = (1, 2, 3, 4)
    heads: int = 4

    def __post_init__(self):
        for s in (self.p2v, self.v2p):
            if s not in STRATEGIES:
                raise ValueError(f"unknown fusion strategy {s!r}; expected one of {STRATEGIES}")
        self.stages = tuple(int(s) for s in self.stages)
        if any(s not in (1, 2, 3, 4) for s in self.stages):
            raise ValueError(f"fusion stages must be within 1..4, got {self.stages}")


@dataclass
class DualState:
    point: PointState
    pillar: SparsePillarSet
    stage: int = 0


class _Projector(Module):
    """Linear map between path widths, absent when they already agree."""

    def __init__(self, c_from: int, c_to: int, rng, dtype):
        self.lin = Linear(c_from, c_to, rng, dtype) if c_from != c_to else None

    def forward(self, x: Tensor) -> Tensor:
        return x if self.lin is None else self.lin(x)


def fill_placeholder(pooled: Tensor, coverage: np.ndarray, token: Tensor) -> Tensor:
    """Rows without resident points take the learnable ``token``."""
    cov = coverage[:, None].astype(pooled.dtype)
    return F.add(F.mul(pooled, cov), F.mul(F.reshape(token, (1, -1)), 1.0 - cov))


class PaintFusion(Module):
    """Pillar-to-point: each point gathers its pillar's row, fused by add or concat, then a linear adjust."""

    def __init__(self, c_point: int, c_pillar: int, mode: str, rng, dtype=np.float32):
        if mode not in ("add", "concat"):
            raise ValueError(mode)
        self.mode = mode
        self.proj = _Projector(c_pillar, c_point, rng, dtype)
        self.adjust = Linear(2 * c_point if mode == "concat" else c_point, c_point, rng, dtype)

    def forward(self, state: DualState, grid: GridSpec) -> PointState:
        pt = state.point
        f, _ = lookup_features(pt.coords[:, :2], pt.batch, grid, state.pillar)
        f = self.proj(f)
        fused = F.add(pt.features, f) if self.mode == "add" else F.concat([pt.features, f], axis=1)
        return pt.with_features(self.adjust(fused))


class ScatterFusion(Module):
    """Point-to-pillar: voxelized point features (placeholder where uncovered) fused into pillars."""

    def __init__(self, c_point: int, c_pillar: int, mode: str, rng, dtype=np.float32):
        if mode not in ("add", "concat"):
            raise ValueError(mode)
        self.mode = mode
        self.placeholder = Parameter(np.zeros(c_point, dtype=dtype))
        self.proj = _Projector(c_point, c_pillar, rng, dtype)
        self.adjust = Linear(2 * c_pillar if mode == "concat" else c_pillar, c_pillar, rng, dtype)

    def forward(self, state: DualState, grid: GridSpec) -> SparsePillarSet:
        pt, pl = state.point, state.pillar
        pooled, cov = voxelize_features(pt.coords[:, :2], pt.batch, pt.features, grid, pl)
        g = self.proj(fill_placeholder(pooled, cov, self.placeholder))
        fused = F.add(pl.features, g) if self.mode == "add" else F.concat([pl.features, g], axis=1)
        return pl.with_features(self.adjust(fused))


class _CrossAttention(Module):
    """Post-norm cross-attention: ``LN(x + MHA(x, kv))`` then ``LN(x + FFN(x))``."""

    def __init__(self, c: int, heads: int, rng, dtype, ffn_mult: int = 2):
        self.attn = MultiHeadAttention(c, heads, rng, dtype)
        self.norm1 = LayerNorm(c, dtype)
        self.ffn = FeedForward(c, ffn_mult * c, rng, dtype)
        self.norm2 = LayerNorm(c, dtype)

    def forward(self, x: Tensor, kv: Tensor, q_batch, kv_batch) -> Tensor:
        x = self.norm1(F.add(x, self.attn(x, kv, q_batch, kv_batch)))
        return self.norm2(F.add(x, self.ffn(x)))


class PointQueryAttention(Module):
    """Pillar-to-point: point features query the frame's non-empty pillars."""

    def __init__(self, c_point: int, c_pillar: int, heads: int, rng, dtype=np.float32):
        self.proj = _Projector(c_pillar, c_point, rng, dtype)
        self.block = _CrossAttention(c_point, heads, rng, dtype)

    def forward(self, state: DualState, grid: GridSpec) -> PointState:
        pt, pl = state.point, state.pillar
        if pl.M == 0 or pt.P == 0:
            return pt
        kv = self.proj(pl.features)
        return pt.with_features(self.block(pt.features, kv, pt.batch, pl.batch))


class PillarQueryAttention(Module):
    """Point-to-pillar: pillars query the voxelized point tokens (placeholder where uncovered)."""

    def __init__(self, c_point: int, c_pillar: int, heads: int, rng, dtype=np.float32):
        self.placeholder = Parameter(np.zeros(c_point, dtype=dtype))
        self.proj = _Projector(c_point, c_pillar, rng, dtype)
        self.block = _CrossAttention(c_pillar, heads, rng, dtype)

    def forward(self, state: DualState, grid: GridSpec) -> SparsePillarSet:
        pt, pl = state.point, state.pillar
        if pl.M == 0:
            return pl
        pooled, cov = voxelize_features(pt.coords[:, :2], pt.batch, pt.features, grid, pl)
        kv = self.proj(fill_placeholder(pooled, cov, self.placeholder))
        return pl.with_features(self.block(pl.features, kv, pl.batch, pl.batch))


def _v2p(mode, c_point, c_pillar, heads, rng, dtype):
    if mode == "off":
        return None
    if mode == "attention":
        return PointQueryAttention(c_point, c_pillar, heads, rng, dtype)
    return PaintFusion(c_point, c_pillar, mode, rng, dtype)


def _p2v(mode, c_point, c_pillar, heads, rng, dtype):
    if mode == "off":
        return None
    if mode == "attention":
        return PillarQueryAttention(c_point, c_pillar, heads, rng, dtype)
    return ScatterFusion(c_point, c_pillar, mode, rng, dtype)


class FeatureSharingBlock(Module):
    def __init__(self, c_point: int, c_pillar: int, cfg: FusionConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.to_point = _v2p(cfg.v2p, c_point, c_pillar, cfg.heads, rng, dtype)
        self.to_pillar = _p2v(cfg.p2v, c_point, c_pillar, cfg.heads, rng, dtype)

    def forward(self, state: DualState, grid: GridSpec, order: str = "v2p_first") -> DualState:
        """``order`` only exists so tests can show that evaluation order does not matter."""
        jobs = [("point", self.to_point), ("pillar", self.to_pillar)]
        if order == "p2v_first":
            jobs.reverse()
        out = {"point": state.point, "pillar": state.pillar}
        for key, mod in jobs:
            if mod is not None:
                out[key] = mod(state, grid)
        return DualState(out["point"], out["pillar"], state.stage)
