"""Pillar branch: rulebook sparse convolutions and global self-attention over pillar tokens."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autodiff import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .autodiff import functional as F
from .pillars import SparsePillarSet, downsample_coords

# tap k = (di + 1) * 3 + (dj + 1), matching the dense conv2d weight layout
OFFSETS = np.array([(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)], dtype=np.int64)


def submanifold_rules(pillars: SparsePillarSet) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per tap, the (input row, output row) pairs where the tapped neighbour is active."""
    out_rows = np.arange(pillars.M)
    rules = []
    for di, dj in OFFSETS:
        rows = pillars.hash.find(pillars.coords + np.array([0, di, dj]))
        hit = rows >= 0
        rules.append((rows[hit], out_rows[hit]))
    return rules


def strided_rules(pillars: SparsePillarSet, stride: int = 2):
    """Rulebook and output coords for a stride-2 conv: output ``(i, j)`` reads ``(2i+di, 2j+dj)``."""
    child, _, cdims = downsample_coords(pillars.coords, pillars.dims, stride)
    out_rows = np.arange(len(child))
    base = child * np.array([1, stride, stride])
    rules = []
    for di, dj in OFFSETS:
        rows = pillars.hash.find(base + np.array([0, di, dj]))
        hit = rows >= 0
        rules.append((rows[hit], out_rows[hit]))
    return rules, child, cdims


class SparseConv(Module):
    """3x3 sparse convolution weight ``(9 * C_in, C_out)`` plus bias."""

    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float32, mode: str = "submanifold"):
        if mode not in ("submanifold", "strided"):
            raise ValueError(f"unknown sparse conv mode {mode!r}")
        self.mode = mode
        bound = 1.0 / np.sqrt(9 * c_in)
        self.w = Parameter(rng.uniform(-bound, bound, (9 * c_in, c_out)).astype(dtype))
        self.b = Parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, pillars: SparsePillarSet) -> SparsePillarSet:
        if self.mode == "submanifold":
            return submanifold_conv(pillars, self)
        return strided_sparse_conv(pillars, self)


def submanifold_conv(pillars: SparsePillarSet, conv: SparseConv) -> SparsePillarSet:
    out = F.sparse_conv(pillars.features, conv.w, conv.b, submanifold_rules(pillars), pillars.M)
    return pillars.with_features(out)


def strided_sparse_conv(pillars: SparsePillarSet, conv: SparseConv, stride: int = 2) -> SparsePillarSet:
    rules, child, cdims = strided_rules(pillars, stride)
    out = F.sparse_conv(pillars.features, conv.w, conv.b, rules, len(child))
    return SparsePillarSet(out, child, cdims, pillars.scale * stride, pillars.stage)


class ConvNormAct(Module):
    """Sparse conv, per-site layer norm over channels, GELU."""

    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float32, mode: str = "submanifold"):
        self.conv = SparseConv(c_in, c_out, rng, dtype, mode)
        self.norm = LayerNorm(c_out, dtype)

    def forward(self, pillars: SparsePillarSet) -> SparsePillarSet:
        out = self.conv(pillars)
        return out.with_features(F.gelu(self.norm(out.features)))


class PillarTransformerEncoder(Module):
    """Post-norm self-attention + FFN over all pillars of a frame, no positional embedding."""

    def __init__(self, c: int, heads: int, rng, dtype=np.float32, ffn_mult: int = 2, max_tokens: int = 4096):
        self.max_tokens = max_tokens
        self.attn = MultiHeadAttention(c, heads, rng, dtype)
        self.norm1 = LayerNorm(c, dtype)
        self.ffn = FeedForward(c, ffn_mult * c, rng, dtype)
        self.norm2 = LayerNorm(c, dtype)

    def forward(self, pillars: SparsePillarSet) -> SparsePillarSet:
        if pillars.M == 0:
            return pillars
        counts = np.bincount(pillars.batch)
        if counts.max() > self.max_tokens:
            raise ValueError(f"{counts.max()} pillars in one frame exceeds the attention cap {self.max_tokens}")
        x = pillars.features
        x = self.norm1(F.add(x, self.attn(x, x, pillars.batch, pillars.batch)))
        x = self.norm2(F.add(x, self.ffn(x)))
        return pillars.with_features(x)


@dataclass
class PillarBlockConfig:
    c_in: int
    c_out: int
    stride: int = 1
    transformer: bool = True
    heads: int = 4
    ffn_mult: int = 2
    conv_count: int = 1
    max_tokens: int = 4096

    def __post_init__(self):
        if self.stride not in (1, 2) or self.conv_count < 0:
            raise ValueError(f"invalid pillar block config {self}")


class PillarBlock(Module):
    """Optional stride-2 downsample, optional global encoder, then ``conv_count`` submanifold convs."""

    def __init__(self, cfg: PillarBlockConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.down = ConvNormAct(cfg.c_in, cfg.c_out, rng, dtype, "strided") if cfg.stride == 2 else None
        self.proj = Linear(cfg.c_in, cfg.c_out, rng, dtype) if cfg.stride == 1 and cfg.c_in != cfg.c_out else None
        self.encoder = (PillarTransformerEncoder(cfg.c_out, cfg.heads, rng, dtype, cfg.ffn_mult, cfg.max_tokens)
                        if cfg.transformer else None)
        self.convs = [ConvNormAct(cfg.c_out, cfg.c_out, rng, dtype) for _ in range(cfg.conv_count)]

    def forward(self, pillars: SparsePillarSet) -> SparsePillarSet:
        if self.down is not None:
            pillars = self.down(pillars)
        elif self.proj is not None:
            pillars = pillars.with_features(self.proj(pillars.features))
        if self.encoder is not None:
            pillars = self.encoder(pillars)
        for conv in self.convs:
            pillars = conv(pillars)
        return dataclasses.replace(pillars, stage=pillars.stage + 1)
