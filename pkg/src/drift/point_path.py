"""Point branch: farthest point sampling, kNN, transition-down and local vector attention."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import LayerNorm, Linear, Module, Tensor
from .autodiff import functional as F

MASK_LOGIT = -1e9


@dataclass
class PointState:
    coords: np.ndarray      # (P, 3) metres, carried through every stage
    features: Tensor        # (P, C)
    batch: np.ndarray       # (P,) int64 frame index
    stage: int = 0

    @property
    def P(self) -> int:
        return len(self.coords)

    @property
    def C(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: Tensor) -> "PointState":
        return PointState(self.coords, features, self.batch, self.stage)


def farthest_point_sample(coords: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min sampling seeded at index 0; ties pick the lowest index."""
    p = len(coords)
    if m > p:
        raise ValueError(f"cannot sample {m} of {p} points")
    out = np.empty(m, dtype=np.int64)
    if m == 0:
        return out
    d = np.full(p, np.inf)
    cur = 0
    for i in range(m):
        out[i] = cur
        diff = coords - coords[cur]
        d = np.minimum(d, np.einsum("ij,ij->i", diff, diff))
        cur = int(np.argmax(d))
    return out


def knn(query: np.ndarray, base: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest base points per query, nearest first, ties by lower index."""
    if k > len(base):
        raise ValueError(f"k={k} exceeds {len(base)} base points")
    diff = query[:, None, :] - base[None, :, :]
    d2 = np.einsum("qpc,qpc->qp", diff, diff)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def _groups(batch: np.ndarray):
    for b in np.unique(batch):
        yield np.flatnonzero(batch == b)


def knn_batched(query: np.ndarray, q_batch: np.ndarray, base: np.ndarray, b_batch: np.ndarray,
                k: int) -> tuple[np.ndarray, np.ndarray]:
    """kNN restricted to the query's own frame.

    Frames with fewer than ``k`` points pad their neighbour lists by repeating
    the nearest neighbour; ``valid`` flags the real entries.
    """
    idx = np.zeros((len(query), k), dtype=np.int64)
    valid = np.zeros((len(query), k), dtype=bool)
    base_groups = {int(b_batch[g[0]]): g for g in _groups(b_batch)}
    for qi in _groups(q_batch):
        bi = base_groups.get(int(q_batch[qi[0]]))
        if bi is None:
            raise ValueError("query frame has no base points")
        kk = min(k, len(bi))
        local = bi[knn(query[qi], base[bi], kk)]
        idx[qi, :kk] = local
        idx[qi, kk:] = local[:, :1]
        valid[qi, :kk] = True
    return idx, valid


def sample_indices(batch: np.ndarray, coords: np.ndarray, stride: int) -> np.ndarray:
    """Per-frame FPS keeping ``ceil(P_b / stride)`` points; stride 1 keeps the input order."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride == 1:
        return np.arange(len(coords))
    parts = [g[farthest_point_sample(coords[g], math.ceil(len(g) / stride))] for g in _groups(batch)]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


class TransitionDown(Module):
    """FPS subsampling, then max-pool of transformed parent features over each sample's kNN."""

    def __init__(self, c_in: int, c_out: int, stride: int, k: int, rng, dtype=np.float32):
        self.stride = stride
        self.k = k
        self.lin = Linear(c_in, c_out, rng, dtype)
        self.norm = LayerNorm(c_out, dtype)

    def forward(self, state: PointState) -> PointState:
        h = F.gelu(self.norm(self.lin(state.features)))
        sel = sample_indices(state.batch, state.coords, self.stride)
        coords, batch = state.coords[sel], state.batch[sel]
        if len(sel) == 0:
            return PointState(coords, F.getitem(h, slice(0, 0)), batch, state.stage + 1)
        idx, _ = knn_batched(coords, batch, state.coords, state.batch, self.k)
        nb = F.reshape(F.take_rows(h, idx.reshape(-1)), (len(sel), self.k, h.shape[1]))
        return PointState(coords, F.max(nb, axis=1), batch, state.stage + 1)


class _MLP2(Module):
    def __init__(self, d_in: int, d: int, rng, dtype):
        self.fc1 = Linear(d_in, d, rng, dtype)
        self.fc2 = Linear(d, d, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class PointTransformerLayer(Module):
    """Local vector self-attention over kNN with a learned relative-position encoding.

    ``w_ij = softmax_j(gamma(q_i - k_j + delta_ij))`` per channel, where
    ``delta_ij = theta(p_i - p_j)``; the aggregate ``sum_j w_ij * (v_j + delta_ij)``
    sits between an input projection and an output projection with a residual.
    """

    def __init__(self, c: int, k: int, rng, dtype=np.float32):
        self.k = k
        self.lin_in = Linear(c, c, rng, dtype)
        self.norm_in = LayerNorm(c, dtype)
        self.wq = Linear(c, c, rng, dtype)
        self.wk = Linear(c, c, rng, dtype)
        self.wv = Linear(c, c, rng, dtype)
        self.pos = _MLP2(3, c, rng, dtype)
        self.gamma = _MLP2(c, c, rng, dtype)
        self.norm_attn = LayerNorm(c, dtype)
        self.lin_out = Linear(c, c, rng, dtype)
        self.norm_out = LayerNorm(c, dtype)

    def forward(self, state: PointState) -> PointState:
        p, c = state.P, state.C
        if p == 0:
            return state
        x = state.features
        idx, valid = knn_batched(state.coords, state.batch, state.coords, state.batch, self.k)
        k = self.k
        h = F.gelu(self.norm_in(self.lin_in(x)))
        q, kf, v = self.wq(h), self.wk(h), self.wv(h)
        flat = idx.reshape(-1)
        rel = (state.coords[:, None, :] - state.coords[idx]).astype(x.dtype)
        delta = self.pos(Tensor(rel))
        kj = F.reshape(F.take_rows(kf, flat), (p, k, c))
        vj = F.reshape(F.take_rows(v, flat), (p, k, c))
        logits = self.gamma(F.add(F.sub(F.reshape(q, (p, 1, c)), kj), delta))
        if not valid.all():
            bias = np.where(valid, 0.0, MASK_LOGIT).astype(x.dtype)[:, :, None]
            logits = F.add(logits, bias)
        w = F.softmax(logits, axis=1)
        agg = F.sum(F.mul(w, F.add(vj, delta)), axis=1)
        h = F.gelu(self.norm_attn(agg))
        h = self.norm_out(self.lin_out(h))
        return state.with_features(F.gelu(F.add(x, h)))


@dataclass
class PointBlockConfig:
    c_in: int
    c_out: int
    stride: int = 1
    k: int = 8
    encoder_layers: int = 1

    def __post_init__(self):
        if self.stride < 1 or self.k < 1 or self.encoder_layers < 0:
            raise ValueError(f"invalid point block config {self}")


class PointBlock(Module):
    def __init__(self, cfg: PointBlockConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.down = TransitionDown(cfg.c_in, cfg.c_out, cfg.stride, cfg.k, rng, dtype)
        self.layers = [PointTransformerLayer(cfg.c_out, cfg.k, rng, dtype) for _ in range(cfg.encoder_layers)]

    def forward(self, state: PointState) -> PointState:
        state = self.down(state)
        for layer in self.layers:
            state = layer(state)
        return state
