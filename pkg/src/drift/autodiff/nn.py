"""Parameter registry and the small set of layers every path shares."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


class Module:
    """Attribute-based parameter tree with hierarchical dotted names."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per parameter name; unreached parameters report zeros."""
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for n, p in self.named_parameters()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"checkpoint mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        self.w = Parameter(_uniform(rng, (d_in, d_out), bound, dtype))
        self.b = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d, dtype=dtype))
        self.beta = Parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng, dtype=np.float32):
        self.fc1 = Linear(d, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def _groups(batch: np.ndarray) -> list[tuple[int, np.ndarray]]:
    ids = np.unique(batch)
    return [(int(b), np.flatnonzero(batch == b)) for b in ids]


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head projections.

    When batch ids are given, queries only attend to keys of the same batch
    element; queries without any key get a zero attention output.
    """

    def __init__(self, d: int, heads: int, rng, dtype=np.float32):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(d, d, rng, dtype)
        self.wk = Linear(d, d, rng, dtype)
        self.wv = Linear(d, d, rng, dtype)
        self.wo = Linear(d, d, rng, dtype)

    def _attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        lq, d = q.shape
        lk = k.shape[0]
        h = self.heads
        dh = d // h
        qh = F.transpose(F.reshape(q, (lq, h, dh)), (1, 0, 2))
        kh = F.transpose(F.reshape(k, (lk, h, dh)), (1, 2, 0))
        vh = F.transpose(F.reshape(v, (lk, h, dh)), (1, 0, 2))
        scores = F.mul(F.matmul(qh, kh), 1.0 / np.sqrt(dh))
        attn = F.softmax(scores, axis=-1)
        out = F.matmul(attn, vh)
        return F.reshape(F.transpose(out, (1, 0, 2)), (lq, d))

    def forward(self, xq: Tensor, xkv: Tensor, q_batch=None, kv_batch=None) -> Tensor:
        q, k, v = self.wq(xq), self.wk(xkv), self.wv(xkv)
        if q_batch is None or kv_batch is None or (
                len(np.unique(q_batch)) <= 1 and np.array_equal(np.unique(q_batch), np.unique(kv_batch))):
            if xkv.shape[0] == 0:
                return self.wo(F.mul(q, 0.0))
            return self.wo(self._attend(q, k, v))
        parts, rows = [], []
        kv_groups = dict(_groups(np.asarray(kv_batch)))
        for b, qi in _groups(np.asarray(q_batch)):
            ki = kv_groups.get(b)
            if ki is None:
                continue
            parts.append(self._attend(F.take_rows(q, qi), F.take_rows(k, ki), F.take_rows(v, ki)))
            rows.append(qi)
        if not parts:
            return self.wo(F.mul(q, 0.0))
        merged = F.scatter_rows(F.concat(parts, axis=0), np.concatenate(rows), q.shape[0])
        return self.wo(merged)
