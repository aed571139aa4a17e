"""AdamW with decoupled weight decay."""
from __future__ import annotations

import numpy as np

from .autodiff import Parameter

STATE_PREFIX = "__optim__."


class AdamW:
    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params: dict[str, Parameter] = dict(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        """One update from the current ``.grad`` of every parameter (missing grads count as zero)."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1 - self.lr * self.weight_decay) - upd).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"{STATE_PREFIX}step": np.array([self.t], dtype=np.float64)}
        for k in self.params:
            out[f"{STATE_PREFIX}m.{k}"] = self.m[k]
            out[f"{STATE_PREFIX}v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state[f"{STATE_PREFIX}step"][0])
        for k, p in self.params.items():
            self.m[k] = np.asarray(state[f"{STATE_PREFIX}m.{k}"], dtype=p.data.dtype).reshape(p.shape).copy()
            self.v[k] = np.asarray(state[f"{STATE_PREFIX}v.{k}"], dtype=p.data.dtype).reshape(p.shape).copy()


def split_state(state: dict[str, np.ndarray]) -> tuple[dict, dict]:
    """Separate model weights from optimizer entries stored under the reserved prefix."""
    model = {k: v for k, v in state.items() if not k.startswith(STATE_PREFIX)}
    opt = {k: v for k, v in state.items() if k.startswith(STATE_PREFIX)}
    return model, opt
