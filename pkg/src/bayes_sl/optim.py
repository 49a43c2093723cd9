"""Adam with bias correction, operating in place on named tensors."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DimensionError, TrainingError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}step": np.array(self.step)}
        for name in self.m:
            out[f"{prefix}m/{name}"] = self.m[name]
            out[f"{prefix}v/{name}"] = self.v[name]
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str) -> None:
        self.step = int(arrays[f"{prefix}step"])
        for key, value in arrays.items():
            if key.startswith(f"{prefix}m/"):
                self.m[key[len(prefix) + 2:]] = np.array(value)
            elif key.startswith(f"{prefix}v/"):
                self.v[key[len(prefix) + 2:]] = np.array(value)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None],
              state: AdamState) -> AdamState:
    """Apply one Adam update to ``params`` in place.

    A missing gradient counts as zero.  All gradients are validated before any
    parameter moves, so a failed step leaves the parameters untouched.
    """
    checked = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}", parameter=name)
        checked[name] = g

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = checked[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Convenience wrapper reading gradients from ``Tensor.grad``."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, {n: p.grad for n, p in self.params.items()}, self.state)
