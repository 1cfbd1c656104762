"""AdamW with decoupled weight decay (Adam when ``weight_decay=0``)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .nn import Parameter


class FrozenParameterError(RuntimeError):
    """An optimizer was asked to update a frozen parameter."""


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


class AdamW:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        for i, p in enumerate(self.params):
            if getattr(p, "frozen", False):
                raise FrozenParameterError(f"parameter #{i} {p.shape} is frozen and cannot be optimized")
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        st = self.state
        for i, p in enumerate(self.params):
            if getattr(p, "frozen", False):
                raise FrozenParameterError(f"parameter #{i} became frozen after optimizer construction")
            if p.grad is None:
                raise ValueError(f"parameter #{i} {p.shape} has no gradient; run backward() first")
            if p.grad.shape != p.shape:
                raise ValueError(f"parameter #{i}: grad shape {p.grad.shape} != {p.shape}")
        st.step += 1
        t = st.step
        bc1 = 1.0 - st.beta1 ** t
        bc2 = 1.0 - st.beta2 ** t
        dt = None
        for i, p in enumerate(self.params):
            dt = p.dtype
            g = p.grad.astype(dt, copy=False)
            m = st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g
            v = st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + st.eps)
            data = p.data
            if st.weight_decay:
                data = data * (1.0 - st.lr * st.weight_decay)
            p.data = (data - st.lr * update).astype(dt, copy=False)

    def state_arrays(self, prefix: str = "optim") -> Dict[str, np.ndarray]:
        out = {f"{prefix}.step": np.array([self.state.step], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"{prefix}.m.{i}"] = m
            out[f"{prefix}.v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], prefix: str = "optim") -> None:
        self.state.step = int(arrays[f"{prefix}.step"][0])
        for i, p in enumerate(self.params):
            m = arrays[f"{prefix}.m.{i}"]
            v = arrays[f"{prefix}.v.{i}"]
            if m.shape != p.shape or v.shape != p.shape:
                raise ValueError(f"optimizer moment {i} shape mismatch with parameter {p.shape}")
            self.state.m[i] = m.astype(p.dtype)
            self.state.v[i] = v.astype(p.dtype)


def adamw_step(optimizer: AdamW) -> None:
    optimizer.step()
