"""AdamW with global-norm clipping, cosine annealing and an EMA shadow."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from sphemu.autodiff import Tensor
from sphemu.errors import InvalidArgumentError


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Cosine annealing that reaches ``min_lr`` on the last step index."""
    if total_steps <= 1:
        return base_lr
    frac = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


@dataclass
class OptimizerState:
    lr: float = 4e-4
    weight_decay: float = 5e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 0.5
    ema_decay: float = 0.9999
    total_steps: int = 1
    step: int = 0
    skipped_steps: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    ema: dict = field(default_factory=dict)


@dataclass
class StepInfo:
    lr: float
    grad_norm: float
    clip_scale: float
    skipped: bool


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], state: OptimizerState | None = None, **hparams):
        self.params = params
        self.state = state if state is not None else OptimizerState(**hparams)
        if self.state.step < 0:
            raise InvalidArgumentError("step counter must be >= 0")
        for name, p in params.items():
            self.state.exp_avg.setdefault(name, np.zeros_like(p.data))
            self.state.exp_avg_sq.setdefault(name, np.zeros_like(p.data))
            self.state.ema.setdefault(name, p.data.copy())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def current_lr(self) -> float:
        return cosine_lr(self.state.step, self.state.total_steps, self.state.lr)

    def step(self) -> StepInfo:
        st = self.state
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.params.items()}
        norm = global_norm(grads.values())
        lr = self.current_lr()
        if not math.isfinite(norm):
            st.skipped_steps += 1
            return StepInfo(lr, norm, 0.0, True)
        scale = 1.0
        if st.clip_norm is not None and norm > st.clip_norm:
            scale = st.clip_norm / norm
        b1, b2 = st.betas
        st.step += 1
        bc1 = 1.0 - b1**st.step
        bc2 = 1.0 - b2**st.step
        for name, p in self.params.items():
            g = grads[name] * scale
            m = st.exp_avg[name]
            v = st.exp_avg_sq[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - lr * st.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)
            shadow = st.ema[name]
            shadow *= st.ema_decay
            shadow += (1.0 - st.ema_decay) * p.data
        return StepInfo(lr, norm, scale, False)

    def ema_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state.ema.items()}
