"""Adam with decoupled weight decay, plus warmup/cosine value schedules."""

from __future__ import annotations

import numpy as np

from ..numerics import Tensor


class AdamW:
    """Per-parameter moment tracking; decay applies only to matrices.

    Bias and gain vectors (rank < 2) are excluded from weight decay, the
    usual transformer convention.
    """

    def __init__(self, params: list[Tensor], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] *= self.beta1
            self.m[i] += (1.0 - self.beta1) * g
            self.v[i] *= self.beta2
            self.v[i] += (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"opt.t": np.array([float(self.t)])}
        for i in range(len(self.params)):
            out[f"opt.m.{i}"] = self.m[i]
            out[f"opt.v.{i}"] = self.v[i]
        return out


def cosine_values(
    base: float,
    final: float,
    total_steps: int,
    warmup_steps: int = 0,
    warmup_start: float = 0.0,
) -> np.ndarray:
    """Per-step schedule: linear warmup to `base`, then cosine to `final`."""
    if warmup_steps >= total_steps:
        warmup_steps = max(total_steps - 1, 0)
    warm = np.linspace(warmup_start, base, warmup_steps, endpoint=False)
    rest = total_steps - warmup_steps
    i = np.arange(rest)
    tail = final + 0.5 * (base - final) * (1.0 + np.cos(np.pi * i / max(rest - 1, 1)))
    return np.concatenate([warm, tail])
