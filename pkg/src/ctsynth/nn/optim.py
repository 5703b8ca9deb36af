"""Adam with an optional polynomial learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"
    power: float = 1.0
    total_steps: int = 0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.schedule not in ("constant", "polynomial"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "polynomial" and self.total_steps < 1:
            raise ValueError("polynomial schedule needs total_steps >= 1")

    def lr_at(self, step: int) -> float:
        """Learning rate used by the ``step``-th update (1-based)."""
        if self.schedule == "constant":
            return self.lr
        frac = min(step, self.total_steps) / self.total_steps
        return self.lr * (1.0 - frac) ** self.power


def adam_step(state: AdamState, params, grads):
    """Bias-corrected Adam update applied in place; returns ``params``.

    ``params`` are arrays (or objects with a ``.data`` array), ``grads`` arrays
    of matching shapes.  ``None`` gradients count as zero.
    """
    arrays = [p if isinstance(p, np.ndarray) else p.data for p in params]
    if len(arrays) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
    if len(state.m) != len(arrays):
        raise ValueError("optimizer state was built for a different parameter list")
    state.step += 1
    lr = state.lr_at(state.step)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(a)
        if g.shape != a.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {a.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        a -= update.astype(a.dtype, copy=False)
    return params
