"""AdamW over named parameter dicts, with a cosine schedule helper."""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .autodiff import Tensor


class AdamW:
    """Decoupled-weight-decay Adam on a {name: Tensor} parameter dict.

    Weight decay applies only to matrices (ndim >= 2); gains and biases are
    exempt. Iteration order is the dict's insertion order, which the
    training loops keep fixed, so updates are bit-reproducible.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros(t.data.size) for k, t in params.items()}
        self._v = {k: np.zeros(t.data.size) for k, t in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        self.step_count += 1
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            wd = self.weight_decay if p.data.ndim >= 2 else 0.0
            kernels.adamw_update(
                p.data.ravel(),
                np.ascontiguousarray(g.ravel()),
                self._m[name],
                self._v[name],
                self.step_count,
                lr,
                self.b1,
                self.b2,
                self.eps,
                wd,
            )


def cosine_lr(base_lr: float, step: int, total_steps: int, floor: float = 0.1) -> float:
    """Cosine decay from base_lr to floor*base_lr over total_steps."""
    if total_steps <= 1:
        return base_lr
    frac = min(step / (total_steps - 1), 1.0)
    lo = base_lr * floor
    return lo + 0.5 * (base_lr - lo) * (1.0 + math.cos(math.pi * frac))
