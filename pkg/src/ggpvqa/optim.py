"""AdamW with readable first-moment state, and a linear warm-up schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import NonFiniteError, Tensor


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter mapping.

    ``m`` is the raw exponential moving average of gradients.  It is what the
    perturbation engine reads through :meth:`first_moment`, so it is never
    stored bias-corrected.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.02):
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError(f"betas must lie in (0, 1), got {beta1}, {beta2}")
        if lr <= 0 or eps <= 0 or weight_decay < 0:
            raise ValueError("lr and eps must be positive, weight_decay non-negative")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def first_moment(self, name: str) -> np.ndarray:
        """Copy of the raw first moment for ``name`` as of the last step."""
        try:
            return self.m[name].copy()
        except KeyError:
            raise KeyError(f"parameter {name!r} is not registered with the optimizer") from None

    def step(self, lr: float | None = None, grads: Mapping[str, np.ndarray] | None = None) -> None:
        """One update.  Gradients come from ``grads`` or each parameter's ``.grad``.

        A parameter with no gradient is treated as having a zero gradient.
        """
        lr = self.lr if lr is None else lr
        gmap = {}
        for k, p in self.params.items():
            g = p.grad if grads is None else grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.shape:
                raise ValueError(f"gradient for {k!r} has shape {g.shape}, parameter {p.shape}")
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter {k!r}")
            gmap[k] = g
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = gmap[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass(frozen=True)
class WarmupSchedule:
    """Linear warm-up from ``base_lr / W`` to ``base_lr`` then constant."""

    total_steps: int
    warmup_fraction: float
    base_lr: float

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")

    @property
    def warmup_steps(self) -> int:
        # tolerance keeps e.g. 0.05 * 60 from rounding up to 4
        return math.ceil(self.warmup_fraction * self.total_steps - 1e-9)

    def lr_at(self, step: int) -> float:
        if step < 0 or step > self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        w = self.warmup_steps
        if step < w:
            return self.base_lr * (step + 1) / w
        return self.base_lr
