"""Gradient-guided weight perturbation.

Each training step, targeted weights are nudged along the optimizer's moving
average of past gradients, clipped to a relative margin around their current
values, used for the forward/backward pass, and then restored before the
optimizer applies the gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import NonFiniteError, Tensor, backward, current_tape
from .optim import AdamW

# below this a moment or weight tensor is treated as absent
NORM_FLOOR = 1e-12


class PerturbationError(RuntimeError):
    pass


@dataclass
class PerturbationConfig:
    """Hyperparameters and targeting for the perturbation.

    ``target`` is a comma-separated list of parameter-name prefixes; a
    parameter is perturbed when its name equals a prefix or starts with
    ``prefix + "."``.
    """

    delta: float = 0.05
    epsilon: float = 0.001
    adaptive: bool = True
    fixed_ratio: float = 0.05
    target: str = "visual"
    pretrain: bool = True
    finetune: bool = True

    def __post_init__(self):
        # delta = 0 is allowed: it is the zero-perturbation identity
        if self.delta < 0 or self.epsilon <= 0 or self.fixed_ratio <= 0:
            raise ValueError("delta must be >= 0, epsilon and fixed_ratio > 0")
        if not self.prefixes:
            raise ValueError("target selects nothing")

    @property
    def prefixes(self) -> tuple[str, ...]:
        return tuple(p.strip() for p in self.target.split(",") if p.strip())

    def selects(self, name: str) -> bool:
        return any(name == p or name.startswith(p + ".") for p in self.prefixes)

    def enabled_for(self, phase: str) -> bool:
        if phase == "pretrain":
            return self.pretrain
        if phase == "finetune":
            return self.finetune
        raise ValueError(f"unknown phase {phase!r}")


class ParameterSnapshot(dict):
    """Deep copies of selected parameter values, keyed by name."""

    @classmethod
    def take(cls, params: Mapping[str, Tensor], names) -> "ParameterSnapshot":
        return cls((n, params[n].data.copy()) for n in names)

    def restore(self, params: Mapping[str, Tensor]) -> None:
        for n, buf in self.items():
            params[n].data[...] = buf


@dataclass
class PerturbationReport:
    norms: dict[str, float] = field(default_factory=dict)
    clip_fractions: dict[str, float] = field(default_factory=dict)
    cosines: dict[str, float] = field(default_factory=dict)

    @property
    def mean_norm(self) -> float:
        return float(np.mean(list(self.norms.values()))) if self.norms else 0.0

    @property
    def mean_clip_fraction(self) -> float:
        return float(np.mean(list(self.clip_fractions.values()))) if self.clip_fractions else 0.0


def compute_perturbation(theta: np.ndarray, moment: np.ndarray, cfg: PerturbationConfig) -> np.ndarray:
    """Raw (unclipped) perturbation for one parameter tensor.

    Adaptive: ``delta * ||theta|| / ||moment|| * moment``.  Fixed:
    ``fixed_ratio * moment``.  Zero when either norm is below ``NORM_FLOOR``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    moment = np.asarray(moment, dtype=np.float64)
    if theta.shape != moment.shape:
        raise ValueError(f"theta shape {theta.shape} does not match moment shape {moment.shape}")
    m_norm = np.linalg.norm(moment)
    t_norm = np.linalg.norm(theta)
    if m_norm < NORM_FLOOR or t_norm < NORM_FLOOR:
        return np.zeros_like(theta)
    if cfg.adaptive:
        return (cfg.delta * t_norm / m_norm) * moment
    return cfg.fixed_ratio * moment


def clip_and_apply(theta: np.ndarray, r: np.ndarray, epsilon: float) -> np.ndarray:
    """``theta + clip(r, -epsilon*|theta|, epsilon*|theta|)`` elementwise."""
    theta = np.asarray(theta, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if theta.shape != r.shape:
        raise ValueError(f"theta shape {theta.shape} does not match perturbation shape {r.shape}")
    bound = epsilon * np.abs(theta)
    return theta + np.clip(r, -bound, bound)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a.ravel(), b.ravel()) / (na * nb), -1.0, 1.0))


def perturbed_training_step(model, batch, loss_fn: Callable[[object, object], Tensor],
                            optimizer: AdamW, cfg: PerturbationConfig | None,
                            phase: str = "pretrain", lr: float | None = None
                            ) -> tuple[float, PerturbationReport]:
    """One optimizer step, with loss and gradients taken at perturbed weights.

    ``model.params`` maps names to tensors; ``loss_fn(model, batch)`` returns a
    scalar tensor.  With ``cfg`` None or disabled for ``phase`` this is a
    plain step.
    """
    params = model.params
    report = PerturbationReport()
    snapshot = ParameterSnapshot()
    if cfg is not None and cfg.enabled_for(phase):
        targets = [n for n in params if cfg.selects(n)]
        if not targets:
            raise ValueError(f"target {cfg.target!r} selects no parameters")
        snapshot = ParameterSnapshot.take(params, targets)
        for n in targets:
            theta = snapshot[n]
            moment = optimizer.first_moment(n)
            r = compute_perturbation(theta, moment, cfg)
            bound = cfg.epsilon * np.abs(theta)
            report.norms[n] = float(np.linalg.norm(r))
            report.clip_fractions[n] = float(np.mean(np.abs(r) > bound))
            report.cosines[n] = _cosine(r, moment)
            params[n].data[...] = clip_and_apply(theta, r, cfg.epsilon)

    optimizer.zero_grad()
    try:
        loss = loss_fn(model, batch)
        value = loss.item()
        if not np.isfinite(value):
            current_tape().clear()
            detail = ", ".join(f"{k}={v:.3e}" for k, v in report.norms.items()) or "none"
            raise PerturbationError(
                f"non-finite loss {value} at perturbed weights; pre-clip norms: {detail}")
        backward(loss)
    except NonFiniteError as exc:
        raise PerturbationError(str(exc)) from exc
    finally:
        snapshot.restore(params)
    optimizer.step(lr)
    return value, report
