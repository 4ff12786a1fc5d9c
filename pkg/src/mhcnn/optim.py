"""Training objective, Adam update, and the learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


def l2_loss(predicted: Tensor, target: Tensor) -> Tensor:
    """Half the summed squared error, divided by the batch size N.

    The per-sample squared error is summed over that sample's pixels, so
    duplicating the batch leaves the loss unchanged.
    """
    if predicted.shape != target.shape:
        raise T.TensorError(
            f"l2_loss: shape mismatch {predicted.shape} vs {target.shape}"
        )
    n = predicted.shape[0]
    diff = T.sub(predicted, target)
    return T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / (2.0 * n))


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float) -> "AdamState":
        state = cls(lr=lr)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict) -> None:
    """One Adam update, in place: m and v decay toward the gradient moments,
    parameters move by lr * mhat / (sqrt(vhat) + eps)."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.data.shape:
            raise T.TensorError(
                f"adam_step: gradient shape {g.shape} vs parameter {p.data.shape} ({name})"
            )
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


@dataclass
class LrSchedule:
    """Step decay: rate halves (by default) every ``interval`` epochs."""

    initial: float = 1e-4
    factor: float = 0.5
    interval: int = 30

    def __post_init__(self):
        if self.initial <= 0:
            raise ValueError(f"initial rate must be positive, got {self.initial}")
        if not 0 < self.factor <= 1:
            raise ValueError(f"decay factor must be in (0, 1], got {self.factor}")
        if self.interval < 1:
            raise ValueError(f"decay interval must be >= 1, got {self.interval}")


def schedule_lr(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return schedule.initial * schedule.factor ** (epoch // schedule.interval)
