"""AdamW with decoupled weight decay, plus the cosine restart schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .autodiff import Tensor
from .errors import NumericError


@dataclass
class OptimState:
    """Per-parameter first/second moment accumulators and step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: OptimState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> np.ndarray:
    """One update of a single parameter array; mutates ``state``, returns new values.

    Weight decay is decoupled: the parameter is shrunk by lr*wd before the
    bias-corrected moment update is applied.
    """
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to the optimizer")
    out = param * (1.0 - lr * weight_decay) if weight_decay else param.copy()
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    out = out - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out.astype(param.dtype)


@dataclass
class AdamW:
    """Tracks OptimState for a named parameter set and applies adamw_step.

    ``decay_exempt`` names (biases, gating scores) skip weight decay, which
    also guarantees that a parameter whose gradient entries are masked to
    zero moves by exactly zero. Parameters whose grad is None are skipped
    entirely; an explicit zero gradient still incurs decay.
    """

    params: Mapping[str, Tensor]
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    decay_exempt: frozenset = frozenset()
    states: dict = field(init=False)

    def __post_init__(self):
        self.decay_exempt = frozenset(self.decay_exempt)
        self.states = {
            name: OptimState(np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in self.params.items()
        }

    def step(self, trainable: Optional[Iterable[str]] = None) -> None:
        allowed = None if trainable is None else set(trainable)
        for name, p in self.params.items():
            if allowed is not None and name not in allowed:
                continue
            if p.grad is None:
                continue
            wd = 0.0 if name in self.decay_exempt else self.weight_decay
            p.data = adamw_step(
                p.data, p.grad, self.states[name],
                lr=self.lr, beta1=self.betas[0], beta2=self.betas[1],
                eps=self.eps, weight_decay=wd,
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def cosine_lr(epoch: int, base_lr: float, min_lr: float = 0.0, period: int = 50) -> float:
    """Cosine annealing restarted every ``period`` epochs.

    Epoch 0 (and every multiple of the period) returns base_lr; halfway
    through a period the rate is the midpoint of base and min.
    """
    if period < 1:
        raise ValueError(f"period must be >= 1, got {period}")
    phase = (epoch % period) / period
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * phase))
