"""Feature-complexity measurement and the staged-advancement state machine.

Training is gated on a scalar complexity score: the total absolute forward
difference of a feature map, summed over channels. When the monitored
stage's score exceeds its threshold the curriculum advances to the next
stage; thresholds are quantiles of scores collected during a warmup pass.

The state object is immutable; ``advance`` returns a new state, which makes
the machine trivially replayable and keeps stage indices non-decreasing by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, softmax, weighted_sum


def complexity(x) -> float:
    """Sum over channels of the total absolute spatial gradient.

    Uses forward differences with the last column/row contributing zero, so
    constant maps score exactly 0 and the score scales with |a| under x -> a*x.
    A batch (N, C, H, W) input yields the mean of the per-sample scores.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim == 3:
        return _single_complexity(arr)
    if arr.ndim == 4:
        return float(np.mean([_single_complexity(s) for s in arr]))
    raise ValueError(f"complexity expects 2-4 dims, got shape {arr.shape}")


def _single_complexity(chw: np.ndarray) -> float:
    dx = np.abs(chw[:, :, 1:] - chw[:, :, :-1]).sum()
    dy = np.abs(chw[:, 1:, :] - chw[:, :-1, :]).sum()
    return float(dx + dy)


def calibrate_thresholds(samples: Sequence[float], quantiles: Sequence[float]) -> list[float]:
    """Linear-interpolation quantiles of observed complexity scores.

    Quantiles must be strictly increasing and inside (0, 1); the resulting
    thresholds are non-decreasing because the quantile function is monotone.
    """
    data = np.asarray(samples, dtype=np.float64)
    if data.size == 0:
        raise ValueError("cannot calibrate thresholds from zero samples")
    qs = list(quantiles)
    if not qs:
        raise ValueError("need at least one quantile")
    for q in qs:
        if not 0.0 < q < 1.0:
            raise ValueError(f"quantile {q} outside (0, 1)")
    if any(b <= a for a, b in zip(qs, qs[1:])):
        raise ValueError(f"quantiles must be strictly increasing, got {qs}")
    return [float(np.quantile(data, q)) for q in qs]


@dataclass(frozen=True)
class ComplexityScore:
    """One complexity observation at a training step."""

    value: float
    stage: str
    step: int

    def __post_init__(self):
        if self.value < 0:
            raise ValueError(f"complexity is non-negative, got {self.value}")


@dataclass(frozen=True)
class CurriculumState:
    """Current stage pointer, per-stage thresholds, and the observation log."""

    stages: tuple[str, ...]
    thresholds: tuple[float, ...]
    stage_index: int = 1  # 1-based
    history: tuple[ComplexityScore, ...] = ()
    recalibration_events: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        if len(self.stages) != len(self.thresholds):
            raise ValueError(
                f"{len(self.stages)} stages but {len(self.thresholds)} thresholds"
            )
        if not 1 <= self.stage_index <= len(self.stages):
            raise ValueError(f"stage_index {self.stage_index} outside 1..{len(self.stages)}")

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def active_stage(self) -> str:
        return self.stages[self.stage_index - 1]

    @property
    def active_threshold(self) -> float:
        return self.thresholds[self.stage_index - 1]


def advance(state: CurriculumState, score: ComplexityScore) -> tuple[CurriculumState, bool]:
    """Feed one observation to the state machine.

    Advancement requires the score to strictly exceed the active threshold.
    At the last stage the recalibrate flag still fires but the index stays
    put and no event is logged; events therefore coincide exactly with
    index increments.
    """
    if score.stage != state.active_stage:
        raise ValueError(
            f"score is for stage {score.stage!r} but {state.active_stage!r} is being monitored"
        )
    history = state.history + (score,)
    if score.value > state.active_threshold:
        if state.stage_index < state.n_stages:
            events = state.recalibration_events + ((score.step, state.active_stage),)
            new = replace(
                state,
                stage_index=state.stage_index + 1,
                history=history,
                recalibration_events=events,
            )
            return new, True
        return replace(state, history=history), True
    return replace(state, history=history), False


@dataclass(eq=False)
class FusionWeights:
    """Learnable per-stage scores; mixing weights are their softmax."""

    stages: tuple[str, ...]
    scores: Tensor

    def __post_init__(self):
        self.stages = tuple(self.stages)
        if self.scores.shape != (len(self.stages),):
            raise ValueError(
                f"scores shape {self.scores.shape} does not match {len(self.stages)} stages"
            )

    def normalized(self) -> dict[str, float]:
        s = self.scores.data.astype(np.float64)
        e = np.exp(s - s.max())
        w = e / e.sum()
        return {stage: float(wi) for stage, wi in zip(self.stages, w)}


def fuse_stages(features: Mapping[str, Tensor], weights: FusionWeights) -> Tensor:
    """Softmax-weighted sum of equal-length per-stage feature vectors.

    Iteration follows ``weights.stages``, so the result does not depend on
    the ordering of the feature map's keys. Differentiable in both the
    features and the scores.
    """
    vecs = []
    for stage in weights.stages:
        if stage not in features:
            raise KeyError(f"missing fused stage {stage!r}")
        vecs.append(features[stage])
    return weighted_sum(vecs, softmax(weights.scores))
