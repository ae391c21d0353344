"""Order-sensitive aggregation of a slice stack into one 2D image.

The main encoder collapses an ordered sequence of T slices into a single
"dynamic image" by a weighted sum whose coefficients come from harmonic
numbers. The weighting is the closed form of one subgradient step, taken at
the origin, of a ranking objective that asks later slices to score higher
than earlier ones; two brute-force oracles for that derivation live here too
so the closed form never has to be trusted blindly.

Five order-insensitive (or weakly order-sensitive) baselines are provided
for comparison: per-pixel max, per-pixel mean, global average, stochastic
sampling, and a temporal pyramid of window means.

Coefficients and aggregations are computed in float64; stored image payloads
are float32.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CorruptError, NumericError, ShapeError
from .volume import PlanarImage, Volume, load_pfm, save_pfm
from . import volume as _volume

BASELINE_METHODS = ("max", "mean", "gap", "stochastic", "spp")
ENCODING_METHODS = ("arp",) + BASELINE_METHODS

_SPP_LEVELS = (1, 2, 4)


@dataclass(frozen=True)
class CoefficientVector:
    """Aggregation weights for a stack of ``t_len`` slices; they sum to zero."""

    t_len: int
    alphas: np.ndarray

    def checksum(self) -> float:
        """Sum of absolute coefficients, used as a sidecar integrity field."""
        return float(np.abs(self.alphas).sum())


@dataclass(eq=False)
class DynamicImage:
    """A single-image summary of a slice stack plus how it was produced."""

    payload: PlanarImage
    method: str
    source_t_len: int
    seed: Optional[int] = None


@dataclass(frozen=True)
class RankPoolProblem:
    """Hyperparameters of the explicit ranking objective used by the oracle."""

    reg_lambda: float = 0.0
    step_size: float = 0.1
    steps: int = 1

    def __post_init__(self):
        if self.reg_lambda < 0:
            raise ValueError(f"reg_lambda must be >= 0, got {self.reg_lambda}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


def harmonic(t: int) -> float:
    """t-th harmonic number: sum of 1/i for i in 1..t, with harmonic(0) = 0."""
    if t < 0:
        raise ValueError(f"harmonic number undefined for t={t}")
    if t == 0:
        return 0.0
    return float(np.sum(1.0 / np.arange(1, t + 1, dtype=np.float64)))


def arp_coefficients(t_len: int) -> CoefficientVector:
    """Closed-form aggregation coefficients for a stack of ``t_len`` slices.

    alpha_t = 2*(T - t + 1) - (T + 1)*(H_T - H_{t-1}), with H the harmonic
    numbers. The coefficients always sum to zero, which makes the encoder
    invariant to adding a constant image to every slice.
    """
    if t_len < 1:
        raise ValueError(f"need at least one slice, got t_len={t_len}")
    T = t_len
    # H[j] = j-th harmonic number, j = 0..T
    H = np.concatenate(([0.0], np.cumsum(1.0 / np.arange(1, T + 1, dtype=np.float64))))
    t = np.arange(1, T + 1, dtype=np.float64)
    alphas = 2.0 * (T - t + 1.0) - (T + 1.0) * (H[T] - H[(t - 1).astype(int)])
    return CoefficientVector(T, alphas)


def _stack(slices_: Sequence[PlanarImage]) -> np.ndarray:
    if not slices_:
        raise ShapeError("cannot encode an empty slice list")
    arrays = [s.values for s in slices_]
    first = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != first:
            raise ShapeError(f"slice {i} has shape {a.shape}, expected {first}")
    return np.stack(arrays).astype(np.float64)


def encode_arp(slices_: Sequence[PlanarImage]) -> DynamicImage:
    """Weighted-sum encoding of an ordered slice stack.

    Element-wise: out = sum_t alpha_t * slice_t. Slices are used as given;
    callers wanting the standard pipeline normalise the volume first.
    """
    stack = _stack(slices_)
    coeffs = arp_coefficients(stack.shape[0])
    out = np.tensordot(coeffs.alphas, stack, axes=(0, 0))
    return DynamicImage(PlanarImage(out.astype(np.float32)), "arp", stack.shape[0])


def encode_baseline(
    slices_: Sequence[PlanarImage], method: str, seed: Optional[int] = None
) -> DynamicImage:
    """One of the comparison poolings, applied along the slice axis.

    max/mean are per-pixel reductions; gap broadcasts the scalar mean of all
    voxels; stochastic samples each pixel from the stack with probability
    proportional to (non-negative) value, uniformly where the stack is all
    zero; spp averages the mean-maps of {1,2,4}-window temporal partitions.
    """
    if method not in BASELINE_METHODS:
        raise ValueError(f"unknown pooling method {method!r}; pick one of {BASELINE_METHODS}")
    stack = _stack(slices_)
    T = stack.shape[0]
    if method == "max":
        out = stack.max(axis=0)
    elif method == "mean":
        out = stack.mean(axis=0)
    elif method == "gap":
        out = np.full(stack.shape[1:], stack.mean())
    elif method == "stochastic":
        if seed is None:
            raise ValueError("stochastic pooling needs an explicit seed")
        out = _stochastic_pool(stack, seed)
    else:  # spp
        maps = []
        for level in _SPP_LEVELS:
            for window in np.array_split(np.arange(T), level):
                if window.size:
                    maps.append(stack[window].mean(axis=0))
        out = np.mean(maps, axis=0)
    kept_seed = seed if method == "stochastic" else None
    return DynamicImage(PlanarImage(out.astype(np.float32)), method, T, kept_seed)


def _stochastic_pool(stack: np.ndarray, seed: int) -> np.ndarray:
    T = stack.shape[0]
    weights = np.clip(stack, 0.0, None)
    totals = weights.sum(axis=0)
    probs = np.where(totals > 0, weights / np.where(totals > 0, totals, 1.0), 1.0 / T)
    cdf = np.cumsum(probs, axis=0)
    u = np.random.default_rng(seed).random(stack.shape[1:])
    idx = np.minimum((u[None, ...] > cdf).sum(axis=0), T - 1)
    return np.take_along_axis(stack, idx[None, ...], axis=0)[0]


def encode(slices_: Sequence[PlanarImage], method: str = "arp", seed=None) -> DynamicImage:
    """Dispatch to :func:`encode_arp` or :func:`encode_baseline` by name."""
    if method == "arp":
        return encode_arp(slices_)
    return encode_baseline(slices_, method, seed)


def encode_volume(v: Volume, method: str = "arp", seed=None) -> DynamicImage:
    """Encode a volume's slices as-is (no normalisation applied here)."""
    return encode(_volume.slices(v), method, seed)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def _prefix_means(stack: np.ndarray) -> np.ndarray:
    T = stack.shape[0]
    denom = np.arange(1, T + 1, dtype=np.float64).reshape((T,) + (1,) * (stack.ndim - 1))
    return np.cumsum(stack, axis=0) / denom


def pairwise_oracle(slices_: Sequence[PlanarImage]) -> PlanarImage:
    """Brute-force sum of prefix-mean differences over all ordered pairs.

    Computes sum_{q > t} (V_q - V_t) with V_t the running mean of the first
    t slices. Deliberately avoids the closed-form coefficients so it can
    serve as an independent check of them.
    """
    stack = _stack(slices_)
    V = _prefix_means(stack)
    T = stack.shape[0]
    out = np.zeros(stack.shape[1:], dtype=np.float64)
    for t in range(T):
        for q in range(t + 1, T):
            out += V[q] - V[t]
    return PlanarImage(out.astype(np.float32))


def rank_pool_oracle(slices_: Sequence[PlanarImage], problem: RankPoolProblem) -> np.ndarray:
    """Subgradient descent on the explicit ranking objective, from d = 0.

    Objective: (lambda/2)*||d||^2 + (2/(T*(T-1))) * sum_{q>t} hinge(1 - <d, V_q> + <d, V_t>)
    with V_t the prefix means, flattened over pixels. Returns the final d.

    With steps=1 and lambda=0 every hinge is active at the origin, so the
    returned direction is proportional to the pairwise-difference sum and
    therefore to the closed-form encoder output.
    """
    stack = _stack(slices_)
    T = stack.shape[0]
    if T < 2:
        raise ValueError(f"rank pooling needs at least 2 slices, got {T}")
    V = _prefix_means(stack).reshape(T, -1)
    pair_w = 2.0 / (T * (T - 1))
    d = np.zeros(V.shape[1], dtype=np.float64)
    for _ in range(problem.steps):
        scores = V @ d
        objective = 0.5 * problem.reg_lambda * float(d @ d)
        grad = problem.reg_lambda * d
        for t in range(T):
            for q in range(t + 1, T):
                margin = 1.0 - scores[q] + scores[t]
                if margin > 0.0:
                    objective += pair_w * margin
                    grad += pair_w * (V[t] - V[q])
        if not np.isfinite(objective):
            raise NumericError(f"rank-pooling objective diverged ({objective})")
        d = d - problem.step_size * grad
    if not np.all(np.isfinite(d)):
        raise NumericError("rank-pooling descent produced non-finite weights")
    return d


# ---------------------------------------------------------------------------
# Dynamic-image persistence: PFM payload + JSON sidecar
# ---------------------------------------------------------------------------


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_dynamic_image(di: DynamicImage, path, extra: Optional[dict] = None) -> None:
    """Write the payload as PFM and a ``<path>.json`` sidecar describing it.

    Sidecar keys: method, T, seed, alpha_checksum (sum of |alpha_t| for the
    weighted-sum method, null otherwise). ``extra`` entries are merged in.
    """
    save_pfm(di.payload, path)
    checksum = arp_coefficients(di.source_t_len).checksum() if di.method == "arp" else None
    sidecar = {
        "method": di.method,
        "T": di.source_t_len,
        "seed": di.seed,
        "alpha_checksum": checksum,
    }
    if extra:
        sidecar.update(extra)
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_dynamic_image(path) -> DynamicImage:
    """Read a PFM + sidecar pair back; verifies the coefficient checksum."""
    payload = load_pfm(path)
    meta = json.loads(sidecar_path(path).read_text())
    method, t_len, seed = meta["method"], int(meta["T"]), meta.get("seed")
    if method == "arp":
        expected = arp_coefficients(t_len).checksum()
        stored = meta.get("alpha_checksum")
        if stored is None or abs(stored - expected) > 1e-9 * max(1.0, expected):
            raise CorruptError(f"{path}: sidecar checksum {stored} != expected {expected}")
    return DynamicImage(payload, method, t_len, seed)
