"""Minimal reverse-mode automatic differentiation on numpy arrays.

Only the operator set the model actually needs: grouped 2D convolution,
elementwise nonlinearities, pooling, affine layers, a couple of losses, and
a handful of glue ops. Each op records a backward closure on a tape; calling
``backward()`` on a scalar result walks the tape in reverse topological
order.

Numeric policy: ops compute in the promoted dtype of their inputs, so a
float32 graph runs float32 end to end (storage and speed) while a float64
graph stays exactly float64, which is what the finite-difference checks
run on. Scalar reductions (losses, bias gradients, pooling means) still
accumulate in float64. The forward pass computes each batch sample with its
own fixed-shape matmul, which makes logits bitwise independent of whatever
else is in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, ShapeError

POOL_KINDS = ("max", "mean", "global_avg")


class Tensor:
    """An n-d array plus the bookkeeping needed for reverse-mode autodiff."""

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None, name: str = ""):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(parents)
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def accumulate(self, g: np.ndarray) -> None:
        # copy on first write so later in-place edits never alias another grad
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Run reverse-mode accumulation from this (scalar) tensor."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
            seed = np.ones_like(self.data)
        self.accumulate(np.asarray(seed, dtype=self.data.dtype))
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _result(data, parents, backward_fn) -> Tensor:
    if _needs_grad(*parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    def backward_fn(go):
        if a.requires_grad:
            a.accumulate(go)
        if b.requires_grad:
            b.accumulate(go)
    return _result(a.data + b.data, (a, b), backward_fn)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of identically shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    def backward_fn(go):
        if a.requires_grad:
            a.accumulate(go * b.data)
        if b.requires_grad:
            b.accumulate(go * a.data)
    return _result(a.data * b.data, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    def backward_fn(go):
        if a.requires_grad:
            a.accumulate(go * c)
    return _result(a.data * c, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    def backward_fn(go):
        if a.requires_grad:
            a.accumulate(go * mask)
    return _result(np.where(mask, a.data, 0), (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    def backward_fn(go):
        if a.requires_grad:
            a.accumulate(go * out * (1.0 - out))
    return _result(out, (a,), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    def backward_fn(go):
        if a.requires_grad:
            a.accumulate(go.reshape(a.shape))
    return _result(a.data.reshape(shape), (a,), backward_fn)


def sum_all(a: Tensor) -> Tensor:
    total = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    def backward_fn(go):
        if a.requires_grad:
            a.accumulate(np.full(a.shape, go, dtype=a.dtype))
    return _result(total, (a,), backward_fn)


def mean_all(a: Tensor) -> Tensor:
    total = np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype)
    n = a.size
    def backward_fn(go):
        if a.requires_grad:
            a.accumulate(np.full(a.shape, go / n, dtype=a.dtype))
    return _result(total, (a,), backward_fn)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out64 = e / e.sum(axis=-1, keepdims=True)
    out = out64.astype(a.dtype)
    def backward_fn(go):
        if a.requires_grad:
            inner = (go * out).sum(axis=-1, keepdims=True)
            a.accumulate((out * (go - inner)).astype(a.dtype))
    return _result(out, (a,), backward_fn)


def weighted_sum(xs: Sequence[Tensor], w: Tensor) -> Tensor:
    """sum_s w[s] * xs[s] for identically shaped tensors and a 1-D weight."""
    if w.data.ndim != 1 or len(xs) != w.data.shape[0]:
        raise ShapeError(f"need one weight per tensor, got {w.shape} for {len(xs)} tensors")
    first = xs[0].shape
    for i, x in enumerate(xs):
        if x.shape != first:
            raise ShapeError(f"weighted_sum: tensor {i} has shape {x.shape}, expected {first}")
    acc = np.zeros(first, dtype=np.float64)
    for x, wi in zip(xs, w.data):
        acc += float(wi) * x.data
    def backward_fn(go):
        for i, x in enumerate(xs):
            if x.requires_grad:
                x.accumulate((go * float(w.data[i])).astype(x.dtype))
        if w.requires_grad:
            gw = np.array([float((go * x.data).sum(dtype=np.float64)) for x in xs])
            w.accumulate(gw.astype(w.dtype))
    return _result(acc.astype(xs[0].dtype), tuple(xs) + (w,), backward_fn)


# ---------------------------------------------------------------------------
# Grouped convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a grouped 2D convolution."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ConfigError(f"invalid conv geometry {self}")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        num_h = h + 2 * self.padding - self.kernel
        num_w = w + 2 * self.padding - self.kernel
        if num_h < 0 or num_w < 0 or num_h % self.stride or num_w % self.stride:
            raise ShapeError(
                f"conv output size ({h}x{w}, K={self.kernel}, pad={self.padding}, "
                f"stride={self.stride}) is not integral"
            )
        return num_h // self.stride + 1, num_w // self.stride + 1


def param_count(spec: ConvSpec) -> int:
    """Weight elements (bias excluded) of a grouped conv: Cin*Cout*K^2/G."""
    return spec.in_channels * spec.out_channels * spec.kernel**2 // spec.groups


def conv2d(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec) -> Tensor:
    """Grouped cross-correlation with zero padding.

    x: (N, Cin, H, W); w: (Cout, Cin/G, K, K); b: (Cout,).
    Output spatial size must divide exactly; see ConvSpec.out_size.
    """
    N, cin, H, W = x.shape
    G, K = spec.groups, spec.kernel
    if cin != spec.in_channels:
        raise ShapeError(f"input has {cin} channels, spec expects {spec.in_channels}")
    if w.shape != (spec.out_channels, cin // G, K, K):
        raise ShapeError(f"weight shape {w.shape} does not match {spec}")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {b.shape} does not match {spec}")
    Ho, Wo = spec.out_size(H, W)
    cig = cin // G
    cog = spec.out_channels // G
    p, s = spec.padding, spec.stride
    if cig == 1 and cog == 1:
        return _depthwise_conv2d(x, w, b, spec, Ho, Wo)

    dtype = np.result_type(x.dtype, w.dtype)
    xp = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::s, ::s]  # (N,Cin,Ho,Wo,K,K)
    # one contiguous column matrix, laid out to serve forward and backward:
    # (G, N, Ho*Wo, cig*K*K)
    cols = np.ascontiguousarray(
        windows.reshape(N, G, cig, Ho, Wo, K, K).transpose(1, 0, 3, 4, 2, 5, 6)
    ).reshape(G, N, Ho * Wo, cig * K * K)
    wmat = w.data.astype(dtype, copy=False).reshape(G, cog, cig * K * K)

    # broadcast batched matmul: every (Ho*Wo, k)@(k, cog) slice has a shape
    # independent of N, which keeps logits bitwise batch-independent
    out = cols @ wmat.transpose(0, 2, 1)[:, None]  # (G, N, Ho*Wo, cog)
    out += b.data.astype(dtype, copy=False).reshape(G, 1, 1, cog)
    out = out.transpose(1, 0, 3, 2).reshape(N, spec.out_channels, Ho, Wo)

    def backward_fn(go):
        gog = np.ascontiguousarray(
            go.astype(dtype, copy=False).reshape(N, G, cog, Ho, Wo).transpose(1, 0, 3, 4, 2)
        ).reshape(G, N * Ho * Wo, cog)
        cols2 = cols.reshape(G, N * Ho * Wo, cig * K * K)
        if w.requires_grad:
            gw = gog.transpose(0, 2, 1) @ cols2  # (G, cog, cig*K*K)
            w.accumulate(gw.reshape(w.shape).astype(w.dtype, copy=False))
        if b.requires_grad:
            b.accumulate(go.sum(axis=(0, 2, 3), dtype=np.float64).astype(b.dtype))
        if x.requires_grad:
            dcols = gog @ wmat  # (G, N*Ho*Wo, cig*K*K)
            dwin = dcols.reshape(G, N, Ho, Wo, cig, K, K).transpose(1, 0, 4, 2, 3, 5, 6)
            dwin = dwin.reshape(N, cin, Ho, Wo, K, K)
            dxp = np.zeros_like(xp)
            for ki in range(K):
                for kj in range(K):
                    dxp[:, :, ki : ki + s * Ho : s, kj : kj + s * Wo : s] += dwin[..., ki, kj]
            dx = dxp[:, :, p : p + H, p : p + W] if p else dxp
            x.accumulate(dx.astype(x.dtype, copy=False))

    return _result(out.astype(x.dtype), (x, w, b), backward_fn)


def _depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec, Ho: int, Wo: int) -> Tensor:
    """Channel-per-group convolution as K^2 broadcast multiply-adds.

    Equivalent to the im2col path but avoids thousands of tiny per-group
    matmuls; elementwise ufuncs keep outputs bitwise batch-independent.
    """
    N, C, H, W = x.shape
    K, p, s = spec.kernel, spec.padding, spec.stride
    dtype = np.result_type(x.dtype, w.dtype)
    xp = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (0, 0), (p, p), (p, p)))
    wd = w.data.astype(dtype, copy=False)
    out = np.broadcast_to(
        b.data.astype(dtype, copy=False)[None, :, None, None], (N, C, Ho, Wo)
    ).copy()
    for ki in range(K):
        for kj in range(K):
            out += wd[:, 0, ki, kj][None, :, None, None] * xp[:, :, ki : ki + s * Ho : s, kj : kj + s * Wo : s]

    def backward_fn(go):
        god = go.astype(dtype, copy=False)
        if w.requires_grad:
            gw = np.empty_like(w.data, dtype=np.float64)
            for ki in range(K):
                for kj in range(K):
                    win = xp[:, :, ki : ki + s * Ho : s, kj : kj + s * Wo : s]
                    gw[:, 0, ki, kj] = (god * win).sum(axis=(0, 2, 3), dtype=np.float64)
            w.accumulate(gw.astype(w.dtype))
        if b.requires_grad:
            b.accumulate(go.sum(axis=(0, 2, 3), dtype=np.float64).astype(b.dtype))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for ki in range(K):
                for kj in range(K):
                    dxp[:, :, ki : ki + s * Ho : s, kj : kj + s * Wo : s] += (
                        wd[:, 0, ki, kj][None, :, None, None] * god
                    )
            dx = dxp[:, :, p : p + H, p : p + W] if p else dxp
            x.accumulate(dx.astype(x.dtype, copy=False))

    return _result(out.astype(x.dtype, copy=False), (x, w, b), backward_fn)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def pool2d(x: Tensor, kind: str, window: Optional[int] = None) -> Tensor:
    """max/mean pooling with a square non-overlapping window, or global_avg.

    max/mean require the window to divide both spatial dims; global_avg
    reduces the spatial dims to 1x1.
    """
    if kind not in POOL_KINDS:
        raise ValueError(f"unknown pooling kind {kind!r}; pick one of {POOL_KINDS}")
    if x.data.ndim != 4:
        raise ShapeError(f"pool2d expects (N, C, H, W), got {x.shape}")
    N, C, H, W = x.shape

    if kind == "global_avg":
        out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)
        def backward_global(go):
            if x.requires_grad:
                x.accumulate(np.broadcast_to(go / (H * W), x.shape).astype(x.dtype))
        return _result(out, (x,), backward_global)

    k = window
    if k is None or k < 1:
        raise ValueError(f"{kind} pooling needs a positive window, got {window}")
    if H % k or W % k:
        raise ShapeError(f"window {k} does not divide spatial dims {H}x{W}")
    Ho, Wo = H // k, W // k
    tiles = x.data.reshape(N, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, k * k)

    if kind == "max":
        idx = tiles.argmax(axis=-1)  # first maximum wins on ties
        out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
        def backward_max(go):
            if x.requires_grad:
                dt = np.zeros_like(tiles)
                np.put_along_axis(dt, idx[..., None], go[..., None], axis=-1)
                dx = dt.reshape(N, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
                x.accumulate(dx)
        return _result(out, (x,), backward_max)

    out = tiles.mean(axis=-1, dtype=np.float64).astype(x.dtype)
    def backward_mean(go):
        if x.requires_grad:
            dt = np.broadcast_to((go / (k * k))[..., None], tiles.shape)
            dx = dt.reshape(N, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
            x.accumulate(dx.astype(x.dtype))
    return _result(out, (x,), backward_mean)


# ---------------------------------------------------------------------------
# Affine layer and losses
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x (N, D), w (D, M), b (M,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match {w.shape}")
    dtype = np.result_type(x.dtype, w.dtype)
    xd = x.data.astype(dtype, copy=False)
    wd = w.data.astype(dtype, copy=False)
    # (N,1,D)@(D,M): per-sample gemm slices of fixed shape (batch-independent)
    out = (xd[:, None, :] @ wd)[:, 0, :] + b.data.astype(dtype, copy=False)
    def backward_fn(go):
        god = go.astype(dtype, copy=False)
        if x.requires_grad:
            x.accumulate((god @ wd.T).astype(x.dtype, copy=False))
        if w.requires_grad:
            w.accumulate((xd.T @ god).astype(w.dtype, copy=False))
        if b.requires_grad:
            b.accumulate(god.sum(axis=0, dtype=np.float64).astype(b.dtype))
    return _result(out.astype(x.dtype, copy=False), (x, w, b), backward_fn)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between row-softmax of logits and integer labels."""
    y = np.asarray(labels)
    if logits.data.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"need (N, M) logits and (N,) labels, got {logits.shape}, {y.shape}")
    M = logits.shape[1]
    if y.min() < 0 or y.max() >= M:
        raise ValueError(f"label out of range [0, {M})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = y.shape[0]
    loss = -logp[np.arange(n), y].mean()
    def backward_fn(go):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(n), y] -= 1.0
            logits.accumulate((float(go) * p / n).astype(logits.dtype))
    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn)


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; ``target`` may be a Tensor or a plain array."""
    tgt = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != tgt.shape:
        raise ShapeError(f"l1_loss: shape mismatch {pred.shape} vs {tgt.shape}")
    diff = pred.data.astype(np.float64) - tgt.data.astype(np.float64)
    loss = np.abs(diff).mean()
    n = pred.size
    def backward_fn(go):
        sign = np.sign(diff) * (float(go) / n)
        if pred.requires_grad:
            pred.accumulate(sign.astype(pred.dtype))
        if tgt.requires_grad:
            tgt.accumulate((-sign).astype(tgt.dtype))
    return _result(np.asarray(loss, dtype=pred.dtype), (pred, tgt), backward_fn)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central differences.

    ``f`` must map a tensor to a scalar tensor. The relative error per
    coordinate is |a - n| / max(|a|, |n|, 1e-12).
    """
    probe = Tensor(x.data.astype(np.float64).copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got output {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("function evaluated to a non-finite value")
    out.backward()
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad.astype(np.float64)

    numeric = np.zeros_like(analytic)
    flat = probe.data.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(probe.data.copy())).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(probe.data.copy())).data)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError("non-finite evaluation while probing")
        numeric.ravel()[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0
