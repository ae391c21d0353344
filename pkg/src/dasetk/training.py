"""End-to-end harness: encode volumes, train under the curriculum, evaluate.

A run is fully determined by (config, seed, dataset): batch order, weight
init, the stochastic pooling draw, and threshold calibration all derive
from the config seed. Epoch 0 is a warmup that trains at stage 1 while
collecting complexity samples; thresholds are their quantiles, after which
the advancement state machine takes over. Entering a stage unfreezes its
attention branch and its fusion score; everything else trains throughout.

Artifacts: history.csv (per epoch), curriculum.csv (per step), metrics.json,
run manifest JSON with a content hash of the encoded inputs, checkpoints in
the manifest+blob format.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, l1_loss, reshape, softmax_cross_entropy
from .curriculum import (
    ComplexityScore,
    CurriculumState,
    advance,
    calibrate_thresholds,
    complexity,
)
from .encoding import encode
from .errors import DivergenceError, ShapeError
from .metrics import MetricsReport, mae as mae_metric, multiclass_report
from .network import Model, ModelSpec, build_model
from .optim import AdamW, cosine_lr
from .volume import Volume, normalize_volume, slices


@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters of one training run. The seed is mandatory."""

    seed: int
    model: ModelSpec = field(default_factory=ModelSpec)
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule_period: int = 50
    min_lr: float = 0.0
    epochs: int = 30
    batch_size: int = 16
    encoding: str = "arp"
    curriculum_quantiles: tuple[float, ...] = (0.25, 0.5, 0.75)
    warmup_epochs: int = 1
    task: str = "classification"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.warmup_epochs < 1:
            raise ValueError("need at least one warmup epoch for calibration")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "eps": self.eps,
            "schedule_period": self.schedule_period,
            "min_lr": self.min_lr,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "encoding": self.encoding,
            "curriculum_quantiles": list(self.curriculum_quantiles),
            "warmup_epochs": self.warmup_epochs,
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        model = ModelSpec.from_dict(d["model"]) if "model" in d else ModelSpec()
        kwargs = {
            k: d[k]
            for k in (
                "lr", "weight_decay", "eps", "schedule_period", "min_lr",
                "epochs", "batch_size", "encoding", "warmup_epochs", "task",
            )
            if k in d
        }
        if "betas" in d:
            kwargs["betas"] = tuple(d["betas"])
        if "curriculum_quantiles" in d:
            kwargs["curriculum_quantiles"] = tuple(d["curriculum_quantiles"])
        return cls(seed=d["seed"], model=model, **kwargs)


@dataclass(eq=False)
class EncodedDataset:
    """Dynamic images ready for the network, one per source volume."""

    images: np.ndarray  # (N, 1, H, W) float32
    labels: np.ndarray
    method: str
    encode_seed: Optional[int] = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != len(self.labels):
            raise ShapeError(
                f"images {self.images.shape} and labels {self.labels.shape} disagree"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "EncodedDataset":
        idx = np.asarray(indices)
        return EncodedDataset(self.images[idx], self.labels[idx], self.method, self.encode_seed)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.method.encode())
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


def encode_dataset(
    volumes: Sequence[Volume],
    labels,
    method: str = "arp",
    seed: Optional[int] = None,
) -> EncodedDataset:
    """Normalise each volume to [0, 1], then encode it with ``method``.

    Stochastic pooling derives a per-volume seed from the base seed so
    volumes get independent but reproducible draws.
    """
    images = []
    for i, v in enumerate(volumes):
        per_seed = None
        if method == "stochastic":
            base = 0 if seed is None else seed
            per_seed = np.random.SeedSequence([base, i]).generate_state(1)[0]
        di = encode(slices(normalize_volume(v)), method, per_seed)
        images.append(di.payload.values)
    return EncodedDataset(
        np.stack(images).astype(np.float32), np.asarray(labels), method, seed
    )


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    loss: float
    lr: float
    stage: str
    lambda_: float
    advanced: int


@dataclass(frozen=True)
class TraceRow:
    step: int
    stage: str
    lambda_: float
    tau_active: float  # nan during warmup
    advanced: int


@dataclass(eq=False)
class TrainResult:
    model: Model
    history: list[HistoryRow]
    trace: list[TraceRow]
    state: Optional[CurriculumState]
    thresholds: Optional[tuple[float, ...]]


def _decay_exempt(model: Model) -> frozenset:
    return frozenset(
        name for name in model.params if name.endswith(".b") or name == "fusion.scores"
    )


def _trainable_names(model: Model, active_index: int) -> set[str]:
    dgm_stages = model.spec.dgm_stage_names
    frozen_prefixes = tuple(f"{s}.dgm." for s in dgm_stages[active_index:])
    return {n for n in model.params if not n.startswith(frozen_prefixes)} if frozen_prefixes else set(model.params)


def train(config: RunConfig, dataset: EncodedDataset) -> TrainResult:
    """Optimise a fresh model on ``dataset`` under the complexity curriculum."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model = build_model(config.model, config.seed)
    optimizer = AdamW(
        model.params,
        lr=config.lr,
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
        decay_exempt=_decay_exempt(model),
    )
    batch_rng = np.random.default_rng([config.seed, 2])
    dgm_stages = model.spec.dgm_stage_names
    n_stages = len(dgm_stages)

    history: list[HistoryRow] = []
    trace: list[TraceRow] = []
    state: Optional[CurriculumState] = None
    thresholds: Optional[tuple[float, ...]] = None
    warmup_lambdas: list[float] = []
    step = 0
    snapshot = model.state_arrays()

    images, labels = dataset.images, dataset.labels
    n = len(dataset)

    for epoch in range(config.epochs):
        optimizer.lr = cosine_lr(epoch, config.lr, config.min_lr, config.schedule_period)
        order = batch_rng.permutation(n)
        losses: list[float] = []
        advanced_this_epoch = 0
        last_lambda = math.nan

        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = Tensor(images[idx])
            logits, feats = model.forward(xb)
            if config.task == "classification":
                loss = softmax_cross_entropy(logits, labels[idx])
            else:
                loss = l1_loss(reshape(logits, (len(idx),)), labels[idx].astype(np.float32))
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                model.load_state_arrays(snapshot)
                raise DivergenceError(
                    f"loss became non-finite at epoch {epoch}, step {step}",
                    epoch=epoch,
                    step=step,
                )
            losses.append(loss_val)

            model.zero_grad()
            loss.backward()

            active_index = state.stage_index if state is not None else 1
            if model.fusion_scores.grad is not None:
                model.fusion_scores.grad[active_index:] = 0.0
            optimizer.step(_trainable_names(model, active_index))

            step += 1
            active_stage = dgm_stages[active_index - 1]
            lam = complexity(feats[active_stage].data)
            last_lambda = lam
            if state is None:
                warmup_lambdas.append(lam)
                trace.append(TraceRow(step, active_stage, lam, math.nan, 0))
            else:
                tau = state.active_threshold
                before = state.stage_index
                state, _recal = advance(state, ComplexityScore(lam, active_stage, step))
                moved = int(state.stage_index > before)
                advanced_this_epoch += moved
                trace.append(TraceRow(step, active_stage, lam, tau, moved))

        if state is None and epoch + 1 >= config.warmup_epochs:
            taus = calibrate_thresholds(warmup_lambdas, config.curriculum_quantiles)
            while len(taus) < n_stages:  # final stage reuses the last threshold
                taus.append(taus[-1])
            thresholds = tuple(taus[:n_stages])
            state = CurriculumState(stages=dgm_stages, thresholds=thresholds)

        stage_name = dgm_stages[(state.stage_index if state else 1) - 1]
        history.append(
            HistoryRow(
                epoch, float(np.mean(losses)), optimizer.lr, stage_name,
                last_lambda, int(advanced_this_epoch > 0),
            )
        )
        snapshot = model.state_arrays()

    return TrainResult(model, history, trace, state, thresholds)


def evaluate(model: Model, dataset: EncodedDataset, batch_size: int = 64) -> MetricsReport:
    """One deterministic pass; confusion counts plus every applicable metric."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    outputs = []
    for start in range(0, len(dataset), batch_size):
        logits, _ = model.forward(Tensor(dataset.images[start : start + batch_size]))
        outputs.append(logits.data.astype(np.float64))
    raw = np.concatenate(outputs, axis=0)

    if model.spec.classes == 1:
        preds = raw[:, 0]
        return MetricsReport(
            task="regression",
            n=len(dataset),
            accuracy=0.0,
            mae=mae_metric(preds, dataset.labels.astype(np.float64)),
            flags=("regression_task",),
        )

    z = raw - raw.max(axis=1, keepdims=True)
    scores = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    preds = raw.argmax(axis=1)
    return multiclass_report(dataset.labels, preds, scores, n_classes=model.spec.classes)


def predict_subject(
    volume: Volume, model: Model, method: str = "arp", seed: Optional[int] = None
) -> tuple[int, np.ndarray]:
    """normalise -> encode -> forward -> argmax; also returns the softmax scores."""
    di = encode(slices(normalize_volume(volume)), method, seed)
    x = di.payload.values[None]
    logits, _ = model.forward(Tensor(x))
    z = logits.data.astype(np.float64)[0]
    z = z - z.max()
    scores = np.exp(z) / np.exp(z).sum()
    return int(np.argmax(z)), scores


# ---------------------------------------------------------------------------
# Run artifacts
# ---------------------------------------------------------------------------


def write_history_csv(path, rows: Sequence[HistoryRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "lr", "stage", "lambda", "advanced"])
        for r in rows:
            writer.writerow([r.epoch, repr(r.loss), repr(r.lr), r.stage, repr(r.lambda_), r.advanced])


def write_trace_csv(path, rows: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "stage", "lambda", "tau_active", "advanced"])
        for r in rows:
            writer.writerow([r.step, r.stage, repr(r.lambda_), repr(r.tau_active), r.advanced])


def run_manifest(config: RunConfig, dataset: EncodedDataset, result: Optional[TrainResult] = None) -> dict:
    """Config echo + seeds + thresholds + input content hash: enough to rerun."""
    return {
        "config": config.to_dict(),
        "seed": config.seed,
        "encoding": dataset.method,
        "encode_seed": dataset.encode_seed,
        "input_hash": dataset.content_hash(),
        "thresholds": list(result.thresholds) if result and result.thresholds else None,
    }


def save_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
