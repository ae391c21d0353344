"""Head-to-head pooling comparison on identical folds and seeds.

Trains one model per encoding method on the same synthetic dataset, same
k-fold plan, and same config, then reports fold-averaged Acc/AUC/F1/Pre/
Rec/AP per method as a CSV-able table. Runs are fully independent, so a
caller could parallelise them; they execute sequentially here to keep the
output ordering and RNG story trivially reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .encoding import ENCODING_METHODS
from .metrics import kfold_split
from .synthetic import SynthSpec, gen_dataset
from .training import RunConfig, encode_dataset, evaluate, train

_COLUMNS = ("acc", "auc", "f1", "pre", "rec", "ap")


@dataclass(frozen=True)
class MethodRow:
    method: str
    acc: float
    auc: float
    f1: float
    pre: float
    rec: float
    ap: float


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[MethodRow, ...]

    def row(self, method: str) -> MethodRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(f"no row for method {method!r}")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", *_COLUMNS])
            for r in self.rows:
                writer.writerow(
                    [r.method] + [repr(getattr(r, c)) for c in _COLUMNS]
                )


def pooling_comparison(
    spec: SynthSpec,
    config: RunConfig,
    methods: Sequence[str] = ENCODING_METHODS,
    k: int = 3,
    volumes=None,
    labels=None,
) -> ComparisonTable:
    """Train/evaluate every method over the same k folds; average per method.

    ``volumes``/``labels`` may be passed in to reuse an already generated
    dataset; otherwise they come from ``spec``.
    """
    if volumes is None:
        volumes, labels = gen_dataset(spec)
    plan = kfold_split(len(volumes), k, config.seed)

    rows = []
    for method in methods:
        encoded = encode_dataset(volumes, labels, method, seed=config.seed)
        sums = dict.fromkeys(_COLUMNS, 0.0)
        for fold in plan.folds:
            result = train(config, encoded.subset(fold.train))
            report = evaluate(result.model, encoded.subset(fold.test))
            sums["acc"] += report.accuracy
            sums["auc"] += report.auc if report.auc is not None else 0.0
            sums["f1"] += report.f1
            sums["pre"] += report.precision
            sums["rec"] += report.recall
            sums["ap"] += report.ap if report.ap is not None else 0.0
        rows.append(
            MethodRow(method, *(sums[c] / len(plan.folds) for c in _COLUMNS))
        )
    return ComparisonTable(tuple(rows))
