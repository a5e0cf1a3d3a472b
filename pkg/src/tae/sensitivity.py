"""Gradient-sensitivity scoring and top-fraction parameter selection.

Before a new task trains, the previous model runs forward/backward
passes over the new task's data; per-scalar gradient magnitudes are
accumulated and averaged, and the most sensitive fraction of extractor
scalars becomes the trainable set for the task. Classifier-head scalars
are excluded from the ranking and are always trainable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import GradTape, ParameterStore
from .models import ClassifierHead, FeatureExtractor, predict
from .autodiff import Tensor, softmax_cross_entropy


@dataclass
class SensitivityReport:
    """Averaged per-scalar sensitivity, aligned with the extractor's flat order."""

    scores: np.ndarray
    iterations: int

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise ValueError("scores must be a flat vector")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ValueError("scores must be finite and nonnegative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def accumulate_sensitivity(extractor: FeatureExtractor, head: ClassifierHead,
                           samples: np.ndarray, row_labels: np.ndarray,
                           passes: int = 1, batch_size: int = 64,
                           signed: bool = False) -> SensitivityReport:
    """Average per-scalar gradient magnitude over ``passes`` data sweeps.

    Each pass walks the task data in a fixed mini-batch order, computes
    the plain cross-entropy of the logits over all seen classes, and
    backpropagates. In the default magnitude mode the absolute gradient
    is added per batch; in signed mode raw gradients are summed and the
    magnitude of the average is reported. Parameter values are never
    touched. ``row_labels`` index the head's rows directly.
    """
    if passes < 1:
        raise ValueError(f"passes must be >= 1, got {passes}")
    samples = np.asarray(samples, dtype=np.float64)
    row_labels = np.asarray(row_labels, dtype=np.int64)
    total = np.zeros(extractor.store.num_scalars, dtype=np.float64)
    n = samples.shape[0]
    starts = range(0, n, batch_size)
    for _ in range(passes):
        for start in starts:
            xb = Tensor(samples[start:start + batch_size])
            yb = row_labels[start:start + batch_size]
            with GradTape() as tape:
                logits = predict(head, extractor.embed(xb))
                loss = softmax_cross_entropy(logits, yb)
            tape.backward(loss)
            batch_grad = np.concatenate([
                tape.grad(t).reshape(-1) for t in extractor.store.tensors()])
            if not np.all(np.isfinite(batch_grad)):
                raise ValueError("non-finite gradient during sensitivity pass")
            total += batch_grad if signed else np.abs(batch_grad)
    mean = total / passes
    return SensitivityReport(scores=np.abs(mean), iterations=passes)


def selection_size(total_scalars: int, fraction: float) -> int:
    """ceil(fraction * N), guarded against float noise around integers."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    return math.ceil(round(fraction * total_scalars, 9))


def select_top_fraction(report: SensitivityReport, fraction: float) -> np.ndarray:
    """Boolean mask flagging the ceil(fraction*N) highest-scoring scalars.

    Ties break toward the lower flat index.
    """
    n = report.scores.shape[0]
    k = selection_size(n, fraction)
    order = np.lexsort((np.arange(n), -report.scores))
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return mask


def dump_report(report: SensitivityReport, store: ParameterStore, path) -> None:
    """Write the per-scalar scores as CSV: flat_index, name, offset, sensitivity."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["flat_index", "name", "offset", "sensitivity"])
        for name, start, stop in store.spans():
            for offset in range(stop - start):
                writer.writerow([start + offset, name, offset,
                                 repr(report.scores[start + offset])])
