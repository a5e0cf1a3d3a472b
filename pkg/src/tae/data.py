"""Dataset ingestion, long-tail shaping, task splitting, and exemplar memory.

Binary formats:

* tensor file  magic "TAED", u32 version=1, u8 dtype (0 = f32 LE),
               u8 ndim, ndim x u32 dims, then the payload
* label file   magic "TAEL", u32 version=1, u32 count, count x u32 labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .models import FeatureExtractor, extract_features

TENSOR_MAGIC = b"TAED"
LABEL_MAGIC = b"TAEL"
FORMAT_VERSION = 1
_DTYPE_F32 = 0
# Guards against absurd headers before any allocation happens.
_MAX_ELEMENTS = 1 << 31


class DatasetError(ValueError):
    """Base class for dataset file and protocol errors."""


class BadMagicError(DatasetError):
    pass


class BadVersionError(DatasetError):
    pass


class BadDtypeError(DatasetError):
    pass


class DimOverflowError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class QuotaError(DatasetError):
    """A class cannot supply the samples its long-tail position demands."""


@dataclass
class LabeledDataset:
    """A pool of samples with integer labels in [0, class_count)."""

    samples: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"{self.samples.shape[0]} samples but {self.labels.shape[0]} labels")
        if self.samples.shape[0] < 1:
            raise DatasetError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise LabelRangeError(
                f"labels must lie in [0, {self.class_count})")

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


@dataclass
class LTProtocol:
    """Long-tail shaping knobs: ratio, head count, memory budget, shuffle."""

    rho: float
    head_count: int
    memory_per_class: int
    shuffled: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise DatasetError(f"rho must be in (0, 1], got {self.rho}")
        if round(self.head_count * self.rho) < 1:
            raise DatasetError("head_count * rho must be at least 1")
        if self.memory_per_class < 1:
            raise DatasetError("memory_per_class must be >= 1")


@dataclass
class TaskDataset:
    """One incremental task: a disjoint label set and its instances."""

    task_id: int
    class_labels: list[int]
    samples: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        present = set(int(v) for v in np.unique(self.labels))
        if not present.issubset(set(self.class_labels)):
            raise DatasetError("task instances carry labels outside the task's label set")

    @property
    def num_instances(self) -> int:
        return self.samples.shape[0]


# ---------------------------------------------------------------------------
# Binary file io


def save_tensor_file(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim > 255:
        raise DimOverflowError("more than 255 dims")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<IBB", FORMAT_VERSION, _DTYPE_F32, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(array.astype("<f4").tobytes())


def load_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != TENSOR_MAGIC:
        raise BadMagicError(f"bad tensor magic {raw[:4]!r}")
    if len(raw) < 10:
        raise TruncatedFileError("tensor header truncated")
    version, dtype, ndim = struct.unpack("<IBB", raw[4:10])
    if version != FORMAT_VERSION:
        raise BadVersionError(f"unsupported tensor file version {version}")
    if dtype != _DTYPE_F32:
        raise BadDtypeError(f"unsupported dtype code {dtype}")
    header_end = 10 + 4 * ndim
    if len(raw) < header_end:
        raise TruncatedFileError("dim list truncated")
    dims = struct.unpack(f"<{ndim}I", raw[10:header_end])
    total = 1
    for d in dims:
        total *= d
        if total > _MAX_ELEMENTS:
            raise DimOverflowError(f"dims {dims} overflow the element limit")
    expected = 4 * total
    payload = raw[header_end:]
    if len(payload) != expected:
        raise TruncatedFileError(
            f"expected {expected} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)


def save_label_file(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.min() < 0:
        raise LabelRangeError("labels must be nonnegative")
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, labels.size))
        fh.write(labels.astype("<u4").tobytes())


def load_label_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != LABEL_MAGIC:
        raise BadMagicError(f"bad label magic {raw[:4]!r}")
    if len(raw) < 12:
        raise TruncatedFileError("label header truncated")
    version, count = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise BadVersionError(f"unsupported label file version {version}")
    payload = raw[12:]
    if len(payload) != 4 * count:
        raise TruncatedFileError(
            f"expected {4 * count} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<u4").astype(np.int64)


def load_dataset(tensor_file, label_file) -> LabeledDataset:
    """Read a (tensor, label) file pair into a validated LabeledDataset."""
    samples = load_tensor_file(tensor_file)
    labels = load_label_file(label_file)
    if samples.shape[0] != labels.shape[0]:
        raise DatasetError(
            f"tensor file holds {samples.shape[0]} samples, label file {labels.shape[0]}")
    class_count = int(labels.max()) + 1 if labels.size else 0
    return LabeledDataset(samples, labels, class_count)


def save_dataset(tensor_file, label_file, ds: LabeledDataset) -> None:
    save_tensor_file(tensor_file, ds.samples)
    save_label_file(label_file, ds.labels)


# ---------------------------------------------------------------------------
# Long-tail shaping and task splitting


def class_permutation(class_count: int, proto: LTProtocol) -> np.ndarray:
    """The seed-determined permutation shared by shaping and splitting."""
    if proto.shuffled:
        return np.random.default_rng(proto.seed).permutation(class_count)
    return np.arange(class_count)


def tail_counts(class_count: int, head_count: int, rho: float) -> np.ndarray:
    """Per-position sample quota: round(head * rho^(i/(C-1))), position 0 largest."""
    if class_count == 1:
        return np.array([head_count], dtype=np.int64)
    i = np.arange(class_count, dtype=np.float64)
    return np.round(head_count * rho ** (i / (class_count - 1))).astype(np.int64)


def make_long_tailed(ds: LabeledDataset, proto: LTProtocol) -> LabeledDataset:
    """Subsample ``ds`` onto the exponential long-tail profile.

    The class sitting at sorted position i keeps
    round(head_count * rho^(i/(C-1))) samples. With ``shuffled`` the
    position-to-label assignment is the seed-determined permutation, so
    head and tail roles land on arbitrary labels; otherwise position
    order equals label order.
    """
    perm = class_permutation(ds.class_count, proto)
    counts = tail_counts(ds.class_count, proto.head_count, proto.rho)
    keep: list[np.ndarray] = []
    for position, label in enumerate(perm):
        idx = ds.class_indices(int(label))
        quota = int(counts[position])
        if idx.size < quota:
            raise QuotaError(
                f"class {int(label)} has {idx.size} samples, "
                f"needs {quota} (short by {quota - idx.size})")
        keep.append(idx[:quota])
    order = np.concatenate(keep)
    order.sort()
    return LabeledDataset(ds.samples[order], ds.labels[order], ds.class_count)


def split_tasks(ds: LabeledDataset, steps: int, proto: LTProtocol) -> list[TaskDataset]:
    """Split into ``steps`` tasks of equal class count with disjoint labels.

    Label y goes to task perm[y] // (C / steps), with perm the same
    permutation used by :func:`make_long_tailed`; identity when the
    protocol is unshuffled.
    """
    c = ds.class_count
    if steps < 1 or c % steps != 0:
        raise DatasetError(
            f"{c} classes do not split evenly into {steps} tasks "
            "(equal splits only)")
    per_task = c // steps
    perm = class_permutation(c, proto)
    slot_of = np.empty(c, dtype=np.int64)
    for label in range(c):
        slot_of[label] = perm[label] // per_task
    tasks = []
    for t in range(steps):
        class_labels = sorted(int(y) for y in np.flatnonzero(slot_of == t))
        mask = np.isin(ds.labels, class_labels)
        tasks.append(TaskDataset(
            task_id=t + 1,
            class_labels=class_labels,
            samples=ds.samples[mask],
            labels=ds.labels[mask],
        ))
    return tasks


# ---------------------------------------------------------------------------
# Herding exemplar selection


def herding_select(features: np.ndarray, budget: int) -> list[int]:
    """Greedy herding order over one class's feature matrix.

    Iteratively picks the sample whose inclusion keeps the running mean
    of chosen features closest (L2) to the class mean; ties break to the
    lowest sample index. Returns the first min(budget, n) indices in
    selection order. Features are used as given; callers normalize.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise DatasetError("herding needs a nonempty [n, d] feature matrix")
    if budget < 1:
        raise DatasetError("herding budget must be >= 1")
    n = feats.shape[0]
    target = feats.mean(axis=0)
    chosen: list[int] = []
    chosen_sum = np.zeros_like(target)
    remaining = np.ones(n, dtype=bool)
    for k in range(min(budget, n)):
        cand = (chosen_sum[None, :] + feats) / (k + 1)
        dist = np.linalg.norm(target[None, :] - cand, axis=1)
        dist[~remaining] = np.inf
        pick = int(np.argmin(dist))  # argmin takes the first minimum: ties
        chosen.append(pick)          # break to the lowest index
        remaining[pick] = False
        chosen_sum += feats[pick]
    return chosen


@dataclass
class ExemplarMemory:
    """Replay store: per-class herded exemplars under a fixed budget."""

    budget_per_class: int
    entries: dict[int, list[int]] = field(default_factory=dict)
    samples: dict[int, np.ndarray] = field(default_factory=dict)

    def num_entries(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def classes(self) -> list[int]:
        return sorted(self.entries)

    def copy(self) -> "ExemplarMemory":
        return ExemplarMemory(
            self.budget_per_class,
            {c: list(v) for c, v in self.entries.items()},
            {c: v.copy() for c, v in self.samples.items()},
        )


def normalized_features(extractor: FeatureExtractor, samples: np.ndarray) -> np.ndarray:
    """Feature rows scaled to unit L2 norm (herding convention)."""
    feats = extract_features(extractor, samples)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return feats / np.maximum(norms, 1e-12)


def update_memory(mem: ExemplarMemory, task: TaskDataset,
                  extractor: FeatureExtractor, proto: LTProtocol) -> ExemplarMemory:
    """Add herded exemplars for the task's classes; old entries untouched.

    Re-running on the same inputs overwrites the same classes with the
    same selection, so the operation is idempotent.
    """
    for label in task.class_labels:
        idx = np.flatnonzero(task.labels == label)
        if idx.size == 0:
            continue
        feats = normalized_features(extractor, task.samples[idx])
        order = herding_select(feats, proto.memory_per_class)
        picked = idx[np.asarray(order, dtype=np.int64)]
        mem.entries[int(label)] = [int(i) for i in picked]
        mem.samples[int(label)] = task.samples[picked].copy()
    return mem


def training_pool(task: TaskDataset, mem: ExemplarMemory):
    """Concatenate the task data with the replay memory.

    Returns (samples, labels, counts) where counts maps every class
    present in the combined pool to its sample count there.
    """
    parts_x = [task.samples]
    parts_y = [task.labels]
    for label in mem.classes():
        stored = mem.samples[label]
        if stored.shape[0] == 0:
            continue
        parts_x.append(stored)
        parts_y.append(np.full(stored.shape[0], label, dtype=np.int64))
    samples = np.concatenate(parts_x, axis=0)
    labels = np.concatenate(parts_y, axis=0)
    uniq, freq = np.unique(labels, return_counts=True)
    counts = {int(u): int(f) for u, f in zip(uniq, freq)}
    return samples, labels, counts
