"""Desk-scale feature extractors and the growable classifier head.

Two fixed architectures:

* ``mlp``        input -> hidden (relu) -> hidden (relu) -> feature_dim
* ``small-conv`` conv3x3 (relu) -> avgpool2 -> conv3x3 (relu) ->
                 global-avgpool, with the second conv's channel count
                 equal to feature_dim

Both are fully determined by config integers plus the input shape.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import (
    ParameterStore,
    ShapeError,
    Tensor,
    add,
    avg_pool2d,
    conv2d,
    flatten,
    global_avg_pool,
    matmul,
    relu,
    reshape,
    transpose,
)

ARCH_MLP = "mlp"
ARCH_SMALL_CONV = "small-conv"
_ARCH_CODES = {ARCH_MLP: 0, ARCH_SMALL_CONV: 1}
_ARCH_NAMES = {v: k for k, v in _ARCH_CODES.items()}

_CHECKPOINT_MAGIC = b"TAEC"
_CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Model checkpoint file is malformed or does not match the model."""


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class FeatureExtractor:
    """Maps input batches to [batch, feature_dim] feature vectors."""

    def __init__(self, arch: str, input_shape, feature_dim: int = 64,
                 hidden: int = 64, seed: int = 0):
        if arch not in _ARCH_CODES:
            raise ValueError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.feature_dim = int(feature_dim)
        self.hidden = int(hidden)
        self.store = ParameterStore()
        rng = np.random.default_rng([int(seed), 0x7AE])

        if arch == ARCH_MLP:
            if isinstance(input_shape, (tuple, list)):
                d = int(np.prod(input_shape))
            else:
                d = int(input_shape)
            self.input_shape = (d,)
            self.store.add("fc1.weight", Tensor(_uniform(rng, (d, hidden), d)))
            self.store.add("fc1.bias", Tensor(np.zeros(hidden)))
            self.store.add("fc2.weight", Tensor(_uniform(rng, (hidden, hidden), hidden)))
            self.store.add("fc2.bias", Tensor(np.zeros(hidden)))
            self.store.add("fc3.weight", Tensor(_uniform(rng, (hidden, feature_dim), hidden)))
            self.store.add("fc3.bias", Tensor(np.zeros(feature_dim)))
        else:
            c, h, w = (int(v) for v in input_shape)
            if h % 2 or w % 2:
                raise ValueError("small-conv needs even spatial dims for pooling")
            self.input_shape = (c, h, w)
            self.store.add("conv1.weight", Tensor(_uniform(rng, (hidden, c, 3, 3), c * 9)))
            self.store.add("conv1.bias", Tensor(np.zeros(hidden)))
            self.store.add("conv2.weight",
                           Tensor(_uniform(rng, (feature_dim, hidden, 3, 3), hidden * 9)))
            self.store.add("conv2.bias", Tensor(np.zeros(feature_dim)))

    @property
    def num_scalars(self) -> int:
        return self.store.num_scalars

    def embed(self, batch: Tensor) -> Tensor:
        """Forward pass to features; recorded on the active tape, if any."""
        batch = batch if isinstance(batch, Tensor) else Tensor(batch)
        if self.arch == ARCH_MLP:
            if batch.data.ndim > 2:
                batch = flatten(batch)
            if batch.data.ndim != 2 or batch.shape[1] != self.input_shape[0]:
                raise ShapeError("embed", batch.shape, ("B",) + self.input_shape)
            h = relu(add(matmul(batch, self.store.tensor("fc1.weight")),
                         self.store.tensor("fc1.bias")))
            h = relu(add(matmul(h, self.store.tensor("fc2.weight")),
                         self.store.tensor("fc2.bias")))
            return add(matmul(h, self.store.tensor("fc3.weight")),
                       self.store.tensor("fc3.bias"))

        c, hh, ww = self.input_shape
        if batch.data.ndim == 2 and batch.shape[1] == c * hh * ww:
            batch = reshape(batch, (batch.shape[0], c, hh, ww))
        if batch.data.ndim != 4 or batch.shape[1:] != (c, hh, ww):
            raise ShapeError("embed", batch.shape, ("B",) + self.input_shape)
        x = relu(conv2d(batch, self.store.tensor("conv1.weight"),
                        self.store.tensor("conv1.bias")))
        x = avg_pool2d(x)
        x = relu(conv2d(x, self.store.tensor("conv2.weight"),
                        self.store.tensor("conv2.bias")))
        return global_avg_pool(x)


class ClassifierHead:
    """Linear head over all seen classes; rows grow as tasks arrive.

    Old rows are preserved bit-identically across grow operations, and
    the (name, offset) identity of every existing scalar is stable.
    """

    def __init__(self, feature_dim: int, seed: int = 0):
        self.feature_dim = int(feature_dim)
        self.seed = int(seed)
        self.num_classes = 0
        self.store = ParameterStore()
        self.store.add("weight", Tensor(np.zeros((0, feature_dim))))
        self.store.add("bias", Tensor(np.zeros(0)))

    @property
    def weight(self) -> Tensor:
        return self.store.tensor("weight")

    @property
    def bias(self) -> Tensor:
        return self.store.tensor("bias")


def predict(head: ClassifierHead, features: Tensor) -> Tensor:
    """Logits over all seen classes: features [B, d] -> [B, num_classes]."""
    features = features if isinstance(features, Tensor) else Tensor(features)
    if features.data.ndim != 2 or features.shape[1] != head.feature_dim:
        raise ShapeError("predict", features.shape, ("B", head.feature_dim))
    return add(matmul(features, transpose(head.weight)), head.bias)


def grow_head(head: ClassifierHead, new_classes: int) -> ClassifierHead:
    """Append rows for ``new_classes`` fresh classes, in place.

    New weight rows are uniform(-1/sqrt(d), +1/sqrt(d)), new biases zero.
    Returns the same head for convenience.
    """
    if new_classes < 1:
        raise ValueError("new_classes must be >= 1")
    d = head.feature_dim
    rng = np.random.default_rng([head.seed, 0x4EAD, head.num_classes])
    new_w = _uniform(rng, (new_classes, d), d)
    old_w = head.weight.data
    old_b = head.bias.data
    head.store.replace("weight", Tensor(np.concatenate([old_w, new_w], axis=0)))
    head.store.replace("bias", Tensor(np.concatenate([old_b, np.zeros(new_classes)])))
    head.num_classes += new_classes
    return head


def extract_features(extractor: FeatureExtractor, samples: np.ndarray,
                     batch_size: int = 256) -> np.ndarray:
    """Untaped feature pass over an array of samples; returns [N, feature_dim]."""
    samples = np.asarray(samples, dtype=np.float64)
    out = np.empty((samples.shape[0], extractor.feature_dim), dtype=np.float64)
    for start in range(0, samples.shape[0], batch_size):
        chunk = samples[start:start + batch_size]
        out[start:start + chunk.shape[0]] = extractor.embed(Tensor(chunk)).data
    return out


# ---------------------------------------------------------------------------
# Checkpoint format: magic "TAEC", u32 version, u8 arch, u32 feature_dim,
# then every parameter blob (extractor store, then head store) as
# little-endian f64 in flat-index order.


def save_checkpoint(path, extractor: FeatureExtractor, head: ClassifierHead) -> None:
    blob = np.concatenate([extractor.store.flat_values(),
                           head.store.flat_values()])
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IBI", _CHECKPOINT_VERSION,
                             _ARCH_CODES[extractor.arch], extractor.feature_dim))
        fh.write(blob.astype("<f8").tobytes())


def load_checkpoint(path, extractor: FeatureExtractor, head: ClassifierHead) -> None:
    """Load parameter values into an already-constructed matching model."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {_CHECKPOINT_MAGIC!r}")
    version, arch_code, feature_dim = struct.unpack("<IBI", raw[4:13])
    if version != _CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if arch_code not in _ARCH_NAMES or _ARCH_NAMES[arch_code] != extractor.arch:
        raise CheckpointError(
            f"architecture mismatch: file has code {arch_code}, model is {extractor.arch!r}")
    if feature_dim != extractor.feature_dim:
        raise CheckpointError(
            f"feature_dim mismatch: file {feature_dim}, model {extractor.feature_dim}")
    n = extractor.store.num_scalars + head.store.num_scalars
    payload = raw[13:]
    if len(payload) != 8 * n:
        raise CheckpointError(
            f"payload is {len(payload)} bytes, model needs {8 * n}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    split = extractor.store.num_scalars
    extractor.store.set_flat(values[:split])
    head.store.set_flat(values[split:])
