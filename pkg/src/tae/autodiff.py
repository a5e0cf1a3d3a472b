"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is fixed and closed: exactly what the feature extractors,
classifier heads, and loss functions in this package need. Values are
computed eagerly with numpy; when a :class:`GradTape` is active, every
op also records a node so the tape can later run the chain rule
backwards from a scalar loss.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff core."""


class ShapeError(AutodiffError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {detail}")


class DomainError(AutodiffError):
    """Operand values lie outside an op's domain (e.g. log of a non-positive)."""


class TapeError(AutodiffError):
    """Tape misuse: backward on a non-scalar, or a second backward pass."""


class NonFiniteGradientError(AutodiffError):
    """A gradient contained NaN or Inf; carries the offending parameter name."""

    def __init__(self, param_name: str):
        self.param_name = param_name
        super().__init__(f"non-finite gradient for parameter {param_name!r}")


# Norms are floored at this value wherever a division by a norm occurs.
NORM_EPS = 1e-12


class Tensor:
    """A dense row-major float64 array, optionally tracked by a tape.

    Tensors are value containers; all arithmetic lives in module-level
    functions (and thin operator overloads) so the tape can see every op.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # Operator sugar; all routes through module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape


class GradTape:
    """Records forward ops and plays them backwards to produce gradients.

    Use as a context manager around the forward pass::

        with GradTape() as tape:
            loss = ...
        tape.backward(loss)
        g = tape.grad(some_parameter)

    A tape can run backward exactly once. Tensors that never participated
    in the recorded graph get an exact-zero gradient from :meth:`grad`.
    """

    def __init__(self):
        self.nodes = []  # (output, parents, vjp) in execution order
        self._grads = None  # id(tensor) -> ndarray, set by backward()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, output: Tensor, parents, vjp) -> None:
        self.nodes.append((output, tuple(parents), vjp))

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of ``loss`` w.r.t. every recorded tensor."""
        if self._grads is not None:
            raise TapeError("backward already ran on this tape")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = loss.shape if isinstance(loss, Tensor) else np.shape(loss)
            raise TapeError(f"backward requires a scalar loss, got shape {tuple(shape)}")
        grads = {id(loss): np.ones_like(loss.data)}
        for output, parents, vjp in reversed(self.nodes):
            g_out = grads.get(id(output))
            if g_out is None:
                continue
            for parent, g_in in zip(parents, vjp(g_out)):
                if g_in is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
        # Keep every referenced tensor alive so id() keys stay valid.
        self._retained = [loss] + [n[0] for n in self.nodes]
        self._grads = grads

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the loss w.r.t. ``tensor`` (exact zeros if unused)."""
        if self._grads is None:
            raise TapeError("grad requested before backward")
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g


_TAPE_STACK: list[GradTape] = []


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(out_data, parents, vjp) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _emit(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _emit(np.where(mask, a.data, 0.0), (a,), vjp)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: input must be nonnegative")
    out = np.sqrt(a.data)

    def vjp(g):
        return (g / (2.0 * np.maximum(out, NORM_EPS)),)

    return _emit(out, (a,), vjp)


def maximum(a, b) -> Tensor:
    """Elementwise max; at ties the gradient goes to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        take_a = a.data >= b.data
    except ValueError:
        raise ShapeError("maximum", a.shape, b.shape) from None
    out = np.where(take_a, a.data, b.data)

    def vjp(g):
        return (_unbroadcast(g * take_a, a.shape),
                _unbroadcast(g * ~take_a, b.shape))

    return _emit(out, (a, b), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values into [lo, hi]; gradient passes only inside the interval."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        return (g * inside,)

    return _emit(np.clip(a.data, lo, hi), (a,), vjp)


# ---------------------------------------------------------------------------
# Linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _emit(out, (a, b), vjp)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None

    def vjp(g):
        return (g.reshape(a.shape),)

    return _emit(out, (a,), vjp)


def flatten(a) -> Tensor:
    """Collapse all axes after the first (batch) axis."""
    a = _as_tensor(a)
    if a.data.ndim < 1:
        raise ShapeError("flatten", a.shape)
    return reshape(a, (a.shape[0], -1))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _emit(out, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def dot(a, b) -> Tensor:
    """Inner product of two vectors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    out = float(a.data @ b.data)

    def vjp(g):
        s = g.reshape(())
        return s * b.data, s * a.data

    return _emit(out, (a, b), vjp)


def l2_norm(a) -> Tensor:
    """Euclidean norm of all entries, floored at NORM_EPS in the gradient."""
    a = _as_tensor(a)
    out = float(np.sqrt((a.data * a.data).sum()))

    def vjp(g):
        return (g.reshape(()) * a.data / max(out, NORM_EPS),)

    return _emit(out, (a,), vjp)


def gather_rows(matrix, indices) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds into the matrix."""
    matrix = _as_tensor(matrix)
    idx = np.asarray(indices, dtype=np.int64)
    if matrix.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError("gather_rows", matrix.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= matrix.shape[0]):
        raise DomainError(
            f"gather_rows: index out of range for {matrix.shape[0]} rows")
    out = matrix.data[idx]

    def vjp(g):
        gm = np.zeros_like(matrix.data)
        np.add.at(gm, idx, g)
        return (gm,)

    return _emit(out, (matrix,), vjp)


# ---------------------------------------------------------------------------
# Convolution stack (stride 1, zero padding 1, 3x3 kernels)


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, h, w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, pad: int) -> np.ndarray:
    b, c, h, w = shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + h, j:j + w] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w]


def conv2d(x, weight, bias) -> Tensor:
    """Same-size 2-D convolution: x [B,C,H,W], weight [O,C,3,3], bias [O]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if (x.data.ndim != 4 or weight.data.ndim != 4
            or weight.shape[2:] != (3, 3) or x.shape[1] != weight.shape[1]
            or bias.shape != (weight.shape[0],)):
        raise ShapeError("conv2d", x.shape, weight.shape)
    b, c, h, w = x.shape
    o = weight.shape[0]
    cols = _im2col(x.data, 3, 3, 1)  # [B,C,3,3,H,W]
    out = np.einsum("ocij,bcijhw->bohw", weight.data, cols, optimize=True)
    out += bias.data[None, :, None, None]

    def vjp(g):
        gw = np.einsum("bohw,bcijhw->ocij", g, cols, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gcols = np.einsum("ocij,bohw->bcijhw", weight.data, g, optimize=True)
        gx = _col2im(gcols, (b, c, h, w), 3, 3, 1)
        return gx, gw, gb

    return _emit(out, (x, weight, bias), vjp)


def avg_pool2d(x) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("avg_pool2d", x.shape)
    b, c, h, w = x.shape
    view = x.data.reshape(b, c, h // 2, 2, w // 2, 2)
    out = view.mean(axis=(3, 5))

    def vjp(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
        return (gx,)

    return _emit(out, (x,), vjp)


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes: [B,C,H,W] -> [B,C]."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _emit(out, (x,), vjp)


# ---------------------------------------------------------------------------
# Classification loss


def softmax_cross_entropy(logits, labels, sample_weights=None) -> Tensor:
    """Mean (optionally per-sample weighted) negative log softmax-likelihood.

    ``logits`` is [B,K], ``labels`` an int vector of length B, and
    ``sample_weights`` an optional constant float vector of length B.
    Returns a scalar; uses the shifted-logsumexp form for stability.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    bsz, k = logits.shape
    if bsz == 0:
        raise ShapeError("softmax_cross_entropy", logits.shape)
    if labels.min() < 0 or labels.max() >= k:
        raise DomainError(
            f"softmax_cross_entropy: label out of range for {k} classes")
    if sample_weights is None:
        w = np.ones(bsz, dtype=np.float64)
    else:
        w = np.asarray(sample_weights, dtype=np.float64)
        if w.shape != (bsz,):
            raise ShapeError("softmax_cross_entropy", logits.shape, w.shape)

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    sumexp = np.exp(shifted).sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sumexp)
    nll = -log_probs[np.arange(bsz), labels]
    out = float((w * nll).mean())

    def vjp(g):
        probs = np.exp(log_probs)
        gz = probs.copy()
        gz[np.arange(bsz), labels] -= 1.0
        gz *= (w / bsz)[:, None]
        return (g.reshape(()) * gz,)

    return _emit(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# Parameters


class ParameterStore:
    """Ordered, named collection of parameter tensors with a stable flat index.

    Scalar positions run through the tensors in insertion order; within a
    tensor, row-major. The (name, offset) pair of an existing scalar never
    changes; explicit add/grow operations are the only ways the scalar
    count moves.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        tensor = _as_tensor(tensor)
        self._params[name] = tensor
        return tensor

    def names(self) -> list[str]:
        return list(self._params)

    def tensor(self, name: str) -> Tensor:
        return self._params[name]

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def __iter__(self):
        return iter(self._params.items())

    def __contains__(self, name):
        return name in self._params

    @property
    def num_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def spans(self) -> list[tuple[str, int, int]]:
        """[(name, start, stop)] covering the flat index range."""
        out, pos = [], 0
        for name, t in self._params.items():
            out.append((name, pos, pos + t.data.size))
            pos += t.data.size
        return out

    def flat_index(self, position: int) -> tuple[str, int]:
        """Map a flat scalar position to its (name, offset) identity."""
        if position < 0:
            raise IndexError(position)
        for name, start, stop in self.spans():
            if position < stop:
                return name, position - start
        raise IndexError(position)

    def position_of(self, name: str, offset: int) -> int:
        for n, start, stop in self.spans():
            if n == name:
                if offset >= stop - start:
                    raise IndexError((name, offset))
                return start + offset
        raise KeyError(name)

    def flat_values(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([t.data.reshape(-1) for t in self._params.values()])

    def set_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.num_scalars,):
            raise ShapeError("set_flat", values.shape, (self.num_scalars,))
        for name, start, stop in self.spans():
            t = self._params[name]
            t.data[...] = values[start:stop].reshape(t.data.shape)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        self._params = {}
        for name, arr in snap.items():
            self._params[name] = Tensor(arr.copy())

    def replace(self, name: str, tensor: Tensor) -> Tensor:
        """Swap in a grown tensor; existing (name, offset) pairs must survive."""
        if name not in self._params:
            raise KeyError(name)
        self._params[name] = _as_tensor(tensor)
        return self._params[name]


def full_mask(store: ParameterStore, value: bool = True) -> np.ndarray:
    """A trainable-mask vector (one bool per scalar, flat order)."""
    return np.full(store.num_scalars, value, dtype=bool)


class MaskedSGD:
    """Momentum SGD over one ParameterStore under a boolean trainable mask.

    Update per scalar with mask bit true: v <- momentum*v + grad, then
    value <- value - lr*v. Scalars with mask bit false are left bit-for-bit
    untouched, velocity included. Velocity starts at zero and is reset at
    task boundaries by the trainer.
    """

    def __init__(self, store: ParameterStore, momentum: float = 0.9):
        self.store = store
        self.momentum = float(momentum)
        self.velocity = np.zeros(store.num_scalars, dtype=np.float64)

    def reset_velocity(self) -> None:
        self.velocity = np.zeros(self.store.num_scalars, dtype=np.float64)

    def step(self, tape: GradTape, mask: np.ndarray, lr: float) -> None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.store.num_scalars,):
            raise ShapeError("sgd_step", mask.shape, (self.store.num_scalars,))
        spans = self.store.spans()
        grads = {}
        for name, start, stop in spans:
            g = tape.grad(self.store.tensor(name)).reshape(-1)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
            grads[name] = g
        # All gradients validated before any value moves: a bad gradient
        # must abort the whole step.
        for name, start, stop in spans:
            m = mask[start:stop]
            if not m.any():
                continue
            v = self.velocity[start:stop]
            v[m] = self.momentum * v[m] + grads[name][m]
            flat = self.store.tensor(name).data.reshape(-1)
            flat[m] -= lr * v[m]


def sgd_step(store: ParameterStore, tape: GradTape, mask: np.ndarray,
             lr: float, momentum: float = 0.0,
             velocity: np.ndarray | None = None) -> np.ndarray:
    """One-shot functional form of :class:`MaskedSGD`; returns the velocity."""
    opt = MaskedSGD(store, momentum=momentum)
    if velocity is not None:
        opt.velocity = np.asarray(velocity, dtype=np.float64).copy()
    opt.step(tape, mask, lr)
    return opt.velocity
