"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: row-major numpy storage, the handful of primitives
needed by the de-confounding modules and the toy planner (matmul,
scaled row softmax, sigmoid/relu, concat/slice, elementwise arithmetic,
reductions, cross-entropy), plus central finite-difference gradient
checking. Every primitive attaches a backward record to its output;
``backward(loss)`` replays the tape and fills ``.grad`` on each
reachable ``requires_grad`` leaf.

Tensors are value-like and may be shared across threads read-only; a
tape (the recorded history under one loss) belongs to a single thread.
"""

from __future__ import annotations

import threading

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class ContractError(RuntimeError):
    """An operation was invoked outside its stated contract."""


_STATE = threading.local()


def _recording() -> bool:
    return getattr(_STATE, "recording", True)


class no_grad:
    """Context manager: ops inside do not record backward history."""

    def __enter__(self):
        self._prev = _recording()
        _STATE.recording = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.recording = self._prev
        return False


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_record")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._record = None  # (input tensors, vjp callables); None for leaves

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul_elementwise(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return mul_elementwise(self, Tensor(-1.0))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def to_json(self) -> dict:
        return {"shape": list(self.shape), "data": self.data.reshape(-1).tolist()}

    @classmethod
    def from_json(cls, obj: dict, requires_grad: bool = False) -> "Tensor":
        data = np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])
        return cls(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._record is not None


def _make(data: np.ndarray, inputs, vjps) -> Tensor:
    """Wrap a forward result, recording history when appropriate."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._record = None
    if _recording() and any(_needs_grad(t) for t in inputs):
        out._record = (tuple(inputs), tuple(vjps))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul expects matrices, got shapes {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(
            f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from exc

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)

    def vjp_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return _make(out, (a, b), (vjp_a, vjp_b))


def transpose_last2(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise DimensionError(f"transpose_last2 needs ndim >= 2, got {a.shape}")
    out = np.swapaxes(a.data, -1, -2).copy()
    return _make(out, (a,), (lambda g: np.swapaxes(g, -1, -2),))


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add shapes incompatible: {a.shape} + {b.shape}") from exc
    return _make(out, (a, b), (lambda g: _unbroadcast(g, a.shape),
                               lambda g: _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub shapes incompatible: {a.shape} - {b.shape}") from exc
    return _make(out, (a, b), (lambda g: _unbroadcast(g, a.shape),
                               lambda g: _unbroadcast(-g, b.shape)))


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul shapes incompatible: {a.shape} * {b.shape}") from exc
    return _make(out, (a, b), (lambda g: _unbroadcast(g * b.data, a.shape),
                               lambda g: _unbroadcast(g * a.data, b.shape)))


def sigmoid(x: Tensor) -> Tensor:
    # split form avoids exp overflow on large negative/positive inputs
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def vjp(g):
        return g * out * (1.0 - out)

    return _make(out, (x,), (vjp,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = (x.data > 0).astype(np.float64)
    return _make(out, (x,), (lambda g: g * mask,))


def softmax_rows(x: Tensor, scale: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``x / scale``, max-stabilized."""
    if not scale > 0:
        raise ContractError(f"softmax_rows scale must be > 0, got {scale}")
    y = x.data / scale
    y = y - y.max(axis=-1, keepdims=True)
    e = np.exp(y)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - inner) / scale

    return _make(out, (x,), (vjp,))


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(
            f"concat_last leading shapes differ: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=-1)
    na = a.shape[-1]
    return _make(out, (a, b), (lambda g: g[..., :na].copy(),
                               lambda g: g[..., na:].copy()))


def concat_tokens(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the second-to-last axis (token/row axis)."""
    if a.data.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise DimensionError(
            f"concat_tokens shapes incompatible: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=-2)
    na = a.shape[-2]
    return _make(out, (a, b), (lambda g: g[..., :na, :].copy(),
                               lambda g: g[..., na:, :].copy()))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of the last axis (used for attention heads)."""
    if not 0 <= start < stop <= x.shape[-1]:
        raise DimensionError(
            f"slice_last [{start}:{stop}] out of range for shape {x.shape}")
    out = x.data[..., start:stop].copy()

    def vjp(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return full

    return _make(out, (x,), (vjp,))


def sum_all(x: Tensor) -> Tensor:
    out = np.array(x.data.sum())
    return _make(out, (x,), (lambda g: np.broadcast_to(g, x.shape).astype(np.float64),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.array(x.data.mean())
    return _make(out, (x,), (lambda g: np.broadcast_to(g / n, x.shape).astype(np.float64),))


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row softmax of ``logits``.

    ``labels`` has the shape of ``logits`` minus the class axis.
    """
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(
            f"labels shape {labels.shape} does not match logits {logits.shape}")
    d = logits.data
    m = d.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(d - m).sum(axis=-1, keepdims=True)) + m
    picked = np.take_along_axis(d, labels[..., None], axis=-1)
    losses = (lse - picked)[..., 0]
    out = np.array(losses.mean())
    n = losses.size

    def vjp(g):
        soft = np.exp(d - lse)
        onehot = np.zeros_like(d)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        return g * (soft - onehot) / n

    return _make(out, (logits,), (vjp,))


def mlp_forward(params, x: Tensor) -> Tensor:
    """Apply a ReLU MLP given ``params`` as a list of (W, b) Tensor pairs.

    Hidden layers use ReLU; the final layer is linear.
    """
    h = x
    for i, (w, b) in enumerate(params):
        h = add(matmul(h, w), b)
        if i < len(params) - 1:
            h = relu(h)
    return h


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the primitives below one output.

    ``entries`` lists every non-leaf tensor reachable from the root, with
    each tensor's inputs appearing before it.
    """

    def __init__(self, entries):
        self.entries = entries

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        entries = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if node._record is None:
                continue
            if expanded:
                entries.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node._record[0]:
                if id(inp) not in seen:
                    stack.append((inp, False))
        return cls(entries)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf under ``loss``."""
    if loss.data.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.shape}")
    tape = Tape.from_root(loss)
    if not tape.entries:
        raise ContractError("backward on a leaf tensor: nothing was recorded")

    flowing = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.entries):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            # intermediate tensor explicitly marked for gradient retention
            node.grad = g.copy() if node.grad is None else node.grad + g
        inputs, vjps = node._record
        for inp, vjp in zip(inputs, vjps):
            if not _needs_grad(inp):
                continue
            contrib = vjp(g)
            if inp._record is not None:
                acc = flowing.get(id(inp))
                flowing[id(inp)] = contrib if acc is None else acc + contrib
            elif inp.requires_grad:
                inp.grad = contrib.copy() if inp.grad is None else inp.grad + contrib


def grad_check(f, x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic; this
    is verified by evaluating twice and comparing bit-for-bit.
    """
    if not 0 < eps <= 1e-3:
        raise ContractError(f"eps must lie in (0, 1e-3], got {eps}")
    if not x.requires_grad:
        raise ContractError("grad_check target tensor must have requires_grad")
    ref1 = f(x).data.copy()
    ref2 = f(x).data.copy()
    if not np.array_equal(ref1, ref2):
        raise ContractError("f is not deterministic: repeated evaluations differ")

    x.zero_grad()
    backward(f(x))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
