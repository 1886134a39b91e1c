"""Reverse-mode automatic differentiation over numpy arrays.

Every primitive's backward rule is itself written with Tensor operations, so
running a backward pass with ``create_graph=True`` records a differentiable
graph of the gradient. That is what lets the exact meta-gradient flow through
an inner SGD step.

Data defaults to float32. Float64 arrays are preserved as-is, which the
finite-difference checks rely on.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, LabelError

_grad_enabled = True


@contextlib.contextmanager
def grad_mode(enabled: bool):
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = previous


def no_grad():
    return grad_mode(False)


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating):
                arr = np.asarray(data)
            else:
                arr = np.asarray(data, dtype=np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op: Op | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(self.data, requires_grad=requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(_lift(other, self)))

    def __rsub__(self, other):
        return Add.apply(_lift(other, self), Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return Neg.apply(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return Mul.apply(self, Reciprocal.apply(other))
        return Mul.apply(self, _lift(1.0 / other, self))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape & reductions ------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def sum_to(self, shape: tuple[int, ...]) -> "Tensor":
        if self.shape == tuple(shape):
            return self
        return SumTo.apply(self, shape=tuple(shape))

    def broadcast_to(self, shape: tuple[int, ...]) -> "Tensor":
        if self.shape == tuple(shape):
            return self
        return BroadcastTo.apply(self, shape=tuple(shape))

    def relu(self) -> "Tensor":
        return ReLU.apply(self)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


class Op:
    """A recorded primitive. ``inputs`` are the Tensors it consumed."""

    inputs: tuple[Tensor, ...]

    def __init__(self, inputs: tuple[Tensor, ...], **params):
        self.inputs = inputs
        for key, value in params.items():
            setattr(self, key, value)

    @classmethod
    def apply(cls, *inputs: Tensor, **params) -> Tensor:
        op = cls(inputs, **params)
        out = Tensor(op.forward(*(t.data for t in inputs)))
        if _grad_enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._op = op
        return out

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: Tensor) -> tuple[Tensor | None, ...]:
        raise NotImplementedError


def _sum_to_shape(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = arr.ndim - len(shape)
    if extra:
        arr = arr.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and arr.shape[i] != 1)
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    return arr


class Add(Op):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return g.sum_to(a.shape), g.sum_to(b.shape)


class Mul(Op):
    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = (g * b).sum_to(a.shape) if a.requires_grad else None
        gb = (g * a).sum_to(b.shape) if b.requires_grad else None
        return ga, gb


class Neg(Op):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Reciprocal(Op):
    def forward(self, a):
        return 1.0 / a

    def backward(self, g):
        (a,) = self.inputs
        r = Reciprocal.apply(a)
        return (-(g * r * r),)


class MatMul(Op):
    def forward(self, a, b):
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = matmul(g, b.transpose()) if a.requires_grad else None
        gb = matmul(a.transpose(), g) if b.requires_grad else None
        return ga, gb


class Transpose(Op):
    axes: tuple[int, ...]

    def forward(self, a):
        return np.transpose(a, self.axes)

    def backward(self, g):
        inverse = tuple(np.argsort(self.axes))
        return (g.transpose(inverse),)


class Reshape(Op):
    shape: tuple[int, ...]

    def forward(self, a):
        return a.reshape(self.shape)

    def backward(self, g):
        return (g.reshape(self.inputs[0].shape),)


class Sum(Op):
    def forward(self, a):
        return np.asarray(a.sum(axis=self.axis, keepdims=self.keepdims))

    def backward(self, g):
        in_shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            kept = list(in_shape)
            for ax in axes:
                kept[ax % len(in_shape)] = 1
            g = g.reshape(tuple(kept))
        elif self.axis is None:
            g = g.reshape((1,) * len(in_shape))
        return (g.broadcast_to(in_shape),)


class SumTo(Op):
    def forward(self, a):
        return _sum_to_shape(a, self.shape)

    def backward(self, g):
        return (g.broadcast_to(self.inputs[0].shape),)


class BroadcastTo(Op):
    def forward(self, a):
        return np.ascontiguousarray(np.broadcast_to(a, self.shape))

    def backward(self, g):
        return (g.sum_to(self.inputs[0].shape),)


class ReLU(Op):
    def forward(self, a):
        self.mask = (a > 0).astype(a.dtype)
        return a * self.mask

    def backward(self, g):
        return (g * Tensor(self.mask),)


class Exp(Op):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        return (g * Exp.apply(self.inputs[0]),)


class Log(Op):
    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        return (g * Reciprocal.apply(self.inputs[0]),)


class LogSoftmax(Op):
    """Log-softmax over the last axis."""

    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(self, g):
        probs = LogSoftmax.apply(self.inputs[0]).exp()
        return (g - probs * g.sum(axis=-1, keepdims=True),)


class Concat(Op):
    def forward(self, *arrays):
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, g):
        grads, start = [], 0
        for t in self.inputs:
            stop = start + t.shape[self.axis]
            grads.append(Slice.apply(g, axis=self.axis, start=start, stop=stop))
            start = stop
        return tuple(grads)


class Slice(Op):
    def forward(self, a):
        index = [slice(None)] * a.ndim
        index[self.axis] = slice(self.start, self.stop)
        return np.ascontiguousarray(a[tuple(index)])

    def backward(self, g):
        return (Embed.apply(g, axis=self.axis, start=self.start, shape=self.inputs[0].shape),)


class Embed(Op):
    """Adjoint of Slice: place a block into zeros of the original shape."""

    def forward(self, a):
        out = np.zeros(self.shape, dtype=a.dtype)
        index = [slice(None)] * a.ndim
        index[self.axis] = slice(self.start, self.start + a.shape[self.axis])
        out[tuple(index)] = a
        return out

    def backward(self, g):
        return (Slice.apply(g, axis=self.axis, start=self.start,
                            stop=self.start + self.inputs[0].shape[self.axis]),)


def _out_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


class Im2Col(Op):
    """Gather k x k windows into rows: (N*Ho*Wo, C*k*k).

    Channels-first input yields column order (C, kh, kw); channels-last input
    (N, H, W, C) yields (kh, kw, C).
    """

    def forward(self, x):
        k, s = self.k, self.stride
        if self.channels_last:
            n, h, w, c = x.shape
        else:
            n, c, h, w = x.shape
        ho, wo = _out_size(h, k, s), _out_size(w, k, s)
        rows, cols = s * (ho - 1) + 1, s * (wo - 1) + 1
        if self.channels_last:
            windows = [x[:, i:i + rows:s, j:j + cols:s, :] for i in range(k) for j in range(k)]
            return np.stack(windows, axis=3).reshape(n * ho * wo, k * k * c)
        windows = [x[:, :, i:i + rows:s, j:j + cols:s] for i in range(k) for j in range(k)]
        stacked = np.stack(windows, axis=2)
        return stacked.transpose(0, 3, 4, 1, 2).reshape(n * ho * wo, c * k * k)

    def backward(self, g):
        return (Col2Im.apply(g, k=self.k, stride=self.stride, channels_last=self.channels_last,
                             in_shape=self.inputs[0].shape),)


class Col2Im(Op):
    """Adjoint of Im2Col: scatter-add rows back into an image."""

    def forward(self, g):
        k, s = self.k, self.stride
        out = np.zeros(self.in_shape, dtype=g.dtype)
        if self.channels_last:
            n, h, w, c = self.in_shape
        else:
            n, c, h, w = self.in_shape
        ho, wo = _out_size(h, k, s), _out_size(w, k, s)
        rows, cols = s * (ho - 1) + 1, s * (wo - 1) + 1
        if self.channels_last:
            g6 = g.reshape(n, ho, wo, k, k, c)
            for i in range(k):
                for j in range(k):
                    out[:, i:i + rows:s, j:j + cols:s, :] += g6[:, :, :, i, j, :]
        else:
            g6 = g.reshape(n, ho, wo, c, k, k)
            for i in range(k):
                for j in range(k):
                    out[:, :, i:i + rows:s, j:j + cols:s] += g6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return out

    def backward(self, g):
        return (Im2Col.apply(g, k=self.k, stride=self.stride, channels_last=self.channels_last),)


# -- functional surface -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return MatMul.apply(a, b)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    return Concat.apply(*tensors, axis=axis)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(as_tensor(x))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2,
           channels_last: bool = False) -> Tensor:
    """Valid (unpadded) cross-correlation.

    ``x`` is (C, H, W) or (N, C, H, W); with ``channels_last`` it is (N, H, W, C)
    and the result stays channels-last. ``w`` is always (C_out, C_in, k, k).
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d weight must be (C_out, C_in, k, k), got {w.shape}")
    single = x.ndim == 3 and not channels_last
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    c_out, c_in, k, _ = w.shape
    if channels_last:
        n, h, wd, c = x.shape
    else:
        n, c, h, wd = x.shape
    if c != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if h < k or wd < k:
        raise DimensionError(f"conv2d input {x.shape} smaller than {k}x{k} kernel")
    ho, wo = _out_size(h, k, stride), _out_size(wd, k, stride)
    cols = Im2Col.apply(x, k=k, stride=stride, channels_last=channels_last)
    if channels_last:
        wm = w.transpose(0, 2, 3, 1).reshape(c_out, k * k * c_in)
    else:
        wm = w.reshape(c_out, c_in * k * k)
    out = matmul(cols, wm.transpose()).reshape(n, ho, wo, c_out)
    if b is not None:
        out = out + as_tensor(b)
    if not channels_last:
        out = out.transpose(0, 3, 1, 2)
    if single:
        out = out.reshape(out.shape[1:])
    return out


def mean_pool(x: Tensor, channels_last: bool = False) -> Tensor:
    """Global average over the spatial axes: (C,H,W)->(C,), (N,C,H,W)->(N,C)."""
    x = as_tensor(x)
    if channels_last:
        return x.mean(axis=(1, 2))
    return x.mean(axis=(x.ndim - 2, x.ndim - 1))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in_features, out_features)."""
    x, w = as_tensor(x), as_tensor(w)
    vector = x.ndim == 1
    if vector:
        x = x.reshape(1, x.shape[0])
    out = matmul(x, w)
    if b is not None:
        out = out + as_tensor(b)
    return out.reshape(out.shape[1:]) if vector else out


def log_softmax(logits: Tensor) -> Tensor:
    return LogSoftmax.apply(as_tensor(logits))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy and the (detached) probabilities.

    ``logits`` is (K,) with an integer label or (N, K) with N labels.
    """
    logits = as_tensor(logits)
    num_classes = logits.shape[-1]
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"labels must be integers, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"label out of range [0, {num_classes}): {labels.tolist()}")
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    logp = log_softmax(logits)
    target = Tensor(one_hot(labels, num_classes, dtype=logits.dtype))
    nll = -(logp * target).sum(axis=-1)
    loss = nll.mean() if nll.ndim else nll
    return loss, np.exp(logp.data)


# -- tape and gradients -------------------------------------------------------

@dataclass
class Tape:
    """Recorded operations reachable from a root, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or node._op is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._op.inputs:
                if parent._op is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        found, seen = [], set()
        for node in self.nodes:
            for parent in node._op.inputs:
                if parent._op is None and parent.requires_grad and id(parent) not in seen:
                    seen.add(id(parent))
                    found.append(parent)
        return found


def _propagate(root: Tensor, seed: Tensor, create_graph: bool) -> tuple[Tape, dict[int, Tensor]]:
    tape = Tape.record(root)
    grads: dict[int, Tensor] = {id(root): seed}
    with grad_mode(create_graph):
        for node in reversed(tape.nodes):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, pg in zip(node._op.inputs, node._op.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    return tape, grads


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to ``inputs``.

    Unreachable inputs get zeros. With ``create_graph`` the returned tensors
    are themselves differentiable.
    """
    if output.size != 1:
        raise ContractError(f"grad needs a scalar output, got shape {output.shape}")
    seed = Tensor(np.ones(output.shape, dtype=output.dtype))
    _, grads = _propagate(output, seed, create_graph)
    result = []
    for t in inputs:
        g = grads.get(id(t))
        result.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return result


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dt into ``t.grad`` for every requires-grad tensor reached."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    seed = Tensor(np.ones(loss.shape, dtype=loss.dtype))
    tape, grads = _propagate(loss, seed, create_graph=False)
    for t in tape.nodes + tape.leaves():
        g = grads.get(id(t))
        if g is not None:
            t.grad = g.data.copy() if t.grad is None else t.grad + g.data


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params, lr: float):
    """Return fresh leaf tensors ``p - lr * p.grad``; inputs are left untouched."""
    def step(p: Tensor) -> Tensor:
        if p.grad is None:
            return Tensor(p.data.copy(), requires_grad=p.requires_grad, name=p.name)
        return Tensor(p.data - lr * p.grad, requires_grad=p.requires_grad, name=p.name)

    if isinstance(params, dict):
        return {k: step(v) for k, v in params.items()}
    return [step(p) for p in params]
