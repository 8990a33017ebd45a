"""Dense float64 tensors with first-order reverse-mode differentiation.

Every op that touches a tensor requiring gradients records a node holding
its inputs and a closure over the saved activations. Nodes carry a global
sequence number, so creation order is a valid topological order and
:func:`backward` just replays the reachable nodes in reverse.

Arrays may carry leading batch axes; weights broadcast over them.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_seq = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Node:
    __slots__ = ("seq", "inputs", "backward_fn", "op")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A named trainable leaf. ``grad`` always exists and matches ``data``."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # batch of row blocks times one weight: a single 2-D GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out_shape = a.shape[:-1] + (b.shape[-1],)

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make("matmul", (a2 @ b.data).reshape(out_shape), (a, b), bw2)

    def bw(g):
        ga = _unbroadcast(g @ _swap(b.data), a.shape)
        gb = _unbroadcast(_swap(a.data) @ g, b.shape)
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    y = matmul(x, transpose(w))
    return y if b is None else add(y, b)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    parts = [as_tensor(p) for p in parts]
    widths = [p.shape[-1] for p in parts]
    cuts = np.cumsum(widths)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _make("concat", np.concatenate([p.data for p in parts], axis=-1), parts, bw)


# ---------------------------------------------------------------------------
# reductions and gathers
# ---------------------------------------------------------------------------


def sum_axis(a: Tensor, axis: int) -> Tensor:
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", a.data.sum(axis=axis), (a,), bw)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    return scale(sum_axis(a, axis), 1.0 / a.shape[axis])


def max_axis(a: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; ties route the gradient to the first maximiser."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make("max", out, (a,), bw)


def total(a: Tensor) -> Tensor:
    """Sum of every entry, as a 0-d tensor."""
    shape = a.shape
    return _make("total", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.full(shape, float(g)),))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows (axis -2) per batch entry. ``idx`` holds distinct row indices, shape (..., k)."""
    idx = np.expand_dims(np.asarray(idx), -1)
    full = np.broadcast_to(idx, idx.shape[:-1] + (a.shape[-1],))

    def bw(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, full, g, axis=-2)
        return (out,)

    return _make("gather_rows", np.take_along_axis(a.data, full, axis=-2), (a,), bw)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    a = as_tensor(a)
    _check_finite(a.data, "softmax_rows input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    s = ex / ex.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make("softmax", s, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row over the last axis, then apply gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), bw)


def nll_from_probs(probs: Tensor, labels, floor: float = 1e-12) -> Tensor:
    """Mean of ``-log p[label]`` over the batch, with p clamped below at ``floor``."""
    p = probs.data
    if p.ndim == 1:
        p = p[None, :]
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != p.shape[0]:
        raise ValueError("one label per probability row required")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= p.shape[-1]:
        raise ValueError(f"invalid labels {labels.tolist()} for {p.shape[-1]} classes")
    rows = np.arange(p.shape[0])
    picked = p[rows, labels]
    clamped = np.maximum(picked, floor)
    loss = -np.log(clamped).mean()

    def bw(g):
        full = np.zeros_like(p)
        full[rows, labels] = np.where(picked > floor, -1.0 / clamped, 0.0) / p.shape[0]
        return ((float(g) * full).reshape(probs.shape),)

    return _make("nll", np.asarray(loss), (probs,), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy computed from logits through a stable log-softmax.

    Unlike :func:`nll_from_probs` the gradient never vanishes for confidently
    wrong predictions.
    """
    logits = as_tensor(logits)
    z = logits.data if logits.ndim > 1 else logits.data[None, :]
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != z.shape[0] or labels.dtype.kind not in "iu" \
            or labels.min() < 0 or labels.max() >= z.shape[-1]:
        raise ValueError(f"invalid labels {labels.tolist()} for logits {z.shape}")
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return ((float(g) / z.shape[0] * grad).reshape(logits.shape),)

    return _make("softmax_xent", np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss._node is None:
        raise RuntimeError("backward called on a tensor with no recorded forward pass")
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._node is None or t._node.seq in nodes:
            continue
        nodes[t._node.seq] = t
        stack.extend(i for i in t._node.inputs if i.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for seq in sorted(nodes, reverse=True):
        out = nodes[seq]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(out._node.inputs, out._node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + gi
            else:
                grads[id(inp)] = gi


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: tuple[str, tuple[int, ...]] | None = None
    errors: list[float] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    tolerance: float = 1e-4,
    n_coords: int = 200,
    step: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode grads with central differences on sampled coordinates.

    ``loss_fn`` must rebuild the forward pass from the current parameter
    values each time it is called.
    """
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic = {id(p): p.grad.copy() for p in params}

    coords = [(pi, idx) for pi, p in enumerate(params) for idx in np.ndindex(p.shape)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    errors = []
    worst, worst_err = None, -1.0
    for pi, idx in coords:
        p = params[pi]
        orig = p.data[idx]
        p.data[idx] = orig + step
        up = float(loss_fn().data)
        p.data[idx] = orig - step
        down = float(loss_fn().data)
        p.data[idx] = orig
        numeric = (up - down) / (2 * step)
        err = relative_error(float(analytic[id(p)][idx]), numeric)
        errors.append(err)
        if err > worst_err:
            worst, worst_err = (p.name or f"param{pi}", idx), err
    return GradCheckReport(max(errors, default=0.0), len(errors), tolerance, worst, errors)
