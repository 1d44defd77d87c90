"""Minimal reverse-mode tensor engine over float64 numpy arrays.

A fixed op set (affine maps, 2-D convolution, pooling, element-wise
arithmetic, sigmoid/ReLU, reductions, softmax, cross-entropy, max, hinge)
recorded on a tape, plus a grouped Adam optimizer and a finite-difference
gradient checker. No GPU, no mixed precision, no dynamic op extension.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class NonFiniteError(ArithmeticError):
    """An op produced (or was handed) NaN/Inf values."""


PARAM_GROUPS = ("backbone_E", "grouping_G", "encoder_PD", "predictor_V")


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: result contains non-finite values")


class Tensor:
    """Dense float64 array node; records parents for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 _parents: tuple = (), _backward=None):
        self.data = _as_array(data)
        _check_finite(self.data, op)
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- graph mechanics ----------------------------------------------------

    def backward(self) -> None:
        """Reverse-accumulate d(self)/d(leaf) into .grad of reachable tensors."""
        if self.data.size != 1:
            raise ShapeError("backward: output must be scalar")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def _accum(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return add(self, mul(_coerce(other), _const(-1.0)))

    def __rsub__(self, other):
        return add(_coerce(other), mul(self, _const(-1.0)))

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __neg__(self):
        return mul(self, _const(-1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor) or not np.isscalar(other):
            raise ShapeError("div: only division by a python scalar is supported")
        return mul(self, _const(1.0 / float(other)))

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _const(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


def _node(data, parents, backward, op) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, op=op, _parents=tuple(parents),
                 _backward=backward if requires else None)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over axes that numpy broadcasting expanded from `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- element-wise ops --------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} + {b.shape}") from exc
    out = _node(data, (a, b), None, "add")

    def backward():
        a._accum(_unbroadcast(out.grad, a.shape))
        b._accum(_unbroadcast(out.grad, b.shape))

    out._backward = backward if out.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} * {b.shape}") from exc
    out = _node(data, (a, b), None, "mul")

    def backward():
        a._accum(_unbroadcast(out.grad * b.data, a.shape))
        b._accum(_unbroadcast(out.grad * a.data, b.shape))

    out._backward = backward if out.requires_grad else None
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise max; on ties the gradient routes to the first operand."""
    try:
        data = np.maximum(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"maximum: {a.shape} vs {b.shape}") from exc
    out = _node(data, (a, b), None, "maximum")

    def backward():
        take_a = a.data >= b.data
        a._accum(_unbroadcast(out.grad * take_a, a.shape))
        b._accum(_unbroadcast(out.grad * ~take_a, b.shape))

    out._backward = backward if out.requires_grad else None
    return out


def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0.0), (x,), None, "relu")

    def backward():
        x._accum(out.grad * (x.data > 0.0))

    out._backward = backward if out.requires_grad else None
    return out


# The hinge clamp [.]_+ is exactly ReLU.
hinge = relu


def sigmoid(x: Tensor) -> Tensor:
    # clip keeps exp() finite; sigmoid is constant to double precision out there
    z = np.clip(x.data, -500.0, 500.0)
    s = 1.0 / (1.0 + np.exp(-z))
    out = _node(s, (x,), None, "sigmoid")

    def backward():
        x._accum(out.grad * s * (1.0 - s))

    out._backward = backward if out.requires_grad else None
    return out


# -- structural ops ----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {x.shape} -> {shape}") from exc
    out = _node(data, (x,), None, "reshape")

    def backward():
        x._accum(out.grad.reshape(x.shape))

    out._backward = backward if out.requires_grad else None
    return out


def transpose(x: Tensor, axes=None) -> Tensor:
    perm = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    out = _node(np.transpose(x.data, perm), (x,), None, "transpose")
    inverse = np.argsort(perm)

    def backward():
        x._accum(np.transpose(out.grad, inverse))

    out._backward = backward if out.requires_grad else None
    return out


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[p.shape for p in parts]}") from exc
    out = _node(data, tuple(parts), None, "concat")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(lo, hi)
            part._accum(out.grad[tuple(idx)])

    out._backward = backward if out.requires_grad else None
    return out


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select fixed integer indices along an axis (gather; scatter-add on backward)."""
    idx = np.asarray(indices, dtype=np.intp)
    if np.any(idx < 0) or np.any(idx >= x.shape[axis]):
        raise ShapeError(f"take: indices out of range for axis {axis} of {x.shape}")
    out = _node(np.take(x.data, idx, axis=axis), (x,), None, "take")

    def backward():
        dx = np.zeros_like(x.data)
        moved = np.moveaxis(dx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(out.grad, axis, 0))
        x._accum(dx)

    out._backward = backward if out.requires_grad else None
    return out


# -- reductions ---------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), None, "sum")

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    out._backward = backward if out.requires_grad else None
    return out


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = _node(x.data.mean(axis=axis, keepdims=keepdims), (x,), None, "mean")

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape) / count)

    out._backward = backward if out.requires_grad else None
    return out


def sq_norm(x: Tensor) -> Tensor:
    """Squared L2 norm of all entries (Frobenius norm squared for matrices)."""
    return tsum(mul(x, x))


def amax(x: Tensor, axis: int) -> Tensor:
    """Max along one axis; gradient routes to the first (row-major) argmax."""
    out = _node(x.data.max(axis=axis), (x,), None, "amax")
    idx = x.data.argmax(axis=axis)

    def backward():
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, np.expand_dims(idx, axis),
                          np.expand_dims(out.grad, axis), axis)
        x._accum(dx)

    out._backward = backward if out.requires_grad else None
    return out


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D/3-D operands (3-D = leading batch dimension)."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul: operands must be 2-D or 3-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    out = _node(np.matmul(a.data, b.data), (a, b), None, "matmul")

    def backward():
        g = out.grad
        a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    out._backward = backward if out.requires_grad else None
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense affine map y = x @ W^T + b with W of shape (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: x {x.shape} with weight {weight.shape}")
    y = matmul(x, transpose(weight))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs out dim {weight.shape[0]}")
        y = add(y, bias)
    return y


# -- spatial ops ---------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, weight (out_ch, in_ch, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: x {x.shape}, weight {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    data = np.einsum("nchwij,ocij->nohw", win, weight.data, optimize=True)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias {bias.shape} vs out channels {cout}")
        data = data + bias.data[None, :, None, None]
    ho, wo = data.shape[2], data.shape[3]
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _node(data, parents, None, "conv2d")

    def backward():
        g = out.grad
        weight._accum(np.einsum("nchwij,nohw->ocij", win, g, optimize=True))
        if bias is not None:
            bias._accum(g.sum(axis=(0, 2, 3)))
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    np.einsum("nohw,oc->nchw", g, weight.data[:, :, i, j], optimize=True)
        x._accum(dxp[:, :, padding:padding + h, padding:padding + w])

    out._backward = backward if out.requires_grad else None
    return out


def _pool_windows(x: Tensor, size: int):
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"pool: spatial dims {h}x{w} not divisible by {size}")
    ho, wo = h // size, w // size
    win = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, ho, wo, size * size), (n, c, ho, wo)


def max_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pool; ties route gradient to the first window cell."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected NCHW input, got {x.shape}")
    if size == 1:
        return x
    win, (n, c, ho, wo) = _pool_windows(x, size)
    idx = win.argmax(axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = _node(data, (x,), None, "max_pool2d")

    def backward():
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], out.grad[..., None], axis=-1)
        dx = dwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        x._accum(dx.reshape(x.shape))

    out._backward = backward if out.requires_grad else None
    return out


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected NCHW input, got {x.shape}")
    if size == 1:
        return x
    win, (n, c, ho, wo) = _pool_windows(x, size)
    out = _node(win.mean(axis=-1), (x,), None, "avg_pool2d")

    def backward():
        dwin = np.broadcast_to(out.grad[..., None] / (size * size), win.shape)
        dx = dwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        x._accum(dx.reshape(x.shape))

    out._backward = backward if out.requires_grad else None
    return out


# -- classification ops ---------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _node(s, (x,), None, "softmax")

    def backward():
        g = out.grad
        dot = (g * s).sum(axis=axis, keepdims=True)
        x._accum(s * (g - dot))

    out._backward = backward if out.requires_grad else None
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample cross-entropy against one-hot integer labels.

    logits: (N, C); labels: int array (N,). Returns a length-N tensor so
    callers can weight/mask samples before reducing.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (N, C), got {logits.shape}")
    y = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if y.shape != (n,):
        raise ShapeError(f"cross_entropy: labels {y.shape} vs logits {logits.shape}")
    if np.any(y < 0) or np.any(y >= c):
        raise ShapeError(f"cross_entropy: label out of range [0, {c})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    data = lse - z[np.arange(n), y]
    out = _node(data, (logits,), None, "cross_entropy")

    def backward():
        probs = np.exp(z - m)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(n), y] -= 1.0
        logits._accum(probs * out.grad[:, None])

    out._backward = backward if out.requires_grad else None
    return out


# -- parameters and optimizer -----------------------------------------------------


class ParamSet:
    """Named trainable tensors, each tagged with one optimizer group."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._groups: dict[str, str] = {}

    def add(self, name: str, tensor: Tensor, group: str) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        tensor.requires_grad = True
        self._tensors[name] = tensor
        self._groups[name] = group
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def in_groups(self, groups) -> list[str]:
        wanted = set(groups)
        return [n for n in self.names() if self._groups[n] in wanted]

    def items(self):
        for name in self.names():
            yield name, self._tensors[name], self._groups[name]

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def fill_missing_grads(self) -> None:
        """Give zero gradient to parameters the loss did not touch."""
        for t in self._tensors.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}


@dataclass
class AdamState:
    """Per-parameter Adam moment buffers plus the step hyperparameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adam_step(params: ParamSet, state: AdamState, groups) -> None:
    """Bias-corrected Adam update restricted to the given parameter groups.

    Parameters outside `groups` are untouched byte-for-byte. Gradients of
    updated parameters are consumed (reset to None).
    """
    names = params.in_groups(groups)
    for name in names:
        if params[name].grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    for name in names:
        p = params[name]
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        v = state.v[name]
        t = state.t[name] + 1
        state.t[name] = t
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        _check_finite(p.data, "adam_step")
        p.grad = None


# -- gradient checking ----------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: tuple


@dataclass
class GradCheckReport:
    tol: float
    entries: list[GradCheckEntry]

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def passed(self) -> bool:
        return all(e.max_rel_err <= self.tol for e in self.entries)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_err > self.tol]


def grad_check(loss_fn, params: ParamSet, h: float = 1e-5, tol: float = 1e-4,
               grad_transform=None) -> GradCheckReport:
    """Compare backward gradients of loss_fn() against central differences.

    loss_fn must be a deterministic closure over `params` returning a scalar
    Tensor. `grad_transform(name, grad) -> grad` is a fault-injection hook
    for testing the checker itself. Relative error uses max(1, |a|, |b|) in
    the denominator so near-zero gradients are judged absolutely.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    params.zero_grads()
    out = loss_fn()
    out.backward()
    params.fill_missing_grads()
    analytic = {name: t.grad.copy() for name, t, _ in params.items()}
    if grad_transform is not None:
        analytic = {name: grad_transform(name, g) for name, g in analytic.items()}
    params.zero_grads()

    entries = []
    for name, tensor, _ in params.items():
        an = analytic[name]
        flat = tensor.data.reshape(-1)
        worst = 0.0
        worst_idx = ()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn().item()
            flat[i] = orig - h
            f_minus = loss_fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            an_i = an.reshape(-1)[i]
            err = abs(fd - an_i) / max(1.0, abs(fd), abs(an_i))
            if err > worst:
                worst = err
                worst_idx = np.unravel_index(i, tensor.shape)
        entries.append(GradCheckEntry(name=name, max_rel_err=worst, worst_index=worst_idx))
    return GradCheckReport(tol=tol, entries=entries)
