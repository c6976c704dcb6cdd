"""Small define-by-run reverse-mode autodiff on numpy arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.
:func:`backward` walks the recorded graph once in reverse topological
order.  All values are float64.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "concat",
    "reshape",
    "sum",
    "mean_rows",
    "relu",
    "sigmoid",
    "log",
    "log1p",
    "softmax_T",
    "standardize_rows",
    "l2_normalize_rows",
    "stop_gradient",
    "grad_only",
    "backward",
    "Adam",
    "optimizer_step",
    "save_checkpoint",
    "load_checkpoint",
]


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError("only single-element tensors convert to float")
        return float(self.value.reshape(()))

    def __float__(self):
        return self.item()

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor(value)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.value, b.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.value / b.value

    def back(g):
        ga = g / b.value
        return (
            _unbroadcast(ga, a.shape) if a.requires_grad else None,
            _unbroadcast(-ga * out, b.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.value * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.value)
    pos = a.value >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
    ez = np.exp(a.value[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(a, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped below first and the
    clamped entries pass no gradient."""
    a = as_tensor(a)
    if floor is None:
        if np.any(a.value <= 0):
            raise NonFiniteError("log of non-positive value")
        return _node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")
    keep = a.value > floor
    clamped = np.where(keep, a.value, floor)
    return _node(np.log(clamped), (a,), lambda g: (np.where(keep, g / clamped, 0.0),), "log")


def log1p(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log1p(a.value), (a,), lambda g: (g / (1.0 + a.value),), "log1p")


# -- structural ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.value @ b.value, (a, b), back, "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.value for t in ts], axis=axis), ts, back, "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean_rows(a) -> Tensor:
    """Mean over the second-to-last axis, keeping it as length 1."""
    a = as_tensor(a)
    n = a.shape[-2]
    if n == 0:
        raise ValueError("mean over zero rows")
    return _node(
        a.value.mean(axis=-2, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
        "mean_rows",
    )


def l2_normalize_rows(a) -> Tensor:
    """Scale each row (last axis) to unit L2 norm; zero rows stay zero."""
    a = as_tensor(a)
    norm = np.sqrt((a.value * a.value).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    out = np.where(norm > 0, a.value / safe, 0.0)

    def back(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(norm > 0, (g - out * dot) / safe, 0.0),)

    return _node(out, (a,), back, "l2_normalize_rows")


def softmax_T(z, T: float = 1.0, mask=None) -> Tensor:
    """Temperature softmax over the last axis.

    Entries where ``mask`` is false get probability exactly 0; each row
    needs at least one unmasked entry.
    """
    if not T > 0:
        raise ValueError("temperature must be positive")
    z = as_tensor(z)
    s = z.value / T
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not np.all(mask.any(axis=-1)):
            raise ValueError("softmax row with every entry masked")
        s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return ((out * (g - (g * out).sum(axis=-1, keepdims=True))) / T,)

    return _node(out, (z,), back, "softmax_T")


def standardize_rows(z, mask=None, eps: float = 1e-12) -> Tensor:
    """Zero-mean, unit-variance rows (last axis) over the unmasked entries.

    Masked entries come out as 0 and receive no gradient.
    """
    z = as_tensor(z)
    m = np.ones(z.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    w = m.astype(np.float64)
    n = np.maximum(w.sum(axis=-1, keepdims=True), 1.0)
    mu = (z.value * w).sum(axis=-1, keepdims=True) / n
    c = (z.value - mu) * w
    var = (c * c).sum(axis=-1, keepdims=True) / n
    sd = np.sqrt(var + eps)
    out = c / sd

    def back(g):
        g = g * w
        gm = g.sum(axis=-1, keepdims=True) / n
        gx = (g * out).sum(axis=-1, keepdims=True) / n
        return ((g - gm - out * gx) * w / sd,)

    return _node(out, (z,), back, "standardize_rows")


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value.copy())


def grad_only(a) -> Tensor:
    """Zero in the forward pass, identity in the backward pass.

    ``x + grad_only(y)`` has the exact value of ``x`` but routes gradients
    through ``y`` as well.
    """
    a = as_tensor(a)
    return _node(np.zeros_like(a.value), (a,), lambda g: (g,), "grad_only")


# -- reverse pass --------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the gradients of ``wrt`` (zeros for unreachable tensors) when
    given, else None.
    """
    if loss.value.size != 1:
        raise ValueError("backward needs a scalar loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if wrt is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.value) for t in wrt]


# -- optimisation --------------------------------------------------------


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict:
        grads = {k: g for k, g in grads.items() if g is not None}
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for name, value in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = value
                continue
            m = b1 * self.m.get(name, 0.0) + (1.0 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def optimizer_step(params, grads, lr, state: Adam | None = None):
    """One Adam step; pass ``state`` to carry moments across calls."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    opt = state if state is not None else Adam(lr=lr)
    opt.lr = lr
    return opt.step(params, grads)


# -- checkpoints ---------------------------------------------------------

_CKPT_MAGIC = b"HGCK"
_CKPT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Versioned header, JSON manifest, then row-major little-endian float64."""
    names = sorted(params)
    manifest = {
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(np.shape(params[n]))} for n in names],
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IQ", _CKPT_VERSION, len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<IQ")
    manifest = json.loads(blob[off : off + hlen])
    off += hlen
    params = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = off + 8 * count
        if end > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        params[entry["name"]] = np.frombuffer(blob[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return params, manifest["meta"]
