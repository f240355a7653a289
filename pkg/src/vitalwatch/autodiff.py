"""Small reverse-mode automatic differentiation on top of numpy.

Every differentiable operation records a node on the active :class:`Tape`.
Calling :meth:`Tape.backward` walks the recorded nodes once, newest first,
and accumulates gradients into the ``grad`` buffer of each input tensor.

Broadcasting follows numpy rules for ``add``/``sub``/``mul``; gradients are
summed back onto the smaller operand.  Everything else requires explicit
shapes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""


class Tensor:
    """Dense float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "tape_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar keeps model code readable
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of executed ops."""

    nodes: list[_Node] = field(default_factory=list)

    def record(self, op, inputs, output, backward) -> None:
        output.tape_id = len(self.nodes)
        self.nodes.append(_Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(x) into ``x.grad`` for every leaf with requires_grad."""
        if seed is None:
            if loss.size != 1:
                raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.tape_id is None:  # leaf
                    inp.grad = gi if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi
        self.nodes.clear()


_active: list[Tape | None] = [None]


class recording:
    """Context manager that makes ``tape`` the target of recorded ops."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def __enter__(self) -> Tape:
        _active.append(self.tape)
        return self.tape

    def __exit__(self, *exc) -> None:
        _active.pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    tape = _active[-1]
    if needs and tape is not None:
        tape.record(op, inputs, result, backward)
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    inner = _SQRT_2_OVER_PI * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner),)

    return _emit("gelu", (x,), out, backward)


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy ``@`` semantics)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), out, backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} do not agree off axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _emit("slice", (x,), np.array(out, copy=True), backward)


def linear_interp_resize(x: Tensor, axis: int, new_len: int) -> Tensor:
    """Resample ``x`` along ``axis`` to ``new_len`` points by linear interpolation.

    Endpoints map onto endpoints (align-corners); a length-1 source is
    repeated.
    """
    axis = axis % x.data.ndim
    old_len = x.shape[axis]
    if new_len < 1 or old_len < 1:
        raise ShapeError(f"linear_interp_resize: lengths must be >= 1, got {old_len}->{new_len}")
    weights = interp_matrix(old_len, new_len)  # new_len x old_len
    moved = np.moveaxis(x.data, axis, -1)
    out = np.moveaxis(moved @ weights.T, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1) @ weights
        return (np.moveaxis(gm, -1, axis),)

    return _emit("linear_interp_resize", (x,), out, backward)


def interp_matrix(old_len: int, new_len: int) -> np.ndarray:
    """Row i holds the weights mapping an ``old_len`` vector to sample i of the output."""
    m = np.zeros((new_len, old_len))
    if old_len == 1:
        m[:, 0] = 1.0
        return m
    pos = np.zeros(1) if new_len == 1 else np.linspace(0.0, old_len - 1.0, new_len)
    lo = np.minimum(np.floor(pos).astype(int), old_len - 2)
    frac = pos - lo
    rows = np.arange(new_len)
    m[rows, lo] += 1.0 - frac
    m[rows, lo + 1] += frac
    return m


# ---------------------------------------------------------------------------
# reductions and normalisers
# ---------------------------------------------------------------------------


def reduce_mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    """Mean over ``axis`` (kept as size-1 axes), or over everything as a scalar."""
    kept = x.data.mean(axis=axis, keepdims=True)
    count = x.size // kept.size
    out = kept.reshape(()) if axis is None else kept
    return _emit(
        "reduce_mean",
        (x,),
        out,
        lambda g: (np.broadcast_to(np.reshape(g, kept.shape), x.shape) / count,),
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), out, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine pair."""
    if axis not in (-1, x.data.ndim - 1):
        raise ShapeError("layer_norm: only the last axis is supported")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        d = x.shape[-1]
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _emit("layer_norm", (x, gamma, beta), out, backward)


def mse_loss(pred: Tensor, target, weights=None) -> Tensor:
    """Mean squared error; with ``weights`` (0/1 mask) it averages over weighted cells only."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape}")
    w = np.ones_like(target) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("mse_loss: no weighted cells")
    # masked cells never contribute, whatever their target value
    diff = np.where(w > 0, pred.data - np.where(w > 0, target, 0.0), 0.0)
    out = np.asarray((w * diff**2).sum() / total)
    return _emit("mse_loss", (pred,), out, lambda g: (g * 2.0 * w * diff / total,))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 5e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> bool:
    """In-place Adam update.  Returns False (and leaves params alone) on non-finite grads."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"adam_step: unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step: grad {name} has shape {g.shape}, param {params[name].shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        return False
    state.t += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        params[name].data = params[name].data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


def exponential_lr(lr0: float, gamma: float, epoch: int) -> float:
    return lr0 * gamma**epoch


# ---------------------------------------------------------------------------
# checkpoint IO
# ---------------------------------------------------------------------------

MAGIC = b"VWCKPT\x00\x01"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays as little-endian float32, sorted by name."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", raw, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * n
    return out


def finite_difference_grad(f: Callable[[], float], x: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` w.r.t. every entry of ``x``."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        grad.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return grad


def parameters_by_name(tensors: Iterable[tuple[str, Tensor]]) -> dict[str, Tensor]:
    return {name: t for name, t in tensors}
