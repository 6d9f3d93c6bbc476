"""A small reverse-mode autodiff engine on top of numpy.

Only the operations the PFS models need are provided: 3x3x3 same-padding
convolution, 2x2x2 max pooling, affine layers, ReLU, inverted dropout,
concatenation, reshaping, and the two training losses. Tensors default to
float32; pass ``dtype=np.float64`` to get a shadow graph for finite-difference
checks.

Every op that touches a tensor with ``requires_grad`` records a :class:`Node`
on its output. :func:`backward` recovers a topological order from the loss by
depth-first search, so a graph is just the set of nodes reachable from one
loss and no global state is shared between threads (apart from the
thread-local :func:`no_grad` flag).
"""

from __future__ import annotations

import contextlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ParameterError, UsageError, ValidationError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs and how to push gradients into them."""

    op: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], tuple]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # elementwise helpers; kept deliberately small (same shape or python scalar)
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, (int, float)) else mul(other, -1.0))

    def sum(self) -> Tensor:
        return tensor_sum(self)

    def mean(self) -> Tensor:
        return mul(tensor_sum(self), 1.0 / self.size)

    def reshape(self, *shape) -> Tensor:
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _raise_nonscalar():
    raise UsageError("item() needs a single-element tensor")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, op: str, inputs: tuple, backward_fn) -> Tensor:
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        out.node = Node(op, inputs, backward_fn)
    return out


def topological_order(loss: Tensor) -> list[Tensor]:
    """Tensors reachable from ``loss`` with every input before its consumer."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if b.shape not in (a.shape, ()):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        return g, (g if b.shape == a.shape else np.asarray(g.sum(), dtype=g.dtype))

    return _make(a.data + b.data, "add", (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        k = float(b)
        return _make(a.data * a.dtype.type(k), "scale", (a,), lambda g: (g * g.dtype.type(k),))
    if b.shape != a.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def tensor_sum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValidationError("concat of nothing")
    ref = tensors[0].shape
    for t in tensors:
        if t.data.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise DimensionError(f"concat: incompatible shapes {[x.shape for x in tensors]}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, x.dtype.type(0))
    return _make(out, "relu", (x,), lambda g: (g * (out > 0),))


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); eval mode is exact identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return _make(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    # einsum reduces every row in the same order (BLAS tiles may not), so identical rows give identical outputs
    out = np.einsum("nk,mk->nm", x.data, weight.data) + bias.data

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, "linear", (x, weight, bias), bw)


def _im2col(xp: np.ndarray, spatial: tuple) -> np.ndarray:
    """Patches of a zero-padded [N,C,D+2,H+2,W+2] array as [N, C*27, D*H*W].

    Rows are ordered (c, kd, kh, kw) to match ``kernel.reshape(F, C*27)``; the
    column axis is the flattened output grid, so ``W @ col`` is already NCDHW.
    """
    n, c = xp.shape[:2]
    d, h, w = spatial
    col = np.empty((n, c, 27, d, h, w), dtype=xp.dtype)
    o = 0
    for a in range(3):
        for b in range(3):
            for e in range(3):
                col[:, :, o] = xp[:, :, a:a + d, b:b + h, e:e + w]
                o += 1
    return col.reshape(n, c * 27, d * h * w)


def _pad1(a: np.ndarray) -> np.ndarray:
    return np.pad(a, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3x3 cross-correlation, stride 1, zero padding 1 (output keeps the input's spatial size)."""
    if x.data.ndim != 5:
        raise DimensionError(f"conv3d expects [N,C,D,H,W], got {x.shape}")
    if kernel.data.ndim != 5 or kernel.shape[2:] != (3, 3, 3):
        raise DimensionError(f"conv3d kernel must be [F,C,3,3,3], got {kernel.shape}")
    n, c, d, h, w = x.shape
    f = kernel.shape[0]
    if kernel.shape[1] != c:
        raise DimensionError(f"conv3d: input has {c} channels, kernel expects {kernel.shape[1]}")
    if bias.shape != (f,):
        raise DimensionError(f"conv3d: bias {bias.shape} for {f} filters")
    col = _im2col(_pad1(x.data), (d, h, w))
    wm = kernel.data.reshape(f, c * 27)
    out = np.matmul(wm, col)
    out += bias.data[:, None]

    def bw(g):
        g3 = g.reshape(n, f, d * h * w)
        gk = np.matmul(g3, col.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # the adjoint of a same-padded 3x3x3 correlation is another one,
            # with the kernel flipped in space and its channel axes swapped
            wt = kernel.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4).reshape(c, f * 27)
            gx = np.matmul(wt, _im2col(_pad1(g), (d, h, w))).reshape(x.shape)
        return gx, gk, gb

    return _make(out.reshape(n, f, d, h, w), "conv3d", (x, kernel, bias), bw)


def maxpool3d(x: Tensor, window: int = 2) -> Tensor:
    """2x2x2 / stride-2 max pooling in ceil mode (padding with -inf).

    The gradient goes to the first maximal element of each window in
    row-major order, which is also the lowest flat index in the input.
    """
    if window != 2:
        raise ParameterError("only window=2 is supported")
    if x.data.ndim != 5:
        raise DimensionError(f"maxpool3d expects [N,C,D,H,W], got {x.shape}")
    n, c, d, h, w = x.shape
    pd, ph, pw = d % 2, h % 2, w % 2
    xp = x.data
    if pd or ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (0, pd), (0, ph), (0, pw)), constant_values=-np.inf)
    offsets = [(a, b, e) for a in range(2) for b in range(2) for e in range(2)]
    views = [xp[:, :, a::2, b::2, e::2] for a, b, e in offsets]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for (a, b, e), v in zip(offsets, views):
            hit = (v == out) & ~taken
            gxp[:, :, a::2, b::2, e::2] = g * hit
            taken |= hit
        return (np.ascontiguousarray(gxp[:, :, :d, :h, :w]),)

    return _make(out, "maxpool3d", (x,), bw)


# --------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on raw logits, in the overflow-free form."""
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=logits.dtype).reshape(-1)
    z = logits.data.reshape(-1)
    if y.shape != z.shape:
        raise DimensionError(f"bce: {z.shape[0]} logits vs {y.shape[0]} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("bce labels must be 0 or 1")
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    src = logits.shape

    def bw(g):
        sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return ((g * (sig - y) / z.size).astype(logits.dtype).reshape(src),)

    return _make(np.asarray(loss, dtype=logits.dtype), "bce_with_logits", (logits,), bw)


def mse_loss(pred: Tensor, target) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype).reshape(pred.shape)
    diff = pred.data - t
    return _make(np.asarray(np.mean(diff * diff), dtype=pred.dtype), "mse", (pred,),
                 lambda g: (g * 2.0 * diff / diff.size,))


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Plain numpy logistic function, stable for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    learning_rate: float = 0.01
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One in-place Adam update with decoupled weight decay.

    ``theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)``
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise DimensionError("optimizer state does not match parameter set")
    state.step_count += 1
    t = state.step_count
    b1, b2, lr = state.beta1, state.beta2, state.learning_rate
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    decay = 1.0 - lr * state.weight_decay
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape or (g is not None and g.shape != p.shape):
            raise DimensionError(f"state/grad shape mismatch for parameter of shape {p.shape}")
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p *= p.dtype.type(decay)
        p -= (lr * update).astype(p.dtype)


class Adam:
    """Stateful wrapper over :func:`adam_step` for a fixed list of parameter tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float = 0.01, weight_decay: float = 0.2,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate=lr, weight_decay=weight_decay, beta1=betas[0],
                               beta2=betas[1], epsilon=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)


# --------------------------------------------------------------------------
# checkpoints: <stem>.bin (little-endian float32) + <stem>.json manifest


def save_checkpoint(path: str | Path, tensors: dict[str, Tensor | np.ndarray]) -> None:
    path = Path(path)
    entries = []
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, t in tensors.items():
            arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    path.with_suffix(".json").write_text(json.dumps({"dtype": "float32-le", "tensors": entries}, indent=1))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    out = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return out
