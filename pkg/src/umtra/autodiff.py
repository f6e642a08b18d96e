"""Dense float64 tensors with reverse-mode differentiation.

Every primitive records a node carrying a monotonically increasing sequence
number; the nodes reachable from a loss, ordered by that number, form the tape
that :func:`grad` replays backwards.  Backward rules are themselves written in
terms of differentiable primitives, so running them with ``create_graph=True``
records a fresh tape and gradients of gradients come for free.
"""

from __future__ import annotations

import itertools
import struct
import threading
from contextlib import contextmanager
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Scalar = Union[int, float]

_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def set_grad_enabled(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    """A float64 array, optionally attached to the computation graph."""

    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Function | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self, requires_grad: bool = False) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = requires_grad
        out.node = None
        out.name = self.name
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return sum_to(self, ())

    def mean(self) -> "Tensor":
        return scale(sum_to(self, ()), 1.0 / self.size)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _raw(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.node = None
    out.name = None
    return out


class Function:
    """A recorded primitive: forward on arrays, backward on Tensors."""

    __slots__ = ("inputs", "seq", "kw")

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: Tensor) -> Sequence[Tensor | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kw) -> Tensor:
        fn = cls()
        fn.kw = kw
        out = _raw(fn.forward(*(t.data for t in inputs)))
        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            fn.inputs = inputs
            fn.seq = next(_seq)
            out.requires_grad = True
            out.node = fn
        return out


def _check_same(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_like(g: Tensor, like: Tensor) -> Tensor:
    return g if g.shape == like.shape else sum_to(g, like.shape)


class _Add(Function):
    __slots__ = ()

    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return _reduce_like(g, a), _reduce_like(g, b)


class _Sub(Function):
    __slots__ = ()

    def forward(self, a, b):
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return _reduce_like(g, a), _reduce_like(scale(g, -1.0), b)


class _Mul(Function):
    __slots__ = ()

    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = _reduce_like(mul(g, b), a) if a.requires_grad else None
        gb = _reduce_like(mul(g, a), b) if b.requires_grad else None
        return ga, gb


class _Scale(Function):
    __slots__ = ()

    def forward(self, a):
        return a * self.kw["c"]

    def backward(self, g):
        return (scale(g, self.kw["c"]),)


class _AddConst(Function):
    __slots__ = ()

    def forward(self, a):
        return a + self.kw["c"]

    def backward(self, g):
        return (g,)


class _Relu(Function):
    __slots__ = ()

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, g):
        (a,) = self.inputs
        return (mul(g, _raw((a.data > 0).astype(np.float64))),)


class _Exp(Function):
    __slots__ = ()

    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        (a,) = self.inputs
        return (mul(g, exp(a)),)


class _Power(Function):
    __slots__ = ()

    def forward(self, a):
        return a ** self.kw["p"]

    def backward(self, g):
        (a,) = self.inputs
        p = self.kw["p"]
        if p == 1.0:
            return (g,)
        return (mul(g, scale(power(a, p - 1.0), p)),)


class _MatMul(Function):
    __slots__ = ()

    def forward(self, a, b):
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb


class _Transpose(Function):
    __slots__ = ()

    def forward(self, a):
        return np.ascontiguousarray(a.T)

    def backward(self, g):
        return (transpose(g),)


class _Reshape(Function):
    __slots__ = ()

    def forward(self, a):
        return a.reshape(self.kw["shape"])

    def backward(self, g):
        return (reshape(g, self.inputs[0].shape),)


class _BroadcastTo(Function):
    __slots__ = ()

    def forward(self, a):
        return np.broadcast_to(a, self.kw["shape"])

    def backward(self, g):
        return (sum_to(g, self.inputs[0].shape),)


def _sum_to_array(a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if a.shape == shape:
        return a.copy()
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1
    )
    out = a.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


class _SumTo(Function):
    __slots__ = ()

    def forward(self, a):
        return _sum_to_array(a, self.kw["shape"])

    def backward(self, g):
        return (broadcast_to(g, self.inputs[0].shape),)


class _LogSoftmax(Function):
    __slots__ = ()

    def forward(self, a):
        z = a - a.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def backward(self, g):
        (a,) = self.inputs
        probs = exp(log_softmax(a))
        total = broadcast_to(sum_to(g, (g.shape[0], 1)), g.shape)
        return (sub(g, mul(probs, total)),)


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def _windows(x: np.ndarray) -> np.ndarray:
    """B x C x H x W x 3 x 3 view of the zero-padded 3x3 neighbourhoods."""
    return sliding_window_view(_pad1(x), (3, 3), axis=(2, 3))


def _conv_fwd(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    b, _, h, wd = x.shape
    xp = _pad1(x)
    out = np.zeros((b, h, wd, w.shape[0]))
    for i in range(3):
        for j in range(3):
            out += np.tensordot(xp[:, :, i : i + h, j : j + wd], w[:, :, i, j], axes=([1], [1]))
    return out.transpose(0, 3, 1, 2)


def _conv_input_grad(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("bfhwij,fcij->bchw", _windows(g), w[:, :, ::-1, ::-1], optimize=True)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.einsum("bchwij,bfhw->fcij", _windows(x), g, optimize=True)


class _Conv2d(Function):
    __slots__ = ()

    def forward(self, x, w):
        return _conv_fwd(x, w)

    def backward(self, g):
        x, w = self.inputs
        gx = conv2d_input_grad(g, w) if x.requires_grad else None
        gw = conv2d_weight_grad(x, g) if w.requires_grad else None
        return gx, gw


class _Conv2dInputGrad(Function):
    """Adjoint of the convolution with respect to its input (a transposed conv)."""

    __slots__ = ()

    def forward(self, g, w):
        return _conv_input_grad(g, w)

    def backward(self, z):
        g, w = self.inputs
        gg = conv2d(z, w) if g.requires_grad else None
        gw = conv2d_weight_grad(z, g) if w.requires_grad else None
        return gg, gw


class _Conv2dWeightGrad(Function):
    __slots__ = ()

    def forward(self, x, g):
        return _conv_weight_grad(x, g)

    def backward(self, z):
        x, g = self.inputs
        gx = conv2d_input_grad(g, z) if x.requires_grad else None
        gg = conv2d(x, z) if g.requires_grad else None
        return gx, gg


class _Gather(Function):
    """Flat-index gather; the index array is a constant of the node."""

    __slots__ = ()

    def forward(self, a):
        return a.reshape(-1)[self.kw["idx"]]

    def backward(self, g):
        return (_Scatter.apply(g, idx=self.kw["idx"], shape=self.inputs[0].shape),)


class _Scatter(Function):
    __slots__ = ()

    def forward(self, g):
        out = np.zeros(int(np.prod(self.kw["shape"])))
        out[self.kw["idx"].reshape(-1)] = g.reshape(-1)
        return out.reshape(self.kw["shape"])

    def backward(self, z):
        return (_Gather.apply(z, idx=self.kw["idx"]),)


# ---------------------------------------------------------------------------
# public primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)
    return _Add.apply(a, b)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return _Sub.apply(a, b)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    return _Mul.apply(a, b)


def scale(a: Tensor, c: Scalar) -> Tensor:
    return _Scale.apply(a, c=float(c))


def add_const(a: Tensor, c: Scalar) -> Tensor:
    return _AddConst.apply(a, c=float(c))


def relu(a: Tensor) -> Tensor:
    return _Relu.apply(a)


def exp(a: Tensor) -> Tensor:
    return _Exp.apply(a)


def power(a: Tensor, p: Scalar) -> Tensor:
    return _Power.apply(a, p=float(p))


def elementwise(kind: str, a: Tensor, b: Tensor | Scalar | None = None) -> Tensor:
    """Dispatch ``add``, ``sub``, ``mul``, ``relu`` or ``scale`` by name."""
    if kind == "relu":
        return relu(a)
    if kind == "scale":
        return scale(a, b)
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    return _MatMul.apply(a, b)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    return _Transpose.apply(a)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ValueError(f"cannot reshape {a.shape} into {shape}")
    return _Reshape.apply(a, shape=shape)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _BroadcastTo.apply(a, shape=shape)


def sum_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Sum ``a`` down to ``shape`` (the adjoint of :func:`broadcast_to`)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _SumTo.apply(a, shape=shape)


def log_softmax(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"log_softmax expects B x N logits, got {a.shape}")
    return _LogSoftmax.apply(a)


def softmax(a: Tensor) -> Tensor:
    return exp(log_softmax(a))


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """3x3, stride 1, zero 'same' padding cross-correlation, no bias."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects BxCxHxW input and Fx Cx3x3 kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: channel mismatch, input {x.shape} vs kernel {w.shape}")
    return _Conv2d.apply(x, w)


def conv2d_input_grad(g: Tensor, w: Tensor) -> Tensor:
    return _Conv2dInputGrad.apply(g, w)


def conv2d_weight_grad(x: Tensor, g: Tensor) -> Tensor:
    return _Conv2dWeightGrad.apply(x, g)


def _pool_indices(shape: tuple[int, ...], data: np.ndarray) -> np.ndarray:
    b, c, h, w = shape
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    if h % 2 or w % 2:
        padded = np.full((b, c, 2 * h2, 2 * w2), -np.inf)
        padded[:, :, :h, :w] = data
    else:
        padded = data
    corners = [padded[:, :, di::2, dj::2] for di in (0, 1) for dj in (0, 1)]
    top = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    # ties resolve to the first window element in row-major order
    k = np.where(corners[0] == top, 0, np.where(corners[1] == top, 1, np.where(corners[2] == top, 2, 3)))
    rows = 2 * np.arange(h2)[None, None, :, None] + k // 2
    cols = 2 * np.arange(w2)[None, None, None, :] + k % 2
    bc = np.arange(b * c).reshape(b, c, 1, 1)
    return (bc * h + rows) * w + cols


def _pool_values(data: np.ndarray) -> np.ndarray:
    b, c, h, w = data.shape
    if h % 2 or w % 2:
        padded = np.full((b, c, h + h % 2, w + w % 2), -np.inf)
        padded[:, :, :h, :w] = data
        data = padded
    return np.maximum(
        np.maximum(data[:, :, 0::2, 0::2], data[:, :, 0::2, 1::2]),
        np.maximum(data[:, :, 1::2, 0::2], data[:, :, 1::2, 1::2]),
    )


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd extents are padded with -inf."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2 expects BxCxHxW, got {x.shape}")
    if not (x.requires_grad and is_grad_enabled()):
        return _raw(_pool_values(x.data))
    return _Gather.apply(x, idx=_pool_indices(x.shape, x.data))


def batch_stat_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize with the current batch's per-channel statistics, then scale and shift."""
    b, c, h, w = x.shape
    stat_shape = (1, c, 1, 1)
    n = b * h * w
    mean = scale(sum_to(x, stat_shape), 1.0 / n)
    centered = sub(x, broadcast_to(mean, x.shape))
    var = scale(sum_to(mul(centered, centered), stat_shape), 1.0 / n)
    gain = mul(power(add_const(var, eps), -0.5), reshape(gamma, stat_shape))
    shifted = mul(centered, broadcast_to(gain, x.shape))
    return add(shifted, broadcast_to(reshape(beta, stat_shape), x.shape))


def softmax_xent(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean cross-entropy of ``logits`` against one-hot ``labels``."""
    labels = as_tensor(labels)
    if logits.shape != labels.shape:
        raise ValueError(f"softmax_xent: logits {logits.shape} vs labels {labels.shape}")
    lab = labels.data
    if not (np.all((lab == 0) | (lab == 1)) and np.all(lab.sum(axis=1) == 1)):
        bad = int(np.flatnonzero(~(((lab == 0) | (lab == 1)).all(axis=1) & (lab.sum(axis=1) == 1)))[0])
        raise ValueError(f"softmax_xent: label row {bad} is not one-hot")
    picked = sum_to(mul(labels, log_softmax(logits)), ())
    return scale(picked, -1.0 / logits.shape[0])


def one_hot(labels: Iterable[int], n: int) -> Tensor:
    labels = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels, dtype=np.int64)
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return _raw(out)


# ---------------------------------------------------------------------------
# reverse sweep


class Tape:
    """The recorded nodes reachable from some outputs, in recording order."""

    def __init__(self, nodes: list[Function]):
        self.nodes = nodes

    @classmethod
    def from_outputs(cls, outputs: Iterable[Tensor], targets: Iterable[Tensor] = ()) -> "Tape":
        """Collect nodes reachable from ``outputs``.

        With ``targets`` given, only nodes through which some target influences
        an output are kept.
        """
        target_ids = {id(t) for t in targets}
        prune = bool(target_ids)
        relevant: dict[int, bool] = {}
        nodes: dict[int, Function] = {}
        stack = [(t.node, False) for t in outputs if t.node is not None]
        while stack:
            node, expanded = stack.pop()
            key = id(node)
            if expanded:
                hit = not prune
                for t in node.inputs:
                    if id(t) in target_ids or (t.node is not None and relevant.get(id(t.node))):
                        hit = True
                relevant[key] = hit
                if hit:
                    nodes[key] = node
                continue
            if key in relevant:
                continue
            relevant[key] = False
            stack.append((node, True))
            for t in node.inputs:
                if t.node is not None and id(t.node) not in relevant:
                    stack.append((t.node, False))
        return cls(sorted(nodes.values(), key=lambda n: n.seq))

    def __len__(self) -> int:
        return len(self.nodes)


def grad(
    loss: Tensor,
    params: Sequence[Tensor] | Mapping[str, Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
):
    """Gradients of a scalar ``loss`` with respect to ``params``.

    ``params`` may be a sequence of tensors (a list is returned) or a mapping
    from names to tensors (a dict with the same keys is returned).  With
    ``create_graph`` the returned tensors are recorded and can be
    differentiated again.
    """
    named = isinstance(params, Mapping) or hasattr(params, "items")
    if named:
        items = list(params.items())
    else:
        items = [(t.name or f"#{i}", t) for i, t in enumerate(params)]
    if loss.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    targets = [t for _, t in items]
    leaf_grads: dict[int, Tensor] = {}
    if loss.requires_grad:
        target_ids = {id(t) for t in targets}
        tape = Tape.from_outputs([loss], targets)
        inner_targets = {id(t.node): id(t) for t in targets if t.node is not None}
        with set_grad_enabled(create_graph):
            node_grads: dict[int, Tensor] = {}
            if loss.node is not None:
                node_grads[id(loss.node)] = _raw(np.ones(loss.shape))
                if id(loss.node) in inner_targets and not tape.nodes:
                    leaf_grads[inner_targets[id(loss.node)]] = node_grads[id(loss.node)]
            elif id(loss) in target_ids:
                leaf_grads[id(loss)] = _raw(np.ones(loss.shape))
            for node in reversed(tape.nodes):
                g = node_grads.pop(id(node), None)
                if g is None:
                    continue
                if id(node) in inner_targets:
                    leaf_grads[inner_targets[id(node)]] = g
                for t, gi in zip(node.inputs, node.backward(g)):
                    if gi is None or not t.requires_grad:
                        continue
                    if t.node is not None:
                        dest, key = node_grads, id(t.node)
                    elif id(t) in target_ids:
                        dest, key = leaf_grads, id(t)
                    else:
                        continue
                    prev = dest.get(key)
                    dest[key] = gi if prev is None else add(prev, gi)
            for key, tid in inner_targets.items():
                if key in node_grads:
                    leaf_grads[tid] = node_grads[key]
    out = []
    for name, t in items:
        g = leaf_grads.get(id(t))
        if g is None:
            if not allow_unused:
                raise ValueError(f"parameter {name!r} is unreachable from the loss")
            g = _raw(np.zeros(t.shape))
        if not create_graph and g.node is not None:
            g = g.detach()
        out.append(g)
    if named:
        return {name: g for (name, _), g in zip(items, out)}
    return out


# ---------------------------------------------------------------------------
# serialization

TENSOR_MAGIC = b"UMT0"


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    head = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor starting at ``offset``; returns it and the end offset."""
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise ValueError("bad tensor magic")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    start = offset + 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    end = start + 8 * count
    if end > len(buf):
        raise ValueError("truncated tensor payload")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=start).astype(np.float64)
    return Tensor(data.reshape(shape)), end
