"""Tape-based reverse-mode differentiation over dense numpy arrays.

Every primitive lives in the ``OPS`` registry as a forward rule and a
backward (vector-Jacobian) rule.  Forward passes executed inside a
``Tape`` context are recorded; ``backward`` walks the tape once in reverse.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = forward_op("sum", [forward_op("mul", [x, x])])
    >>> tape.backward(y)
    >>> x.grad
    array([2., 4.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

_DTYPE = np.float64
_local = threading.local()


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


class Tensor:
    """An n-dimensional array with an optional gradient slot.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after a
    backward pass on a tape that watches them.  Op outputs carry a
    ``node_id`` into the tape that produced them; their gradient is kept
    only if ``retain`` is set.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "retain", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.retain = False
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


@dataclass
class LossValue:
    """Scalar mean loss on the tape plus the per-example losses."""

    total: Tensor
    per_sample: np.ndarray

    def __post_init__(self):
        if self.total.data.size != 1:
            raise ValueError(f"loss total must be scalar, got shape {self.total.shape}")


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    ctx: Any
    attrs: dict


class Tape:
    """Records op applications for a single backward pass.

    With ``watch_leaves=True`` every leaf tensor that ``requires_grad`` is
    differentiated.  Probes pass ``watch_leaves=False`` and call ``watch``
    on exactly the tensors they need, so parameter gradients are neither
    computed nor written.
    """

    def __init__(self, watch_leaves: bool = True):
        self.nodes: list[Node] = []
        self.frozen = False
        self.watch_leaves = watch_leaves
        self._watched: dict[int, Tensor] = {}
        self._leaves: dict[int, Tensor] = {}
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def watch(self, t: Tensor) -> Tensor:
        """Track a leaf on this tape and retain its gradient."""
        if t.node_id is not None:
            raise ValueError("watch() takes a leaf; use retain_grad() for intermediates")
        self._watched[id(t)] = t
        t.retain = True
        return t

    def tracks(self, t: Tensor | None) -> bool:
        if t is None:
            return False
        if t.node_id is not None:
            return t._tape is self
        if id(t) in self._watched:
            return True
        return self.watch_leaves and t.requires_grad

    def record(self, kind: str, inputs: tuple, output: Tensor, ctx, attrs: dict) -> None:
        if self.frozen:
            raise RuntimeError("tape is frozen; create a new Tape for another pass")
        for t in inputs:
            if t is not None and t.node_id is None and self.tracks(t):
                self._leaves[id(t)] = t
        output.node_id = len(self.nodes)
        output._tape = self
        self.nodes.append(Node(kind, inputs, output, ctx, attrs))

    def backward(self, loss: "LossValue | Tensor") -> None:
        if self.frozen:
            raise RuntimeError("backward already ran on this tape")
        total = loss.total if isinstance(loss, LossValue) else loss
        if total.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {total.shape}")
        if not self.tracks(total):
            # constant w.r.t. everything watched
            self._finish({})
            return
        pending: dict[int, np.ndarray] = {}
        seed = np.ones_like(total.data)
        if total.node_id is None:
            self._leaf_grad(total, seed)
            self._finish({})
            return
        pending[total.node_id] = seed
        for node in reversed(self.nodes):
            g = pending.pop(node.output.node_id, None)
            if g is None:
                continue
            if node.output.retain:
                node.output.grad = g
            needs = tuple(self.tracks(t) for t in node.inputs)
            if not any(needs):
                continue
            grads = OPS[node.kind].backward(node.ctx, g, needs)
            for t, gi, need in zip(node.inputs, grads, needs):
                if not need or gi is None:
                    continue
                if t.node_id is not None:
                    if t.node_id in pending:
                        pending[t.node_id] = pending[t.node_id] + gi
                    else:
                        pending[t.node_id] = gi
                else:
                    self._leaf_grad(t, gi)
        self._finish(pending)

    def _leaf_grad(self, t: Tensor, g: np.ndarray) -> None:
        t.grad = g.copy() if t.grad is None else t.grad + g

    def _finish(self, pending) -> None:
        for t in list(self._leaves.values()) + list(self._watched.values()):
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        for node in self.nodes:
            out = node.output
            if out.retain and out.grad is None:
                out.grad = np.zeros_like(out.data)
        # drop saved activations now; tensors and tape reference each other,
        # so waiting for the cycle collector keeps every pass alive
        self.nodes = []
        self._leaves.clear()
        self._watched.clear()
        self.frozen = True


def current_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def retain_grad(t: Tensor) -> Tensor:
    """Mark an activation so the next backward stores its gradient.

    Untracked activations (nothing upstream needs a gradient) are replaced
    by a watched leaf copy on the current tape; use the returned tensor
    downstream.
    """
    tape = current_tape()
    if tape is None:
        raise RuntimeError("retain_grad needs an active Tape")
    if t.node_id is not None and t._tape is tape:
        t.retain = True
        return t
    leaf = Tensor(t.data, dtype=t.data.dtype)
    return tape.watch(leaf)


def backward(loss: "LossValue | Tensor") -> None:
    """Run reverse mode on the tape that produced ``loss``."""
    total = loss.total if isinstance(loss, LossValue) else loss
    tape = total._tape or current_tape()
    if tape is None:
        raise RuntimeError("loss was not produced on a tape")
    tape.backward(loss)


def grad_wrt(activation: Tensor) -> np.ndarray:
    """Gradient retained at ``activation`` by the last backward pass."""
    if not activation.retain:
        raise ValueError("activation was not marked for gradient retention")
    if activation.grad is None:
        raise RuntimeError("backward has not run for this activation")
    return activation.grad


# ---------------------------------------------------------------------------
# primitive registry


@dataclass
class Op:
    name: str
    forward: Callable[[list, dict], tuple]
    backward: Callable[[Any, np.ndarray, tuple], tuple]
    check: Callable[[list, dict], None] = field(default=lambda shapes, attrs: None)
    arity: tuple[int, int] = (1, 1)


OPS: dict[str, Op] = {}


def register(name, arity=(1, 1), check=None):
    def deco(fns):
        fwd, bwd = fns()
        OPS[name] = Op(name, fwd, bwd, check or (lambda s, a: None), arity)
        return fns

    return deco


def forward_op(kind: str, inputs: Sequence[Tensor | None], attrs: dict | None = None) -> Tensor:
    """Apply primitive ``kind`` and record it on the active tape."""
    op = OPS.get(kind)
    if op is None:
        raise ValueError(f"unknown op kind {kind!r}")
    attrs = dict(attrs or {})
    inputs = tuple(inputs)
    lo, hi = op.arity
    if not lo <= len(inputs) <= hi:
        raise ValueError(f"{kind} takes {lo}..{hi} inputs, got {len(inputs)}")
    shapes = [None if t is None else t.shape for t in inputs]
    op.check(shapes, attrs)
    arrays = [None if t is None else t.data for t in inputs]
    out_data, ctx = op.forward(arrays, attrs)
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = current_tape()
    if tape is not None and not tape.frozen and any(tape.tracks(t) for t in inputs):
        tape.record(kind, inputs, out, ctx, attrs)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(shapes, attrs):
    try:
        np.broadcast_shapes(*shapes)
    except ValueError:
        raise ValueError(f"shape mismatch: cannot broadcast {shapes[0]} with {shapes[1]}") from None


@register("add", (2, 2), _check_broadcast)
def _add():
    def fwd(a, attrs):
        return a[0] + a[1], (a[0].shape, a[1].shape)

    def bwd(ctx, g, needs):
        sa, sb = ctx
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)

    return fwd, bwd


@register("mul", (2, 2), _check_broadcast)
def _mul():
    def fwd(a, attrs):
        return a[0] * a[1], (a[0], a[1])

    def bwd(ctx, g, needs):
        x, y = ctx
        return (
            _unbroadcast(g * y, x.shape) if needs[0] else None,
            _unbroadcast(g * x, y.shape) if needs[1] else None,
        )

    return fwd, bwd


@register("scale")
def _scale():
    def fwd(a, attrs):
        c = attrs["factor"]
        return a[0] * c, c

    def bwd(c, g, needs):
        return (g * c,)

    return fwd, bwd


@register("sum")
def _sum():
    def fwd(a, attrs):
        return np.asarray(a[0].sum()), a[0].shape

    def bwd(shape, g, needs):
        return (np.broadcast_to(g, shape).copy(),)

    return fwd, bwd


@register("mean")
def _mean():
    def fwd(a, attrs):
        return np.asarray(a[0].mean()), a[0].shape

    def bwd(shape, g, needs):
        return (np.full(shape, g / np.prod(shape), dtype=g.dtype),)

    return fwd, bwd


def _check_matmul(shapes, attrs):
    a, b = shapes
    if len(a) != 2 or len(b) != 2:
        raise ValueError(f"matmul needs 2-d operands, got {a} and {b}")
    if a[1] != b[0]:
        raise ValueError(f"shape mismatch in matmul: inner dims {a[1]} (lhs {a}) != {b[0]} (rhs {b})")


@register("matmul", (2, 2), _check_matmul)
def _matmul():
    def fwd(a, attrs):
        return a[0] @ a[1], (a[0], a[1])

    def bwd(ctx, g, needs):
        x, w = ctx
        return (g @ w.T if needs[0] else None, x.T @ g if needs[1] else None)

    return fwd, bwd


@register("relu")
def _relu():
    def fwd(a, attrs):
        mask = a[0] > 0
        return np.where(mask, a[0], 0.0).astype(a[0].dtype), mask

    def bwd(mask, g, needs):
        return (g * mask,)

    return fwd, bwd


@register("flatten")
def _flatten():
    def fwd(a, attrs):
        x = a[0]
        return x.reshape(x.shape[0], -1), x.shape

    def bwd(shape, g, needs):
        return (g.reshape(shape),)

    return fwd, bwd


def _check_reshape(shapes, attrs):
    x = shapes[0]
    try:
        np.empty(x, dtype=np.int8).reshape(attrs["shape"])
    except ValueError:
        raise ValueError(f"shape mismatch: cannot reshape {x} to {tuple(attrs['shape'])}") from None


@register("reshape", (1, 1), _check_reshape)
def _reshape():
    def fwd(a, attrs):
        return a[0].reshape(attrs["shape"]), a[0].shape

    def bwd(shape, g, needs):
        return (g.reshape(shape),)

    return fwd, bwd


def _check_conv(shapes, attrs):
    x, w = shapes[0], shapes[1]
    b = shapes[2] if len(shapes) > 2 else None
    if len(x) != 4:
        raise ValueError(f"conv2d input must be NCHW, got shape {x}")
    if len(w) != 4:
        raise ValueError(f"conv2d kernel must be OIHW, got shape {w}")
    if x[1] != w[1]:
        raise ValueError(f"shape mismatch in conv2d: input channels {x[1]} != kernel in-channels {w[1]}")
    stride, pad = attrs.get("stride", 1), attrs.get("padding", 0)
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got stride={stride} padding={pad}")
    if x[2] + 2 * pad < w[2] or x[3] + 2 * pad < w[3]:
        raise ValueError(f"conv2d kernel {w[2:]} larger than padded input {x[2] + 2 * pad}x{x[3] + 2 * pad}")
    if b is not None and b != (w[0],):
        raise ValueError(f"conv2d bias shape {b} != ({w[0]},)")


def conv2d_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


@register("conv2d", (2, 3), _check_conv)
def _conv2d():
    # im2col in channels-last order: cols[n, y, x, u, v, c]
    def fwd(a, attrs):
        x, w = a[0], a[1]
        b = a[2] if len(a) > 2 else None
        s, p = attrs.get("stride", 1), attrs.get("padding", 0)
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        ho, wo = conv2d_output_size(h, kh, s, p), conv2d_output_size(wd, kw, s, p)
        xp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=x.dtype)
        xp[:, p : p + h, p : p + wd, :] = x.transpose(0, 2, 3, 1)
        cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i : i + s * ho : s, j : j + s * wo : s, :]
        cols = cols.reshape(n * ho * wo, kh * kw * c)
        wk = w.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
        out = cols @ wk.T
        if b is not None:
            out += b
        out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
        return out, (cols, wk, w.shape, x.shape, s, p, b is not None)

    def bwd(ctx, g, needs):
        cols, wk, wshape, xshape, s, p, has_b = ctx
        n, c, h, wd = xshape
        o, _, kh, kw = wshape
        ho, wo = g.shape[2], g.shape[3]
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dx = dw = db = None
        if needs[1]:
            dw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
            dw = np.ascontiguousarray(dw)
        if has_b and len(needs) > 2 and needs[2]:
            db = g2.sum(axis=0)
        if needs[0]:
            dcols = (g2 @ wk).reshape(n, ho, wo, kh, kw, c)
            dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += dcols[:, :, :, i, j, :]
            dx = np.ascontiguousarray(dxp[:, p : p + h, p : p + wd, :].transpose(0, 3, 1, 2))
        return (dx, dw, db) if has_b else (dx, dw)

    return fwd, bwd


def conv2d_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, stride: int = 1, padding: int = 0):
    """Direct nested-loop convolution; reference for the im2col path."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = conv2d_output_size(h, kh, stride, padding)
    wo = conv2d_output_size(wd, kw, stride, padding)
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, ci, yi * stride + u, xi * stride + v] * w[oi, ci, u, v]
                    out[ni, oi, yi, xi] = acc + (b[oi] if b is not None else 0.0)
    return out


def _check_pool(shapes, attrs):
    x = shapes[0]
    k = attrs.get("kernel", 2)
    if len(x) != 4:
        raise ValueError(f"avg_pool2d input must be NCHW, got shape {x}")
    if k < 1 or x[2] % k or x[3] % k:
        raise ValueError(f"avg_pool2d kernel {k} does not tile spatial extent {x[2]}x{x[3]}")


@register("avg_pool2d", (1, 1), _check_pool)
def _avg_pool():
    def fwd(a, attrs):
        x = a[0]
        k = attrs.get("kernel", 2)
        n, c, h, w = x.shape
        out = x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
        return out, (k, x.shape)

    def bwd(ctx, g, needs):
        k, shape = ctx
        dx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (dx,)

    return fwd, bwd


def _check_bn(shapes, attrs):
    x, gamma, beta = shapes
    if len(x) not in (2, 4):
        raise ValueError(f"batchnorm input must be (N, C) or NCHW, got shape {x}")
    c = x[1]
    if gamma != (c,) or beta != (c,):
        raise ValueError(f"batchnorm channel mismatch: input has {c} channels, gamma {gamma}, beta {beta}")
    if attrs.get("mode", "batch") == "batch":
        count = x[0] * (x[2] * x[3] if len(x) == 4 else 1)
        if count < 2:
            raise ValueError("batchnorm in batch mode needs more than one value per channel")
    elif attrs.get("mode") == "fixed":
        if np.shape(attrs["mean"]) != (c,) or np.shape(attrs["var"]) != (c,):
            raise ValueError(f"batchnorm fixed statistics must have shape ({c},)")
    else:
        raise ValueError(f"batchnorm mode must be 'batch' or 'fixed', got {attrs.get('mode')!r}")


def _bn_axes(x):
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bn_view(v, ndim):
    return v[None, :, None, None] if ndim == 4 else v[None, :]


@register("batchnorm", (3, 3), _check_bn)
def _batchnorm():
    def fwd(a, attrs):
        x, gamma, beta = a
        eps = attrs.get("eps", 1e-5)
        axes = _bn_axes(x)
        batch = attrs.get("mode", "batch") == "batch"
        if batch:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
        else:
            mean = np.asarray(attrs["mean"], dtype=x.dtype)
            var = np.asarray(attrs["var"], dtype=x.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - _bn_view(mean, x.ndim)) * _bn_view(inv, x.ndim)
        out = xhat * _bn_view(gamma, x.ndim) + _bn_view(beta, x.ndim)
        return out, (xhat, inv, gamma, batch, axes)

    def bwd(ctx, g, needs):
        xhat, inv, gamma, batch, axes = ctx
        nd = xhat.ndim
        dgamma = (g * xhat).sum(axis=axes) if needs[1] else None
        dbeta = g.sum(axis=axes) if needs[2] else None
        dx = None
        if needs[0]:
            gx = g * _bn_view(gamma * inv, nd)
            if batch:
                m = g.size // g.shape[1]
                dx = gx - gx.sum(axis=axes, keepdims=True) / m - xhat * (
                    (gx * xhat).sum(axis=axes, keepdims=True) / m
                )
            else:
                dx = gx
        return dx, dgamma, dbeta

    return fwd, bwd


def _check_xent(shapes, attrs):
    z = shapes[0]
    labels = np.asarray(attrs["labels"])
    if len(z) != 2:
        raise ValueError(f"softmax_cross_entropy needs (N, K) logits, got {z}")
    if labels.shape != (z[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {z[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= z[1]):
        raise ValueError(f"labels must lie in [0, {z[1]})")


@register("softmax_cross_entropy", (1, 1), _check_xent)
def _xent():
    def fwd(a, attrs):
        z = a[0]
        y = np.asarray(attrs["labels"], dtype=np.int64)
        shifted = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1))
        logp = shifted - logsum[:, None]
        per = -logp[np.arange(z.shape[0]), y]
        return per, (np.exp(logp), y)

    def bwd(ctx, g, needs):
        p, y = ctx
        d = p.copy()
        d[np.arange(p.shape[0]), y] -= 1.0
        return (d * g[:, None],)

    return fwd, bwd


# ---------------------------------------------------------------------------
# thin wrappers


def add(a, b):
    return forward_op("add", [a, b])


def mul(a, b):
    return forward_op("mul", [a, b])


def scale(a, factor: float):
    return forward_op("scale", [a], {"factor": factor})


def matmul(a, b):
    return forward_op("matmul", [a, b])


def relu(a):
    return forward_op("relu", [a])


def conv2d(x, w, b=None, stride=1, padding=0):
    inputs = [x, w] if b is None else [x, w, b]
    return forward_op("conv2d", inputs, {"stride": stride, "padding": padding})


def reshape(x, shape):
    return forward_op("reshape", [x], {"shape": tuple(shape)})


def avg_pool2d(x, kernel=2):
    return forward_op("avg_pool2d", [x], {"kernel": kernel})


def flatten(x):
    return forward_op("flatten", [x])


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def reduce_sum(x):
    return forward_op("sum", [x])


def reduce_mean(x):
    return forward_op("mean", [x])


def per_sample_cross_entropy(logits: Tensor, labels) -> Tensor:
    return forward_op("softmax_cross_entropy", [logits], {"labels": np.asarray(labels)})


def softmax_cross_entropy(logits: Tensor, labels) -> LossValue:
    per = forward_op("softmax_cross_entropy", [logits], {"labels": np.asarray(labels)})
    total = forward_op("mean", [per])
    return LossValue(total, per.data.copy())


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(fn: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, copy=True)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi = float(fn(base))
        flat[k] = orig - eps
        lo = float(fn(base))
        flat[k] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"non-finite function value at component {k}")
        grad[k] = (hi - lo) / (2 * eps)
    return grad.reshape(base.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor), taken over the whole array.

    The floor keeps analytically-zero gradients (e.g. a bias feeding a
    batch-statistics normalisation) from comparing central-difference
    rounding noise, ~1e-11 at eps=1e-5, against zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)
