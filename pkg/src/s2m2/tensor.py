"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure that maps the output gradient to
one gradient per parent. Node ids are drawn from a global counter, so sorting
the reachable nodes by id is a valid topological order; ``backward`` walks it
in reverse.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from ._im2col import col2im, im2col
from .errors import DimensionError, UsageError, ValidationError

_node_ids = itertools.count()
_mode = threading.local()


@contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array node in a computation graph."""

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.id = next(_node_ids)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward, name: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.id = next(_node_ids)
        out.name = name
        out.grad = None
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -----------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that does not require grad")

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node.id in nodes:
                continue
            nodes[node.id] = node
            stack.extend(p for p in node._parents if p.requires_grad and p.id not in nodes)

        grads = {self.id: np.ones_like(self.data)}
        for node_id in sorted(nodes, reverse=True):
            node = nodes[node_id]
            g = grads.pop(node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._from_op(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._from_op(self.data - other.data, (self, other), backward, "sub")

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._from_op(a * b, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._from_op(a / b, (self, other), backward, "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary maps --------------------------------------------------------
    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._from_op(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._from_op(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def softplus(self) -> "Tensor":
        """ln(1 + e^x), evaluated without overflow."""
        x = self.data
        out = np.logaddexp(0.0, x)
        return Tensor._from_op(out, (self,), lambda g: (g * _sigmoid(x),), "softplus")

    def clamp_min(self, floor: float) -> "Tensor":
        keep = self.data >= floor
        out = np.where(keep, self.data, floor)
        return Tensor._from_op(out, (self,), lambda g: (g * keep,), "clamp_min")

    def masked_fill(self, mask: np.ndarray, value: float) -> "Tensor":
        mask = np.asarray(mask, dtype=bool)
        out = np.where(mask, value, self.data)
        return Tensor._from_op(out, (self,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)),
                               (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def _extreme(self, axis: int, pick, name: str) -> "Tensor":
        idx = np.expand_dims(pick(self.data, axis=axis), axis)
        out = np.take_along_axis(self.data, idx, axis=axis).squeeze(axis)
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
            return (full,)

        return Tensor._from_op(out, (self,), backward, name)

    def max(self, axis: int) -> "Tensor":
        """Maximum along ``axis``; the gradient goes to the first maximiser."""
        return self._extreme(axis, np.argmax, "max")

    def min(self, axis: int) -> "Tensor":
        return self._extreme(axis, np.argmin, "min")

    # -- shape ops ---------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,),
                               lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(np.ascontiguousarray(self.data.transpose(axes)), (self,),
                               lambda g: (g.transpose(inverse),), "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def take(self, indices, axis: int = 0) -> "Tensor":
        """Gather along ``axis``; repeated indices accumulate gradient."""
        indices = np.asarray(indices, dtype=np.intp)
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, indices, np.moveaxis(g, axis, 0))
            return (full,)

        return Tensor._from_op(np.take(self.data, indices, axis=axis), (self,), backward, "take")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis),
                           tuple(tensors), backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        return (g @ y.T if a.requires_grad else None,
                x.T @ g if b.requires_grad else None)

    return Tensor._from_op(x @ y, (a, b), backward, "matmul")


def _same_padding(k: int) -> tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


_CHUNK_FLOATS = 1 << 20  # per-chunk im2col buffer stays well under glibc's mmap ceiling


def conv2d_nhwc(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of a (B, H, W, C) batch with an (kh, kw, C, O) kernel.

    Runs im2col + one matmul per batch chunk; chunked column buffers stay
    small enough for the allocator to recycle them.
    """
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if padding not in ("same", "valid"):
        raise ValidationError(f"conv2d: unknown padding mode {padding!r}")
    batch, height, width, channels = x.shape
    kh, kw, _, out_channels = kernel.shape
    if padding == "same":
        (pt, pb), (pl, pr) = _same_padding(kh), _same_padding(kw)
    else:
        pt = pb = pl = pr = 0
    hp, wp = height + pt + pb, width + pl + pr
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    depth = kh * kw * channels
    step = max(1, _CHUNK_FLOATS // (ho * wo * depth))
    chunks = [slice(i, min(i + step, batch)) for i in range(0, batch, step)]
    xdata = np.ascontiguousarray(x.data)
    wmat = kernel.data.reshape(depth, out_channels)

    cols = [im2col(xdata[part], kh, kw, stride, pt, pl, ho, wo).reshape(-1, depth) for part in chunks]
    out = np.empty((batch, ho, wo, out_channels))
    for part, c in zip(chunks, cols):
        out[part] = (c @ wmat).reshape(-1, ho, wo, out_channels)
    if not (is_grad_enabled() and kernel.requires_grad):
        cols = None

    def backward(g):
        dk = np.zeros((depth, out_channels)) if kernel.requires_grad else None
        dx = np.empty(x.shape) if x.requires_grad else None
        for n, part in enumerate(chunks):
            g2d = np.ascontiguousarray(g[part]).reshape(-1, out_channels)
            if dk is not None:
                dk += (g2d.T @ cols[n]).T
            if dx is not None:
                dcols = (g2d @ wmat.T).reshape(-1, ho, wo, depth)
                dx[part] = col2im(dcols, height, width, kh, kw, stride, pt, pl)
        return dx, (dk.reshape(kernel.shape) if dk is not None else None)

    return Tensor._from_op(out, (x, kernel), backward, "conv2d")


def conv2d(x: Tensor, kernel: Tensor, padding: str = "valid", stride: int = 1) -> Tensor:
    """Channels-first convolution: x is (C, H, W) or (B, C, H, W), kernel (O, C, h, w)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected CHW/NCHW input and OIHW kernel, got {x.shape}, {kernel.shape}")
    out = conv2d_nhwc(x.transpose(0, 2, 3, 1), kernel.transpose(2, 3, 1, 0),
                      stride=stride, padding=padding).transpose(0, 3, 1, 2)
    return out.reshape(out.shape[1:]) if single else out


def l2_normalize(v: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """v / max(||v||, eps) along ``axis``; the zero vector maps to itself."""
    v = _as_tensor(v)
    norm = np.sqrt(np.sum(v.data * v.data, axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = v.data / denom
    above = norm > eps

    def backward(g):
        radial = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(above, (g - out * radial) / denom, g / denom),)

    return Tensor._from_op(out, (v,), backward, "l2_normalize")


def pairwise_sq_distances(z: Tensor) -> Tensor:
    """(B, B) matrix of squared Euclidean distances between rows of z."""
    z = _as_tensor(z)
    if z.ndim != 2 or z.shape[0] < 2:
        raise DimensionError(f"pairwise_sq_distances: need at least two rows, got {z.shape}")
    diff = z.data[:, None, :] - z.data[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def backward(g):
        gs = g + g.T
        return (2.0 * (gs.sum(axis=1, keepdims=True) * z.data - gs @ z.data),)

    return Tensor._from_op(out, (z,), backward, "pairwise_sq_distances")


def one_hot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.shape[0], n))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Batch-mean cross-entropy against class indices or per-row distributions."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    batch, n = logits.shape
    if n < 2:
        raise ValidationError("softmax_cross_entropy needs at least two classes")
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.shape[0] != batch:
            raise DimensionError(f"{targets.shape[0]} targets for {batch} rows")
        if np.any(targets < 0) or np.any(targets >= n):
            raise ValidationError(f"class index outside [0, {n})")
        targets = one_hot(targets, n)
    else:
        targets = targets.astype(np.float64)
        if targets.shape != logits.shape:
            raise DimensionError(f"soft targets {targets.shape} vs logits {logits.shape}")
        if np.any(targets < 0) or np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-9):
            raise ValidationError("soft targets must be non-negative and sum to 1 per row")

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = np.mean(-np.sum(targets * log_probs, axis=1))

    def backward(g):
        return (g * (np.exp(log_probs) - targets) / batch,)

    return Tensor._from_op(np.asarray(loss), (logits,), backward, "cross_entropy")
