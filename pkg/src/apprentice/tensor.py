"""Dense tensors with define-by-run reverse-mode differentiation.

Every primitive builds its output through :func:`_make`, which records the
parents and a closure that pushes the upstream gradient back to them.  The
graph is rebuilt on every forward pass and released after ``backward``.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_debug = os.environ.get("APPRENTICE_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Check every primitive output for NaN/Inf when enabled."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Row-major n-d array with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    # -- introspection -----------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autograd ----------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Propagate ``grad`` (ones for a scalar) to every ancestor.

        Visits nodes in reverse topological order, so a tensor used several
        times receives the sum of all its upstream contributions before its
        own rule runs.  Intermediate graph references are dropped afterwards.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if node._backward is not None:
                # intermediate: free graph and its buffer
                node._backward = None
                node._parents = ()
                if node is not self:
                    node.grad = None

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: a._accumulate(-g), "neg")


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.size

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,), backward, "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), backward, "relu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-d tensors: ``[m, k] @ [k, n] -> [m, n]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, pad: int, floor: bool = False) -> int:
    """Output extent; a window position that overhangs the padded input is an error unless ``floor``."""
    span = size + 2 * pad - kernel
    if span < 0 or (span % stride and not floor):
        raise ValueError(
            f"kernel {kernel} with stride {stride} and pad {pad} does not tile an input of extent {size}"
        )
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int,
           floor: bool = False) -> tuple[np.ndarray, int, int]:
    """Unfold ``x[N,C,H,W]`` into rows ``[N*H'*W', C*kh*kw]``."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad, floor)
    wo = conv_output_size(w, kw, stride, pad, floor)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, :stride * ho:stride, :stride * wo:stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int, floor: bool = False) -> np.ndarray:
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, pad, floor)
    wo = conv_output_size(w, kw, stride, pad, floor)
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += blocks[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0, floor: bool = False) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[F,C,kh,kw]``.

    ``floor`` drops trailing rows/columns the last stride cannot reach
    (needed by stride-2 3x3 downsampling on even extents).
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    n = x.shape[0]
    f, _, kh, kw = w.shape
    cols, ho, wo = im2col(x.data, kh, kw, stride, pad, floor)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        if w.requires_grad:
            w._accumulate((gmat.T @ cols).reshape(w.shape))
        if x.requires_grad:
            x._accumulate(col2im(gmat @ wmat, x.shape, kh, kw, stride, pad, floor))

    return _make(np.ascontiguousarray(out), (x, w), backward, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"max_pool2d({size}) needs extents divisible by {size}, got {x.shape}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        x._accumulate(gx)

    return _make(out, (x,), backward, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    area = h * w

    def backward(g):
        x._accumulate(np.broadcast_to((g / area)[:, :, None, None], x.shape))

    return _make(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def pad_channels_stride(x: Tensor, out_channels: int, stride: int) -> Tensor:
    """Parameter-free shortcut: spatial subsampling plus zero channel padding."""
    n, c, h, w = x.shape
    extra = out_channels - c
    if extra < 0:
        raise ValueError("shortcut cannot drop channels")
    lo = extra // 2
    sub = x.data[:, :, ::stride, ::stride]
    out = np.zeros((n, out_channels) + sub.shape[2:], dtype=x.dtype)
    out[:, lo:lo + c] = sub

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, ::stride, ::stride] = g[:, lo:lo + c]
        x._accumulate(gx)

    return _make(out, (x,), backward, "shortcut")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_DECAY = 0.9


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    decay: float = BN_DECAY,
) -> Tensor:
    """Per-channel normalization of ``[N,C]`` or ``[N,C,H,W]`` input.

    In training mode the batch statistics normalize the input and the
    running buffers are updated in place by an exponential moving average.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm expects {c} channels, got gamma {gamma.shape} / beta {beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= decay
        running_mean += (1 - decay) * mean
        running_var *= decay
        running_var += (1 - decay) * var
    else:
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape).astype(x.dtype)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = x.size // c

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = gxhat.sum(axis=axes, keepdims=True)
                s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
                gx = inv.reshape(bshape) / m * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv.reshape(bshape)
            x._accumulate(gx)

    return _make(out, (x, gamma, beta), backward, "batchnorm")


# ---------------------------------------------------------------------------
# probabilities and losses
# ---------------------------------------------------------------------------

PROB_FLOOR = 1e-12


def softmax(z: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max-subtraction."""
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        z._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (z,), backward, "softmax")


def cross_entropy(target, pred: Tensor) -> Tensor:
    """Batch mean of ``-sum_k target_k * log(pred_k)``.

    ``target`` may be a Tensor (its gradient is propagated when it requires
    one) or a plain array.  Predictions are clamped to ``[1e-12, 1]`` before
    the logarithm; the clamp blocks gradient where it binds.
    """
    target = _as_tensor(target, pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"cross_entropy extent mismatch: target {target.shape} vs pred {pred.shape}")
    p2 = pred.data.reshape(-1, pred.shape[-1])
    t2 = target.data.reshape(p2.shape)
    rows = p2.shape[0]
    clamped = np.clip(p2, PROB_FLOOR, 1.0)
    logp = np.log(clamped)
    value = -(t2 * logp).sum() / rows

    def backward(g):
        if pred.requires_grad:
            inside = (p2 >= PROB_FLOOR) & (p2 <= 1.0)
            pred._accumulate((-g * t2 / clamped * inside / rows).reshape(pred.shape))
        if target.requires_grad:
            target._accumulate((-g * logp / rows).reshape(target.shape))

    return _make(np.asarray(value, dtype=pred.dtype), (target, pred), backward, "cross_entropy")


def one_hot(labels: np.ndarray, num_classes: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class SgdState:
    """Learning rate, momentum and one velocity buffer per parameter."""

    def __init__(self, params: Iterable[Tensor], learning_rate: float, momentum: float = 0.9):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in params]


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: SgdState,
             weight_decay: float = 0.0) -> None:
    """``v <- momentum*v + g; p <- p - lr*v`` in place.

    ``weight_decay`` adds ``weight_decay * p`` to each gradient, i.e. the
    derivative of an L2 penalty folded into the loss.
    """
    if len(grads) != len(params) or len(state.velocity) != len(params):
        raise ValueError("one gradient and one velocity buffer per parameter are required")
    lr, mom = state.learning_rate, state.momentum
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ValueError(f"missing gradient for trainable parameter #{i} of shape {p.shape}")
        v = state.velocity[i]
        if v.shape != p.shape:
            raise ValueError(f"velocity shape {v.shape} does not match parameter shape {p.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        v *= mom
        v += g
        p.data -= lr * v


class SGD:
    """Stateful wrapper used by the training drivers."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.state = SgdState(self.params, lr, momentum)
        self.weight_decay = weight_decay

    @property
    def lr(self) -> float:
        return self.state.learning_rate

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.learning_rate = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.state, self.weight_decay)
