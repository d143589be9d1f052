"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every value in the library is a :class:`Tensor` wrapping a contiguous
float64 numpy array. Operations record a backward closure on the result
when (and only when) some input participates in differentiation, so
forward passes through frozen parameters cost barely more than raw numpy.
Calling :func:`backward` on a scalar replays the recorded tape in reverse
topological order and deposits gradients on trainable leaf tensors.

The module also houses the loss functions, parameter initializers and the
AdamW optimizer with a linear-warmup / cosine-annealing schedule.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

Array = np.ndarray

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    __slots__ = ("data", "grad", "trainable", "_parents", "_backward")

    def __init__(self, data, trainable: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Array | None = None
        self.trainable = trainable
        self._parents: tuple[Tensor, ...] | None = None
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _wrap(data: Array, parents, backward_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.trainable = False
        out._parents = parents
        out._backward = backward_fn
        return out

    # -- introspection ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A tensor sharing this one's values but cut from the tape."""
        return Tensor._wrap(self.data, None, None)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), trainable=self.trainable)
        return t

    def __repr__(self) -> str:
        flag = ", trainable" if self.trainable else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs(t: Tensor) -> bool:
    return t.trainable or t._parents is not None


def _make(data: Array, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _grad_enabled and any(_needs(p) for p in parents):
        return Tensor._wrap(data, parents, backward_fn)
    return Tensor._wrap(data, None, None)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic -----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = _make(a.data + b.data, (a, b), None)
    if out._parents is not None:
        def bwd(g):
            return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
        out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = _make(a.data - b.data, (a, b), None)
    if out._parents is not None:
        def bwd(g):
            return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
        out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    _check_broadcast(a, b, "mul")
    out = _make(a.data * b.data, (a, b), None)
    if out._parents is not None:
        ad, bd = a.data, b.data
        def bwd(g):
            return (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape))
        out._backward = bwd
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = _make(a.data / b.data, (a, b), None)
    if out._parents is not None:
        ad, bd = a.data, b.data
        def bwd(g):
            return (
                _unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape),
            )
        out._backward = bwd
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _make(a.data * c, (a,), None)
    if out._parents is not None:
        out._backward = lambda g: (g * c,)
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, (a,), None)
    if out._parents is not None:
        out._backward = lambda g: (-g,)
    return out


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """Dispatcher for add / subtract / multiply / scale by operation name."""
    if kind == "scale":
        return scale(a, float(b))
    b = _as_tensor(b)
    if kind == "add":
        return add(a, b)
    if kind == "subtract":
        return sub(a, b)
    if kind == "multiply":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind: {kind!r}")


# -- linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b), None)
    if out._parents is not None:
        ad, bd = a.data, b.data
        need_a, need_b = _needs(a), _needs(b)
        def bwd(g):
            ga = gb = None
            if need_a:
                ga = _unbroadcast(g @ bd.swapaxes(-1, -2), a.shape)
            if need_b:
                if bd.ndim == 2 and ad.ndim > 2:
                    gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, b.shape)
            return (ga, gb)
        out._backward = bwd
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b in one tape record; b broadcasts over the leading axes."""
    if x.shape[-1] != w.shape[-2]:
        raise ShapeError(f"affine: inner dimensions disagree, {x.shape} @ {w.shape}")
    data = x.data @ w.data
    data += b.data
    out = _make(data, (x, w, b), None)
    if out._parents is not None:
        xd, wd = x.data, w.data
        need_x, need_w, need_b = _needs(x), _needs(w), _needs(b)
        def bwd(g):
            gx = gw = gb = None
            if need_x:
                gx = g @ wd.swapaxes(-1, -2)
            if need_w:
                gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            if need_b:
                gb = _unbroadcast(g, b.shape)
            return (gx, gw, gb)
        out._backward = bwd
    return out


# -- shape manipulation -------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _make(a.data.reshape(shape), (a,), None)
    if out._parents is not None:
        orig = a.shape
        out._backward = lambda g: (g.reshape(orig),)
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = _make(a.data.transpose(axes), (a,), None)
    if out._parents is not None:
        inv = tuple(np.argsort(axes))
        out._backward = lambda g: (g.transpose(inv),)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, None)
    if out._parents is not None:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def bwd(g):
            return tuple(np.split(g, splits, axis=axis))
        out._backward = bwd
    return out


def getitem(a: Tensor, key) -> Tensor:
    out = _make(a.data[key], (a,), None)
    if out._parents is not None:
        shape = a.shape
        def bwd(g):
            full = np.zeros(shape, dtype=np.float64)
            full[key] = g
            return (full,)
        out._backward = bwd
    return out


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _make(np.broadcast_to(a.data, shape).copy(), (a,), None)
    if out._parents is not None:
        orig = a.shape
        out._backward = lambda g: (_unbroadcast(g, orig),)
    return out


# -- reductions ------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), None)
    if out._parents is not None:
        shape = a.shape
        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        out._backward = bwd
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else (
        np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    )
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- pointwise nonlinearities -------------------------------------------------------------


def square(a: Tensor) -> Tensor:
    out = _make(a.data * a.data, (a,), None)
    if out._parents is not None:
        ad = a.data
        out._backward = lambda g: (2.0 * ad * g,)
    return out


def sqrt(a: Tensor) -> Tensor:
    res = np.sqrt(a.data)
    out = _make(res, (a,), None)
    if out._parents is not None:
        out._backward = lambda g: (0.5 / res * g,)
    return out


def exp(a: Tensor) -> Tensor:
    res = np.exp(a.data)
    out = _make(res, (a,), None)
    if out._parents is not None:
        out._backward = lambda g: (res * g,)
    return out


def log(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), (a,), None)
    if out._parents is not None:
        ad = a.data
        out._backward = lambda g: (g / ad,)
    return out


def tanh(a: Tensor) -> Tensor:
    res = np.tanh(a.data)
    out = _make(res, (a,), None)
    if out._parents is not None:
        out._backward = lambda g: ((1.0 - res * res) * g,)
    return out


def relu(a: Tensor) -> Tensor:
    res = np.maximum(a.data, 0.0)
    out = _make(res, (a,), None)
    if out._parents is not None:
        mask = a.data > 0.0
        out._backward = lambda g: (g * mask,)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    res = 0.5 * x * (1.0 + t)
    out = _make(res, (a,), None)
    if out._parents is not None:
        def bwd(g):
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            return (g * d,)
        out._backward = bwd
    return out


def sigmoid(a: Tensor) -> Tensor:
    res = 1.0 / (1.0 + np.exp(-a.data))
    out = _make(res, (a,), None)
    if out._parents is not None:
        out._backward = lambda g: (g * res * (1.0 - res),)
    return out


# -- softmax family ------------------------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    if a.shape[-1] < 1:
        raise ShapeError("softmax_rows: last dimension must be >= 1")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    res = e / e.sum(axis=-1, keepdims=True)
    out = _make(res, (a,), None)
    if out._parents is not None:
        def bwd(g):
            dot = (g * res).sum(axis=-1, keepdims=True)
            return ((g - dot) * res,)
        out._backward = bwd
    return out


def log_softmax_rows(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    res = shifted - lse
    out = _make(res, (a,), None)
    if out._parents is not None:
        sm = np.exp(res)
        def bwd(g):
            return (g - sm * g.sum(axis=-1, keepdims=True),)
        out._backward = bwd
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    res = xhat * gamma.data + beta.data
    out = _make(res, (x, gamma, beta), None)
    if out._parents is not None:
        gd = gamma.data
        n = x.shape[-1]
        lead = tuple(range(x.ndim - 1))
        need_x = _needs(x)
        def bwd(g):
            dx = dgamma = dbeta = None
            if _needs(gamma):
                dgamma = (g * xhat).sum(axis=lead)
            if _needs(beta):
                dbeta = g.sum(axis=lead)
            if need_x:
                dy = g * gd
                dx = inv * (dy - dy.mean(axis=-1, keepdims=True)
                            - xhat * (dy * xhat).mean(axis=-1, keepdims=True))
            return (dx, dgamma, dbeta)
        out._backward = bwd
    return out


def embedding(table: Tensor, ids: Array) -> Tensor:
    """Row lookup into an embedding table; ids is an integer numpy array."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"embedding: token id out of range [0, {table.shape[0]}), "
            f"got min={ids.min()} max={ids.max()}"
        )
    out = _make(table.data[ids], (table,), None)
    if out._parents is not None:
        shape = table.shape
        def bwd(g):
            full = np.zeros(shape, dtype=np.float64)
            np.add.at(full, ids.ravel(), g.reshape(-1, shape[-1]))
            return (full,)
        out._backward = bwd
    return out


# -- similarity ----------------------------------------------------------------------------

COSINE_EPS = 1e-12


def cosine_similarity(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity of two equal-length vectors.

    The epsilon in the denominator makes the both-zero case total and
    deterministic (result 0).
    """
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: need equal-length vectors, got {a.shape}, {b.shape}")
    dot = tsum(mul(a, b))
    na = sqrt(tsum(square(a)))
    nb = sqrt(tsum(square(b)))
    return div(dot, add(mul(na, nb), Tensor(eps)))


# -- losses --------------------------------------------------------------------------------


def one_hot(index, num_classes: int) -> Array:
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
        raise ValueError(f"label index out of class range [0, {num_classes}): {index}")
    eye = np.zeros(idx.shape + (num_classes,), dtype=np.float64)
    np.put_along_axis(eye, idx[..., None], 1.0, axis=-1)
    return eye


def cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    """Mean softmax cross-entropy; target rows are one-hot (or a distribution)."""
    if logits.shape != target.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    logp = log_softmax_rows(logits)
    rows = 1 if logits.ndim == 1 else int(np.prod(logits.shape[:-1]))
    return scale(tsum(mul(logp, target)), -1.0 / rows)


def binary_cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    """Mean sigmoid binary cross-entropy, computed in the stable logit form."""
    if logits.shape != target.shape:
        raise ShapeError(f"binary_cross_entropy: logits {logits.shape} vs target {target.shape}")
    z, t = logits.data, target.data
    vals = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = _make(np.asarray(vals.mean()), (logits, target), None)
    if out._parents is not None:
        n = z.size
        def bwd(g):
            s = 1.0 / (1.0 + np.exp(-z))
            return (g * (s - t) / n, None)
        out._backward = bwd
    return out


def mean_squared_error(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mean_squared_error: {pred.shape} vs {target.shape}")
    return tmean(square(sub(pred, target)))


_LOSSES = {
    "cross_entropy": cross_entropy,
    "binary_cross_entropy": binary_cross_entropy,
    "mse": mean_squared_error,
}


def loss(kind: str, logits: Tensor, target: Tensor) -> Tensor:
    try:
        fn = _LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss kind: {kind!r}") from None
    return fn(logits, target)


# -- reverse pass --------------------------------------------------------------------------


def backward(loss_tensor: Tensor):
    """Replay the tape from a scalar and deposit grads on trainable leaves.

    Non-trainable tensors are never written to; interior accumulators live
    only in a transient table that is dropped when the call returns, and the
    tape itself is discarded with the graph once the caller releases it.
    """
    if loss_tensor.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss_tensor.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss_tensor, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._parents is not None:
            for p in node._parents:
                if id(p) not in seen and _needs(p):
                    stack.append((p, False))

    grads: dict[int, Array] = {id(loss_tensor): np.ones_like(loss_tensor.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.trainable:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._parents is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not _needs(parent):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- initializers --------------------------------------------------------------------------


def uniform_init(rng: np.random.Generator, shape, low: float, high: float,
                 trainable: bool = True) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), trainable=trainable)


def normal_init(rng: np.random.Generator, shape, std: float = 0.02,
                trainable: bool = True) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), trainable=trainable)


def zeros(shape, trainable: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), trainable=trainable)


def ones(shape, trainable: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float64), trainable=trainable)


# -- optimizer -----------------------------------------------------------------------------


def warmup_cosine_lr(step: int, base_lr: float, total_steps: int,
                     warmup_frac: float = 0.1) -> float:
    """Linear ramp over the warmup window, cosine decay to zero after it.

    `step` counts from 0; the rate is exactly `base_lr` at the end of
    warmup and exactly 0 at `total_steps`.
    """
    warmup = int(round(warmup_frac * total_steps))
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if total_steps <= warmup:
        return base_lr
    progress = (step - warmup) / (total_steps - warmup)
    progress = min(max(progress, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight-decay Adam over an explicit parameter list.

    Moments are kept per parameter slot. Each step reads the scheduled
    learning rate at the current counter, applies the update to every
    parameter that has a gradient, and clears those gradients. Calling
    step when no parameter has a gradient is a usage error.
    """

    def __init__(self, params, base_lr: float = 1e-4, total_steps: int = 1,
                 warmup_frac: float = 0.1, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        for p in self.params:
            if not p.trainable:
                raise ValueError("AdamW: received a non-trainable parameter")
        self.base_lr = base_lr
        self.total_steps = total_steps
        self.warmup_frac = warmup_frac
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        return warmup_cosine_lr(self.step_count, self.base_lr,
                                self.total_steps, self.warmup_frac)

    def step(self):
        if all(p.grad is None for p in self.params):
            raise RuntimeError("optimizer step with no gradients populated")
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            m = self.m[i]
            v = self.v[i]
            m *= b1
            m += (1.0 - b1) * g
            np.multiply(g, g, out=g)
            v *= b2
            v += (1.0 - b2) * g
            if lr != 0.0:
                denom = np.sqrt(v, out=g)
                denom /= math.sqrt(bc2)
                denom += self.eps
                denom *= bc1 / lr
                decay = (lr * self.weight_decay) * p.data
                p.data -= m / denom
                p.data -= decay
            p.grad = None

    def state_arrays(self) -> dict[str, Array]:
        """Moment buffers keyed by slot, for checkpointing."""
        out: dict[str, Array] = {}
        for i in range(len(self.params)):
            out[f"m{i}"] = self.m[i]
            out[f"v{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, Array], step_count: int):
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"m{i}"], dtype=np.float64)
            self.v[i] = np.array(arrays[f"v{i}"], dtype=np.float64)
        self.step_count = step_count


# Spec-facing alias: the optimizer object is the optimizer state.
OptimizerState = AdamW


def optimizer_step(state: AdamW):
    state.step()
