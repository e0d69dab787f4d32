"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is implicit: every op returns a new ``Tensor`` that remembers its
parents and a closure propagating upstream gradients, and ``backward`` walks
the tape in reverse topological order. The op set is exactly what the
refiner/discriminator stack and its losses need; nothing more.

Storage defaults to float32. Reductions (``sum``/``mean``) accumulate in
float64 before casting back, so results are stable under re-chunking.
float64 storage is supported end to end and is what the finite-difference
gradient checks run in.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError, TrainingDivergenceError

DEFAULT_DTYPE = np.float32

# log() is guarded so adversarial losses stay finite when a probability
# saturates to 0.
LOG_FLOOR = 1e-12


def _coerce(data, dtype):
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """Dense array node of the implicit differentiation graph.

    ``requires_grad=True`` marks a parameter leaf; op outputs require grad
    whenever any input does. ``grad`` accumulates during ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _coerce(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward_fn):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Copy of the value, cut loose from the graph."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- graph traversal ------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep seeding d(self)/d(self) = 1.

        ``self`` must hold a single element (the loss). Gradients accumulate
        into ``.grad`` of every tensor on the tape that requires grad.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def abs(self):
        return absolute(self)

    def log(self):
        return log(self)

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis=axis)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _accumulate(tensor: Tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = grad.copy() if isinstance(grad, np.ndarray) else np.asarray(grad)
    else:
        tensor.grad = tensor.grad + grad


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after a broadcast forward op."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops ----------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out_data = a.data + b.data

    def backward_fn(grad):
        _accumulate(a, _unbroadcast(grad, a.data.shape))
        _accumulate(b, _unbroadcast(grad, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out_data = a.data - b.data

    def backward_fn(grad):
        _accumulate(a, _unbroadcast(grad, a.data.shape))
        _accumulate(b, _unbroadcast(-grad, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out_data = a.data * b.data

    def backward_fn(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(grad * a.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(grad):
        _accumulate(a, grad @ b.data.T)
        _accumulate(b, a.data.T @ grad)

    return Tensor._from_op(out_data, (a, b), backward_fn)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    mask = x.data >= 0
    out_data = np.where(mask, x.data, x.data * x.data.dtype.type(slope))

    def backward_fn(grad):
        _accumulate(x, np.where(mask, grad, grad * x.data.dtype.type(slope)))

    return Tensor._from_op(out_data, (x,), backward_fn)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward_fn(grad):
        _accumulate(x, grad * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (x,), backward_fn)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.tanh(x.data)

    def backward_fn(grad):
        _accumulate(x, grad * (1.0 - out_data * out_data))

    return Tensor._from_op(out_data, (x,), backward_fn)


def log(x) -> Tensor:
    """Natural log of max(x, LOG_FLOOR); zero gradient below the floor."""
    x = as_tensor(x)
    clipped = np.maximum(x.data, x.data.dtype.type(LOG_FLOOR))
    out_data = np.log(clipped)

    def backward_fn(grad):
        _accumulate(x, np.where(x.data >= LOG_FLOOR, grad / clipped, 0.0))

    return Tensor._from_op(out_data, (x,), backward_fn)


def absolute(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.abs(x.data)

    def backward_fn(grad):
        _accumulate(x, grad * np.sign(x.data))

    return Tensor._from_op(out_data, (x,), backward_fn)


def clamp01(x) -> Tensor:
    """Clip to [0, 1]; subgradient is zero outside the open interval."""
    x = as_tensor(x)
    out_data = np.clip(x.data, 0.0, 1.0)
    interior = (x.data > 0.0) & (x.data < 1.0)

    def backward_fn(grad):
        _accumulate(x, np.where(interior, grad, 0.0))

    return Tensor._from_op(out_data, (x,), backward_fn)


# -- reductions ---------------------------------------------------------------


def _reduce(x, axis, want_mean):
    x = as_tensor(x)
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)
    # float64 accumulation, cast back to storage dtype
    acc = np.sum(x.data, axis=axis, dtype=np.float64)
    if axis is None:
        count = x.data.size
    else:
        count = 1
        for ax in axis:
            count *= x.data.shape[ax]
    if want_mean:
        acc = acc / count
    out_data = np.asarray(acc, dtype=x.data.dtype)

    def backward_fn(grad):
        g = np.asarray(grad)
        if axis is not None:
            g = np.expand_dims(g, axis=axis)
        g = np.broadcast_to(g, x.data.shape)
        if want_mean:
            g = g / x.data.dtype.type(count)
        _accumulate(x, np.ascontiguousarray(g))

    return Tensor._from_op(out_data, (x,), backward_fn)


def tensor_sum(x, axis=None) -> Tensor:
    return _reduce(x, axis, want_mean=False)


def tensor_mean(x, axis=None) -> Tensor:
    return _reduce(x, axis, want_mean=True)


# -- spatial ops --------------------------------------------------------------


def pad(x, padding: int) -> Tensor:
    """Symmetric zero padding of the two trailing spatial dims of NCHW input."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"pad expects NCHW input, got shape {x.shape}")
    if padding < 0:
        raise ContractError("pad amount must be >= 0")
    if padding == 0:
        out_data = x.data.copy()

        def backward_id(grad):
            _accumulate(x, grad)

        return Tensor._from_op(out_data, (x,), backward_id)

    p = padding
    out_data = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))

    def backward_fn(grad):
        _accumulate(x, grad[:, :, p:-p, p:-p])

    return Tensor._from_op(out_data, (x,), backward_fn)


def _im2col(padded, kh, kw, stride, oh, ow):
    b, c = padded.shape[:2]
    s0, s1, s2, s3 = padded.strides
    view = np.lib.stride_tricks.as_strided(
        padded,
        shape=(b, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    # (B*OH*OW, C*KH*KW)
    return view.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation: NCHW input against an OIHW kernel."""
    x = as_tensor(x)
    w = as_tensor(w, like=x)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d expects OIHW kernel, got shape {w.shape}")
    b, c, h, wd = x.data.shape
    oc, ic, kh, kw = w.data.shape
    if ic != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel wants {ic}")
    if stride < 1:
        raise ContractError("conv2d stride must be >= 1")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} does not fit padded input {hp}x{wp}"
        )
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    if padding > 0:
        padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        padded = x.data
    cols = _im2col(padded, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(oc, ic * kh * kw)
    out_data = (cols @ wmat.T).reshape(b, oh, ow, oc).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)

    def backward_fn(grad):
        gmat = grad.transpose(0, 2, 3, 1).reshape(b * oh * ow, oc)
        if w.requires_grad:
            _accumulate(w, (gmat.T @ cols).reshape(oc, ic, kh, kw))
        if x.requires_grad:
            gcols = gmat @ wmat  # (B*OH*OW, C*KH*KW)
            gcols = gcols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gpad = np.zeros((b, c, hp, wp), dtype=x.data.dtype)
            for u in range(kh):
                for v in range(kw):
                    gpad[:, :, u : u + oh * stride : stride, v : v + ow * stride : stride] += gcols[
                        :, :, u, v
                    ]
            if padding > 0:
                gpad = gpad[:, :, padding:-padding, padding:-padding]
            _accumulate(x, gpad)

    return Tensor._from_op(out_data, (x, w), backward_fn)


# -- parameter collection and updates ----------------------------------------


def gradients(loss: Tensor, params) -> list[np.ndarray]:
    """Run backward from ``loss`` and return one gradient per parameter.

    Parameters not reachable from the loss get a zero gradient.
    """
    for p in params:
        p.zero_grad()
    loss.backward()
    return [
        p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
    ]


def zero_grads(params):
    for p in params:
        p.zero_grad()


class SGD:
    """Vanilla gradient descent: p <- p - lr * g."""

    kind = "sgd"

    def __init__(self, params, learning_rate: float = 2e-4):
        if learning_rate <= 0:
            raise ContractError("learning_rate must be > 0")
        self.params = list(params)
        self.learning_rate = learning_rate
        self.step_count = 0

    def step(self, grads=None):
        grads = _resolve_grads(self.params, grads)
        self.step_count += 1
        for p, g in zip(self.params, grads):
            p.data -= p.data.dtype.type(self.learning_rate) * g


class Adam:
    """Bias-corrected Adam. Defaults follow the image-to-image GAN lineage
    the network architecture comes from (lr 2e-4, beta1 0.5)."""

    kind = "adam"

    def __init__(
        self,
        params,
        learning_rate: float = 2e-4,
        beta1: float = 0.5,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if learning_rate <= 0:
            raise ContractError("learning_rate must be > 0")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ContractError("betas must lie in [0, 1)")
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        grads = _resolve_grads(self.params, grads)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**t
        bias2 = 1.0 - b2**t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g64 = g.astype(np.float64, copy=False)
            self.m[i] = (b1 * self.m[i] + (1.0 - b1) * g64).astype(p.data.dtype)
            self.v[i] = (b2 * self.v[i] + (1.0 - b2) * g64 * g64).astype(p.data.dtype)
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            update = self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def state_tensors(self):
        """Moment arrays and step count, keyed by parameter index."""
        state = {}
        for i in range(len(self.params)):
            state[f"m.{i}"] = self.m[i]
            state[f"v.{i}"] = self.v[i]
        state["step"] = np.array([self.step_count], dtype=np.float32)
        return state

    def load_state_tensors(self, state):
        for i in range(len(self.params)):
            self.m[i] = np.asarray(state[f"m.{i}"], dtype=self.params[i].data.dtype)
            self.v[i] = np.asarray(state[f"v.{i}"], dtype=self.params[i].data.dtype)
        self.step_count = int(round(float(state["step"][0])))


def _resolve_grads(params, grads):
    if grads is None:
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
        ]
    grads = [np.asarray(g) for g in grads]
    if len(grads) != len(params):
        raise ContractError(
            f"got {len(grads)} gradients for {len(params)} parameters"
        )
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter {p.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient in optimizer step")
    return grads


def make_optimizer(kind: str, params, learning_rate: float, beta1=0.5, beta2=0.999, eps=1e-8):
    if kind == "adam":
        return Adam(params, learning_rate, beta1, beta2, eps)
    if kind == "sgd":
        return SGD(params, learning_rate)
    raise ContractError(f"unknown optimizer kind {kind!r}")
