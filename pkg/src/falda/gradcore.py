"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine covers exactly what the forecasting networks need: broadcasting
arithmetic, matrix products against 2-D weight matrices, ReLU/sigmoid/SiLU,
layer normalization, centered moving averages, sinusoidal step embeddings,
and a bias-corrected Adam optimizer.

Every forward pass records a fresh tape (parent links plus a backward
closure per node); ``backward()`` runs one reverse topological sweep,
deposits gradients on ``requires_grad`` leaves, and tears the tape down.
Higher-order derivatives are out of scope. A tape must stay confined to a
single thread; independent tapes may run concurrently.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError

_tape_counter = itertools.count()
_thread_state = threading.local()  # grad mode is per thread, like the tapes


def _recording():
    return getattr(_thread_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Suspend tape recording (inference, oracle evaluation)."""
    previous = _recording()
    _thread_state.grad_enabled = False
    try:
        yield
    finally:
        _thread_state.grad_enabled = previous


def _unbroadcast(grad, shape):
    # Sum out the axes numpy broadcast into existence so the gradient
    # matches the original operand shape.
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeezed:
        grad = grad.sum(axis=squeezed, keepdims=True)
    return grad


class Tensor:
    """N-dimensional float64 array participating in reverse-mode autodiff.

    ``grad`` is lazily allocated by ``backward()`` and accumulates across
    calls until cleared. Values are immutable by convention once the tensor
    has entered a graph; the optimizer mutates leaf ``data`` in place only
    between passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape_id = next(_tape_counter)
        self._parents = _parents
        self._backward = _backward

    # -- introspection ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- graph construction ----------------------------------------------

    @staticmethod
    def _lift(value):
        return value if isinstance(value, Tensor) else Tensor(value)

    @staticmethod
    def _node(data, parents, backward):
        if _recording() and any(p.requires_grad for p in parents):
            return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
        return Tensor(data)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        a, b = self, self._lift(other)

        def backward(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

        return self._node(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, self._lift(other)

        def backward(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

        return self._node(a.data - b.data, (a, b), backward)

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        a, b = self, self._lift(other)

        def backward(g):
            return (_unbroadcast(g * b.data, a.data.shape),
                    _unbroadcast(g * a.data, b.data.shape))

        return self._node(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, self._lift(other)

        def backward(g):
            return (_unbroadcast(g / b.data, a.data.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return self._node(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        a = self

        def backward(g):
            return (-g,)

        return self._node(-a.data, (a,), backward)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a, e = self, float(exponent)

        def backward(g):
            return (g * e * a.data ** (e - 1.0),)

        return self._node(a.data ** e, (a,), backward)

    def __matmul__(self, other):
        a, b = self, self._lift(other)
        if b.data.ndim != 2:
            raise ShapeError(f"matmul weight must be 2-D, got shape {b.data.shape}")
        if a.data.ndim < 1 or a.data.shape[-1] != b.data.shape[0]:
            raise ShapeError(
                f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}")
        out = a.data @ b.data

        def backward(g):
            ga = g @ b.data.T
            # accumulate over every leading dim: rows of a against rows of g
            a2 = a.data.reshape(-1, a.data.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            return ga, a2.T @ g2

        return self._node(out, (a, b), backward)

    # -- reductions --------------------------------------------------------

    def sum(self):
        a = self

        def backward(g):
            return (np.full(a.data.shape, float(g)),)

        return self._node(a.data.sum(), (a,), backward)

    def mean(self):
        a = self
        n = a.data.size

        def backward(g):
            return (np.full(a.data.shape, float(g) / n),)

        return self._node(a.data.mean(), (a,), backward)

    # -- elementwise nonlinearities -----------------------------------------

    def abs(self):
        a = self

        def backward(g):
            return (g * np.sign(a.data),)

        return self._node(np.abs(a.data), (a,), backward)

    def relu(self):
        a = self

        def backward(g):
            return (g * (a.data > 0.0),)

        return self._node(np.maximum(a.data, 0.0), (a,), backward)

    def sigmoid(self):
        a = self
        s = 1.0 / (1.0 + np.exp(-a.data))

        def backward(g):
            return (g * s * (1.0 - s),)

        return self._node(s, (a,), backward)

    def silu(self):
        a = self
        s = 1.0 / (1.0 + np.exp(-a.data))

        def backward(g):
            return (g * s * (1.0 + a.data * (1.0 - s)),)

        return self._node(a.data * s, (a,), backward)

    # -- structure ----------------------------------------------------------

    def swap_last2(self):
        """Transpose the last two axes."""
        a = self
        if a.data.ndim < 2:
            raise ShapeError(f"need at least 2 dimensions to transpose, got {a.data.shape}")

        def backward(g):
            return (np.swapaxes(g, -1, -2),)

        return self._node(np.swapaxes(a.data, -1, -2), (a,), backward)

    @property
    def T(self):
        return self.swap_last2()

    def slice_last(self, start, stop):
        """Contiguous slice along the last axis."""
        a = self

        def backward(g):
            full = np.zeros(a.data.shape)
            full[..., start:stop] = g
            return (full,)

        return self._node(a.data[..., start:stop].copy(), (a,), backward)

    def detach(self):
        """Same values, gradient flow severed."""
        return Tensor(self.data)

    # -- backward -----------------------------------------------------------

    def backward(self):
        """Reverse sweep from a scalar loss.

        Populates ``grad`` on every ``requires_grad`` leaf reachable from
        this node, accumulating across repeated calls. The tape (parent
        links, closures, intermediate grads) is freed as the sweep runs.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            return

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if node in visited:
                continue
            visited.add(node)
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and parent not in visited:
                    stack.append((parent, False))

        seed = np.ones(self.data.shape)
        self.grad = seed if self.grad is None else self.grad + seed

        for node in reversed(topo):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            node._parents = ()
            node._backward = None
            node.grad = None


# -- functional ops ----------------------------------------------------------


def detach(x):
    return x.detach()


def linear(x, weight, bias=None):
    """Affine map along the last axis: ``x @ weight (+ bias)``.

    ``x`` has shape (..., in), ``weight`` (in, out), ``bias`` (out,).
    """
    out = x @ weight
    if bias is not None:
        if bias.data.shape != (weight.data.shape[1],):
            raise ShapeError(
                f"bias shape {bias.data.shape} does not match weight output dim "
                f"{weight.data.shape}")
        out = out + bias
    return out


def silu(x):
    return x.silu()


def layer_norm(x, eps=1e-5):
    """Zero-mean unit-variance normalization along the last axis.

    No learned affine: scale/shift are supplied externally by the caller
    (adaptive modulation). The last axis must have at least 2 entries.
    """
    a = Tensor._lift(x)
    h = a.data.shape[-1] if a.data.ndim else 0
    if h < 2:
        raise ShapeError(f"layer_norm needs a last axis of length >= 2, got shape {a.data.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return ((g - gm - xhat * gx) * inv,)

    return Tensor._node(xhat, (a,), backward)


@lru_cache(maxsize=None)
def _ma_matrix(length, window):
    # Row i averages the replicate-padded window centered at i; padding
    # folds into the edge columns as extra weight.
    half = (window - 1) // 2
    m = np.zeros((length, length))
    for i in range(length):
        for j in range(i - half, i + half + 1):
            m[i, min(max(j, 0), length - 1)] += 1.0 / window
    return m


def moving_average(x, window):
    """Centered mean over ``window`` points along the last axis.

    Replicate padding of (window-1)/2 at both ends keeps the output the
    same length as the input. ``window`` must be odd.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"moving average window must be odd and >= 1, got {window}")
    a = Tensor._lift(x)
    m = _ma_matrix(a.data.shape[-1], window)
    out = a.data @ m.T

    def backward(g):
        return (g @ m,)

    return Tensor._node(out, (a,), backward)


def concat_last(tensors):
    """Concatenate tensors along the last axis."""
    parts = [Tensor._lift(t) for t in tensors]
    widths = [p.data.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)

    def backward(g):
        grads, offset = [], 0
        for w in widths:
            grads.append(g[..., offset:offset + w])
            offset += w
        return tuple(grads)

    return Tensor._node(out, tuple(parts), backward)


def sinusoidal_embedding(k, dim):
    """Sinusoidal position embedding of a diffusion-step index.

    Entry 2i is sin(k / 10000^(2i/dim)), entry 2i+1 the matching cosine.
    Returns a constant tensor of shape (dim,); ``dim`` must be even.
    """
    if dim % 2 != 0 or dim < 2:
        raise ConfigError(f"embedding dimension must be even and >= 2, got {dim}")
    if k < 0:
        raise ConfigError(f"step index must be non-negative, got {k}")
    i = np.arange(dim // 2)
    angle = k / (10000.0 ** (2.0 * i / dim))
    pe = np.empty(dim)
    pe[0::2] = np.sin(angle)
    pe[1::2] = np.cos(angle)
    return Tensor(pe)


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a fixed parameter list.

    Parameters whose ``grad`` is ``None`` are skipped entirely (no moment
    decay, no step-count advance), so parameters outside the active loss
    stay bit-identical. Callers zero gradients between steps via
    ``zero_grad()``.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros(p.data.shape) for p in self.params]
        self.v = [np.zeros(p.data.shape) for p in self.params]
        self.t = [0] * len(self.params)

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.t[i] += 1
            t = self.t[i]
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / (1.0 - self.beta1 ** t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
