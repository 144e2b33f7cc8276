"""Small reverse-mode autodiff engine on top of numpy.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure computing the parents' gradient contributions.  Calling
``loss.backward()`` topologically sorts the dynamic tape rooted at ``loss``
and runs those closures in reverse order, exactly once each.

All arithmetic is float64.  Max-style reductions route gradient to the first
maximal index, so backward passes are reproducible bit-for-bit.
"""

from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_debug = os.environ.get("PCSEM_DEBUG", "") not in ("", "0")
_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or Inf."""


def set_debug(enabled: bool) -> None:
    global _debug
    _debug = bool(enabled)


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    previous = _debug
    set_debug(enabled)
    try:
        yield
    finally:
        set_debug(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no tape inside the block (evaluation passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[], None] | None = None
        self.op = op

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Gradients of intermediate tensors are released once consumed, so a
        tape can only be walked once.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.data)
        topo = _topological_order(self)
        _accumulate(self, np.asarray(grad, dtype=DTYPE))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()
            if node._parents:
                node.grad = None
                node._backward = None

    # arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; recursion would overflow on long tapes
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _give(t: Tensor, g: np.ndarray) -> None:
    """Like :func:`_accumulate` for a freshly computed array the caller will not reuse."""
    if not t.requires_grad:
        return
    if t.grad is None and g.shape == t.data.shape and g.dtype == DTYPE:
        t.grad = g
    else:
        _accumulate(t, g)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=tuple(parents) if requires else (), op=op)


# elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _backward():
            _accumulate(a, _unbroadcast(out.grad, a.shape))
            _accumulate(b, _unbroadcast(out.grad, b.shape))
        out._backward = _backward
    return out


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backward = lambda: _accumulate(a, -out.grad)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                _give(a, _unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                _give(b, _unbroadcast(out.grad * a.data, b.shape))
        out._backward = _backward
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    out = _result(a.data ** exponent, (a,), "pow")
    if out.requires_grad:
        out._backward = lambda: _give(a, out.grad * exponent * a.data ** (exponent - 1.0))
    return out


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        def _backward():
            # every grad array is exclusively owned, so it can be masked in place
            g = out.grad
            np.multiply(g, out.data > 0, out=g)
            out.grad = None
            _give(a, g)
        out._backward = _backward
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _result(y, (a,), "tanh")
    if out.requires_grad:
        out._backward = lambda: _give(a, out.grad * (1.0 - y * y))
    return out


def clamp_max(a: Tensor, limit: float) -> Tensor:
    """``min(a, limit)``; gradient passes only where ``a < limit``."""
    mask = a.data < limit
    out = _result(np.where(mask, a.data, limit), (a,), "clamp_max")
    if out.requires_grad:
        out._backward = lambda: _give(a, out.grad * mask)
    return out


# shape ops -------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = _result(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda: _accumulate(a, out.grad.reshape(a.shape))
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    out = _result(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        inverse = None if axes is None else np.argsort(axes)
        out._backward = lambda: _accumulate(a, np.transpose(out.grad, inverse))
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")
    if out.requires_grad:
        bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

        def _backward():
            for t, g in zip(tensors, np.split(out.grad, bounds, axis=axis)):
                _accumulate(t, g)
        out._backward = _backward
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = _result(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast")
    if out.requires_grad:
        out._backward = lambda: _accumulate(a, _unbroadcast(out.grad, a.shape))
    return out


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate gradient."""
    index = np.asarray(index)
    out = _result(a.data[index], (a,), "take")
    if out.requires_grad:
        def _backward():
            g = np.zeros_like(a.data)
            np.add.at(g, index, out.grad)
            _give(a, g)
        out._backward = _backward
    return out


# reductions ------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.shape))
        out._backward = _backward
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def amax(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = _result(np.take_along_axis(a.data, idx, axis=axis).squeeze(axis), (a,), "amax")
    if out.requires_grad:
        def _backward():
            g = np.zeros_like(a.data)
            np.put_along_axis(g, idx, np.expand_dims(out.grad, axis), axis=axis)
            _give(a, g)
        out._backward = _backward
    return out


# network layers --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                _give(a, out.grad @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ out.grad, b.shape))
        out._backward = _backward
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any leading shape)."""
    x = _as_tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _result(y.reshape(lead + (w.shape[1],)), parents, "linear")
    if out.requires_grad:
        def _backward():
            g = out.grad.reshape(-1, w.shape[1])
            if w.requires_grad:
                _give(w, x2.T @ g)
            if b is not None and b.requires_grad:
                _give(b, g.sum(axis=0))
            if x.requires_grad:
                _give(x, (g @ w.data.T).reshape(x.shape))
        out._backward = _backward
    return out


def shared_mlp(points: Tensor, layers: Sequence[tuple[Tensor, Tensor]], last_relu: bool = True) -> Tensor:
    """Apply the same affine+ReLU chain to every point of ``points[..., C_in]``."""
    h = _as_tensor(points)
    for i, (w, b) in enumerate(layers):
        h = linear(h, w, b)
        if last_relu or i < len(layers) - 1:
            h = relu(h)
    return h


def max_pool_points(x: Tensor) -> Tensor:
    """Channel-wise max over the point axis: ``[..., K, C] -> [..., C]``."""
    return amax(x, axis=-2)


def view_pool(x: Tensor) -> Tensor:
    """Element-wise max over the view axis: ``[B, V, F] -> [B, F]``."""
    return amax(x, axis=1)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[B, C, H, W]`` with ``w[O, C, kh, kw]`` via im2col."""
    x = _as_tensor(x)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ValueError("conv2d: kernel larger than padded input")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    y = cols @ wmat.T
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _result(y.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2), parents, "conv2d")
    if out.requires_grad:
        def _backward():
            g = out.grad.transpose(0, 2, 3, 1).reshape(-1, O)
            if w.requires_grad:
                _give(w, (g.T @ cols).reshape(w.shape))
            if b is not None and b.requires_grad:
                _give(b, g.sum(axis=0))
            if x.requires_grad:
                dcols = (g @ wmat).reshape(B, Ho, Wo, C, kh, kw)
                dxp = np.zeros((B, C, Hp, Wp))
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                _accumulate(x, dxp[:, :, padding:padding + H, padding:padding + W])
        out._backward = _backward
    return out


def max_pool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    B, C, H, W = x.shape
    if window > H or window > W:
        raise ValueError("max_pool2d: window larger than input")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, window * window)
    arg = np.argmax(flat, axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = _result(y, (x,), "max_pool2d")
    if out.requires_grad:
        def _backward():
            dx = np.zeros_like(x.data)
            for i in range(window):
                for j in range(window):
                    hit = arg == i * window + j
                    dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += out.grad * hit
            _give(x, dx)
        out._backward = _backward
    return out


# parameters, modules, optimizer ----------------------------------------

class Parameter(Tensor):
    """A trainable leaf tensor with Adam moments and a freeze flag."""

    __slots__ = ("name", "frozen", "m", "v", "step_count")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=True)
        self.name = name
        self.frozen = frozen
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container that discovers Parameters and sub-Modules by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self, frozen: bool = True) -> None:
        for p in self.parameters():
            p.frozen = frozen

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data[...] = value


def _walk(value, name: str) -> Iterator[tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, gain: float = 1.0):
        self.weight = Parameter(kaiming_uniform(rng, (in_features, out_features), in_features, gain))
        self.bias = Parameter(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    @property
    def pair(self) -> tuple[Parameter, Parameter]:
        return self.weight, self.bias


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


def adam_step(params: Iterable[Parameter], lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; frozen parameters are skipped.

    Gradients of every parameter (frozen or not) are cleared afterwards.
    """
    b1, b2 = betas
    for p in params:
        if not p.frozen and p.grad is not None:
            g = p.grad
            p.step_count += 1
            p.m *= b1
            p.m += (1.0 - b1) * g
            p.v *= b2
            p.v += (1.0 - b2) * g * g
            m_hat = p.m / (1.0 - b1 ** p.step_count)
            v_hat = p.v / (1.0 - b2 ** p.step_count)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.lr, self.betas, self.eps)


# gradient checking -----------------------------------------------------

def numerical_grad(fn: Callable[[], float], array: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn()
        flat[i] = orig - h
        f_minus = fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradcheck(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-6) -> float:
    """Worst relative error between backprop and central differences.

    ``loss_fn`` must rebuild the graph from the current values of ``tensors``
    and return a scalar Tensor.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        numeric = numerical_grad(lambda: float(loss_fn().data), t.data, h)
        worst = max(worst, relative_error(a, numeric))
    return worst
