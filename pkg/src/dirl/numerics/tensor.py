"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a `Tensor` wrapping a row-major numpy float64 array. Operations
on tensors that require gradients record a backward closure on the output; the
recorded graph acts as the gradient tape. Calling `backward()` on a scalar
result replays the tape in reverse topological order and accumulates gradients
into the `.grad` buffer of every reachable tensor that requires them.

Reductions run in numpy's sequential, row-major order, so results are
reproducible bit-for-bit for identical inputs. No GPU, no mixed precision;
broadcasting follows numpy semantics with gradients summed back over
broadcast axes.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from ..errors import DegenerateRowError, DimensionError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph: float64 data plus optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # -- graph plumbing --------------------------------------------------------

    def _make(self, data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output.

        After this call every tensor that required gradients and was touched
        in the forward computation holds an accumulated `.grad` buffer.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
            if node._parents:
                for p in node._parents:
                    if p.grad is None:
                        p._accumulate(np.zeros_like(p.data))

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return self._make(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accumulate(-g)

        return self._make(-self.data, (self,), backward)

    def __sub__(self, other):
        other = Tensor._lift(other)
        out_data = self.data - other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.data.shape))

        return self._make(out_data, (self, other), backward)

    def __rsub__(self, other):
        return Tensor._lift(other).__sub__(self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return self._make(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape)
                )

        return self._make(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return Tensor._lift(other).__truediv__(self)

    def __pow__(self, exponent: float):
        out_data = self.data**exponent

        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return self._make(out_data, (self,), backward)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def backward(g):
            buf = np.zeros_like(self.data)
            np.add.at(buf, idx, g)
            self._accumulate(buf)

        return self._make(np.array(out_data, copy=True), (self,), backward)

    # -- shape ops ----------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        src_shape = self.data.shape

        def backward(g):
            self._accumulate(g.reshape(src_shape))

        return self._make(out_data, (self,), backward)

    def swap_last_axes(self):
        out_data = np.swapaxes(self.data, -1, -2)

        def backward(g):
            self._accumulate(np.swapaxes(g, -1, -2))

        return self._make(np.ascontiguousarray(out_data), (self,), backward)

    # -- reductions ------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        src_shape = self.data.shape

        def backward(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accumulate(np.broadcast_to(gg, src_shape).copy())

        return self._make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise functions -----------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            self._accumulate(g * out_data)

        return self._make(out_data, (self,), backward)

    def log(self):
        out_data = np.log(self.data)

        def backward(g):
            self._accumulate(g / self.data)

        return self._make(out_data, (self,), backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g):
            self._accumulate(g * 0.5 / out_data)

        return self._make(out_data, (self,), backward)

    def relu(self):
        out_data = np.maximum(self.data, 0.0)

        def backward(g):
            self._accumulate(g * (self.data > 0.0))

        return self._make(out_data, (self,), backward)

    def gelu(self):
        x = self.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out_data = x * cdf

        def backward(g):
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            self._accumulate(g * (cdf + x * pdf))

        return self._make(out_data, (self,), backward)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g):
            self._accumulate(g * (1.0 - out_data * out_data))

        return self._make(out_data, (self,), backward)


def parameter(data, name: str = "") -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy semantics (2D, or stacked over leading axes)."""
    a = Tensor._lift(a)
    b = Tensor._lift(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.data.shape} x {b.data.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if b.data.ndim > 1 else np.outer(g, b.data)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if a.data.ndim > 1 else np.outer(a.data, g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return a._make(out_data, (a, b), backward)


def _masked_softmax_forward(z: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis of `z`, which may contain -inf."""
    finite_max = np.max(np.where(np.isfinite(z), z, -np.inf), axis=-1, keepdims=True)
    if not np.all(np.isfinite(finite_max)):
        raise DegenerateRowError("softmax row with no finite entry after mask addition")
    e = np.exp(z - finite_max)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(logits: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax over the last axis, with an optional {0, -inf} additive mask.

    Masked positions come out exactly 0; every surviving row renormalizes to 1.
    A row whose entries are all masked raises DegenerateRowError.
    """
    logits = Tensor._lift(logits)
    z = logits.data if additive_mask is None else logits.data + additive_mask
    probs = _masked_softmax_forward(z)

    def backward(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        logits._accumulate(probs * (g - inner))

    return logits._make(probs, (logits,), backward)


def log_softmax_rows(logits: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    logits = Tensor._lift(logits)
    m = logits.data.max(axis=-1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def backward(g):
        logits._accumulate(g - probs * g.sum(axis=-1, keepdims=True))

    return logits._make(out_data, (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row (last axis) to zero mean / unit variance, then affine."""
    x = Tensor._lift(x)
    gain = Tensor._lift(gain)
    bias = Tensor._lift(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv_std
    out_data = x_hat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gg = g * x_hat
            gain._accumulate(_unbroadcast(gg, gain.data.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            gy = g * gain.data
            mean_gy = gy.mean(axis=-1, keepdims=True)
            mean_gy_xhat = (gy * x_hat).mean(axis=-1, keepdims=True)
            x._accumulate(inv_std * (gy - mean_gy - x_hat * mean_gy_xhat))

    return x._make(out_data, (x, gain, bias), backward)


def _split_heads(arr: np.ndarray, heads: int) -> np.ndarray:
    """(..., n, d) -> (..., heads, n, d // heads)"""
    *lead, n, d = arr.shape
    out = arr.reshape(*lead, n, heads, d // heads)
    return np.swapaxes(out, -2, -3)


def _merge_heads(arr: np.ndarray) -> np.ndarray:
    """(..., heads, n, dh) -> (..., n, heads * dh)"""
    out = np.swapaxes(arr, -2, -3)
    *lead, n, heads, dh = out.shape
    return np.ascontiguousarray(out).reshape(*lead, n, heads * dh)


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    scale: float,
    additive_mask: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product attention over token axis -2.

    q/k/v: (..., n, d) with d divisible by `heads`. The optional mask holds
    0 / -inf entries of shape broadcastable to (..., n, n) and is added to the
    scaled logits before softmax, so forbidden positions carry exactly zero
    weight. Returns the merged output and a detached copy of the post-softmax
    weights with shape (..., heads, n, n).
    """
    d = q.data.shape[-1]
    if d % heads:
        raise DimensionError(f"attention: dim {d} not divisible by {heads} heads")
    q_h = _split_heads(q.data, heads)
    k_h = _split_heads(k.data, heads)
    v_h = _split_heads(v.data, heads)
    logits = np.matmul(q_h, np.swapaxes(k_h, -1, -2)) * scale
    if additive_mask is not None:
        logits = logits + np.expand_dims(additive_mask, -3)
    weights = _masked_softmax_forward(logits)
    out_h = np.matmul(weights, v_h)
    out_data = _merge_heads(out_h)

    def backward(g):
        g_h = _split_heads(g, heads)
        if v.requires_grad:
            v._accumulate(_merge_heads(np.matmul(np.swapaxes(weights, -1, -2), g_h)))
        d_weights = np.matmul(g_h, np.swapaxes(v_h, -1, -2))
        inner = (d_weights * weights).sum(axis=-1, keepdims=True)
        d_logits = weights * (d_weights - inner)
        if q.requires_grad:
            q._accumulate(_merge_heads(np.matmul(d_logits, k_h) * scale))
        if k.requires_grad:
            k._accumulate(_merge_heads(np.matmul(np.swapaxes(d_logits, -1, -2), q_h) * scale))

    out = q._make(out_data, (q, k, v), backward)
    return out, weights.copy()


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()
