"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure that maps the gradient of
its output to gradients of its inputs. ``Tensor.backward`` walks the graph in
reverse topological order; only leaf tensors keep a ``grad`` buffer, which
accumulates additively until ``zero_grad`` is called.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, InvalidStateError, ShapeError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic kept deliberately small: same-shape tensors or python scalars
    def __add__(self, other):
        if isinstance(other, Tensor):
            return residual_add(self, other)
        c = float(other)
        return Tensor._from_op(self.data + c, (self,), lambda g: (g,), "add_scalar")

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _require_same_shape(self, other, "mul")
            a, b = self.data, other.data
            return Tensor._from_op(a * b, (self, other), lambda g: (g * b, g * a), "mul")
        c = float(other)
        return Tensor._from_op(self.data * c, (self,), lambda g: (g * c,), "mul_scalar")

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        shape = self.shape
        return Tensor._from_op(
            np.array(self.data.sum()), (self,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
        )

    def mean(self) -> "Tensor":
        n = self.size
        return self.sum() * (1.0 / n)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if not self.requires_grad or self._backward is None:
            raise InvalidStateError("backward() called on a tensor that was not produced by tracked operations")
        if grad is None:
            if self.size != 1:
                raise InvalidStateError(f"backward() without an explicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} does not match tensor shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _require_same_shape(x: Tensor, y: Tensor, what: str) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{what}: shapes {x.shape} and {y.shape} differ")


def _require_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected a 4-d [N, C, H, W] tensor, got shape {x.shape}")


def _check_window(stride, padding, what):
    if not isinstance(stride, (int, np.integer)) or isinstance(stride, bool) or stride < 1:
        raise InvalidArgumentError(f"{what}: stride must be a positive int, got {stride!r}")
    if not isinstance(padding, (int, np.integer)) or isinstance(padding, bool) or padding < 0:
        raise InvalidArgumentError(f"{what}: padding must be a non-negative int, got {padding!r}")


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """View of shape [N, C, Ho, Wo, kh, kw] over the zero-padded input."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _fold(dcols: np.ndarray, in_shape: tuple, stride: int, padding: int) -> np.ndarray:
    """Adjoint of ``_windows``: scatter-add [N, C, Ho, Wo, kh, kw] back onto the input."""
    n, c, h, w = in_shape
    _, _, ho, wo, kh, kw = dcols.shape
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    ``x`` is [N, Cin, H, W] and ``kernel`` is [Cout, Cin, kH, kW]; the output is
    [N, Cout, (H + 2p - kH) // stride + 1, (W + 2p - kW) // stride + 1].
    """
    _check_window(stride, padding, "conv2d")
    _require_4d(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: kernel shape {kernel.shape} incompatible with input shape {x.shape}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel shape {kernel.shape} larger than padded input of shape {x.shape} (padding {padding})"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel shape {kernel.shape}")

    if kh == kw == 1 and stride == 1 and padding == 0:
        return _pointwise_conv(x, kernel, bias)

    cols = _windows(x.data, kh, kw, stride, padding)
    out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    w_data = kernel.data

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.tensordot(g, w_data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            gx = _fold(dcols, x.shape, stride, padding)
        if kernel.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor._from_op(out, parents, backward, "conv2d")


def _pointwise_conv(x: Tensor, kernel: Tensor, bias: Optional[Tensor]) -> Tensor:
    """1x1 stride-1 convolution as a channel matmul (no window view)."""
    w2 = kernel.data[:, :, 0, 0]
    xd = x.data
    out = np.matmul(w2, xd.reshape(xd.shape[0], xd.shape[1], -1))
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(xd.shape[0], w2.shape[0], *xd.shape[2:])

    def backward(g):
        g3 = g.reshape(g.shape[0], g.shape[1], -1)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(w2.T, g3).reshape(xd.shape)
        if kernel.requires_grad:
            gw = np.tensordot(g3, xd.reshape(xd.shape[0], xd.shape[1], -1), axes=([0, 2], [0, 2]))[:, :, None, None]
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor._from_op(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel spatial cross-correlation; ``kernel`` is [C, 1, kH, kW]."""
    _check_window(stride, padding, "depthwise_conv2d")
    _require_4d(x, "depthwise_conv2d")
    if kernel.ndim != 4 or kernel.shape[0] != x.shape[1] or kernel.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: kernel shape {kernel.shape} incompatible with input shape {x.shape}")
    _, _, h, w = x.shape
    kh, kw = kernel.shape[2:]
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"depthwise_conv2d: kernel shape {kernel.shape} larger than padded input of shape {x.shape}"
        )
    n, c = x.shape[:2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    k = kernel.data[:, 0]
    taps = [(i, j, np.s_[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]) for i in range(kh) for j in range(kw)]
    out = np.zeros((n, c, ho, wo), dtype=DTYPE)
    for i, j, sl in taps:
        out += xp[sl] * k[None, :, i, j, None, None]

    def backward(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i, j, sl in taps:
                gxp[sl] += g * k[None, :, i, j, None, None]
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        if kernel.requires_grad:
            gk = np.empty((c, 1, kh, kw), dtype=DTYPE)
            for i, j, sl in taps:
                gk[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
        return gx, gk

    return Tensor._from_op(out, (x, kernel), backward, "depthwise_conv2d")


def depthwise_separable_conv(
    x: Tensor,
    depthwise: Tensor,
    pointwise: Tensor,
    stride: int = 1,
    padding: int = 0,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Depthwise spatial filtering followed by a 1x1 cross-channel mix."""
    if depthwise.ndim != 4 or x.ndim != 4 or depthwise.shape[0] != x.shape[1]:
        raise ShapeError(f"depthwise_separable_conv: depthwise kernel {depthwise.shape} vs input {x.shape}")
    if pointwise.ndim != 4 or pointwise.shape[2:] != (1, 1):
        raise ShapeError(f"depthwise_separable_conv: pointwise kernel must be [Cout, C, 1, 1], got {pointwise.shape}")
    return conv2d(depthwise_conv2d(x, depthwise, stride, padding), pointwise, bias)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        mask = x.data > 0
        # np.maximum keeps NaN visible so a diverging run is detected downstream
        return Tensor._from_op(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")
    if kind == "swish":
        s = _sigmoid(x.data)
        v = x.data
        return Tensor._from_op(v * s, (x,), lambda g: (g * (s + v * s * (1.0 - s)),), "swish")
    raise InvalidArgumentError(f"unknown activation {kind!r}; expected 'relu' or 'swish'")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def swish(x: Tensor) -> Tensor:
    return activation(x, "swish")


@dataclass
class NormState:
    """Running per-channel statistics for ``channel_norm``."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "NormState":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE), momentum)


def channel_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: NormState,
    training: bool = True,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, H, W) followed by an affine map.

    In training mode the batch statistics are used and the running statistics
    move toward them: ``r <- (1 - m) * r + m * batch``. The variance is the
    biased (population) variance in both places.
    """
    _require_4d(x, "channel_norm")
    if eps <= 0:
        raise InvalidArgumentError(f"channel_norm: eps must be positive, got {eps}")
    n, c, h, w = x.shape
    if n * h * w == 0:
        raise InvalidArgumentError(f"channel_norm: no elements to normalize in input of shape {x.shape}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"channel_norm: gamma {gamma.shape} / beta {beta.shape} do not match input {x.shape}")

    g_ = gamma.data[None, :, None, None]
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * var
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = g_ * xhat + beta.data[None, :, None, None]
    count = n * h * w

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * g_
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv_std[None, :, None, None] / count) * (count * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std[None, :, None, None]
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward, "channel_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    if h * w < 1:
        raise ShapeError(f"global_avg_pool: empty spatial extent in shape {x.shape}")
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` average pooling (stride = size)."""
    _require_4d(x, "avg_pool2d")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool2d: spatial size {h}x{w} not divisible by {size}")
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))
    scale = 1.0 / (size * size)

    def backward(g):
        return (np.repeat(np.repeat(g, size, axis=2), size, axis=3) * scale,)

    return Tensor._from_op(out, (x,), backward, "avg_pool2d")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``out[n, k] = sum_d weight[k, d] * x[n, d] + bias[k]``."""
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    xd, wd = x.data, weight.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, backward, "linear")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise InvalidArgumentError("concat_channels: need at least one tensor")
    for p in parts:
        _require_4d(p, "concat_channels")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: shape {p.shape} does not match {parts[0].shape} in N/H/W")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([p.shape[1] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        return tuple(np.split(g, bounds, axis=1))

    return Tensor._from_op(out, parts, backward, "concat_channels")


def residual_add(x: Tensor, y: Tensor) -> Tensor:
    _require_same_shape(x, y, "residual_add")
    return Tensor._from_op(x.data + y.data, (x, y), lambda g: (g, g), "residual_add")


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    if logits.ndim != 2 or logits.shape[1] < 1:
        raise ShapeError(f"softmax: expected [N, K] logits with K >= 1, got {logits.shape}")
    s = _softmax_rows(logits.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(s, (logits,), backward, "softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k or not np.issubdtype(labels.dtype, np.integer)):
        raise InvalidArgumentError(f"cross_entropy: labels must be integers in [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(n)
    loss = np.array((lse - z[rows, labels]).mean())

    def backward(g):
        d = _softmax_rows(z)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return Tensor._from_op(loss, (logits,), backward, "cross_entropy")
