"""Small dense-tensor engine with reverse-mode differentiation.

Only the operations the range-image U-Net and its loss need are provided:
2-D convolution, 2x2 transposed convolution, 2x2 max-pooling, ReLU, batch
normalization, channel concatenation, softmax / log-softmax and a handful of
elementwise helpers. Activations use the NCHW layout.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand extents are incompatible with an operation."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


_blas_limiter = None


def set_deterministic(enabled: bool = True) -> None:
    """Pin BLAS to one thread so every reduction runs in a fixed order.

    numpy's own reductions are already order-stable; the BLAS thread pool is
    the only source of run-to-run variation.
    """
    global _blas_limiter
    from threadpoolctl import threadpool_limits

    if enabled and _blas_limiter is None:
        _blas_limiter = threadpool_limits(limits=1, user_api="blas")
    elif not enabled and _blas_limiter is not None:
        _blas_limiter.restore_original_limits()
        _blas_limiter = None


class Tensor:
    """Dense array node in a differentiation graph.

    ``grad`` is only ever set on leaf tensors (tensors created directly rather
    than produced by an operation) that have ``requires_grad`` enabled.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # elementwise helpers used by the loss
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -np.asarray(other))

    def sum(self):
        return tensor_sum(self)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``params`` that the loss does not depend on receive a zero gradient so an
    optimizer step over the full parameter list stays well defined. The
    recorded graph is released afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._parents = ()
            node._backward = None
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data.astype(a.dtype, copy=False)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), back)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    bd = b.data.astype(a.dtype, copy=False)
    out = a.data * bd

    def back(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return mul(a, -1.0)


def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def back(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), back)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    active = x.data > 0
    out = np.where(active, x.data, 0).astype(x.dtype, copy=False)

    def back(g):
        return (g * active,)

    return _result(out, (x,), back)


def _im2col(x: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    """(Cin, Hp, Wp) -> (Cin*kh*kw, ho*wo), one contiguous slice copy per offset."""
    cin = x.shape[0]
    if kh == 1 and kw == 1:
        return x.reshape(cin, ho * wo)
    cols = np.empty((cin, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i : i + ho, j : j + wo]
    return cols.reshape(cin * kh * kw, ho * wo)


def _correlate(x: np.ndarray, w: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    """Cross-correlate an NCHW array with an (Cout, Cin, kh, kw) kernel.

    Works one sample at a time so the im2col buffer stays bounded.
    """
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    ho = h + 2 * pad_h - kh + 1
    wo = wd + 2 * pad_w - kw + 1
    w2 = w.reshape(cout, cin * kh * kw)
    out = np.empty((n, cout, ho, wo), dtype=np.result_type(x, w))
    for i in range(n):
        out[i] = (w2 @ _im2col(x[i], kh, kw, ho, wo)).reshape(cout, ho, wo)
    return out


def _kernel_grad(x: np.ndarray, g: np.ndarray, kh: int, kw: int, pad_h: int, pad_w: int) -> np.ndarray:
    n, cin, _, _ = x.shape
    cout = g.shape[1]
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    ho, wo = g.shape[2], g.shape[3]
    gw = np.zeros((cout, cin * kh * kw), dtype=g.dtype)
    for i in range(n):
        gw += g[i].reshape(cout, ho * wo) @ _im2col(x[i], kh, kw, ho, wo).T
    return gw.reshape(cout, cin, kh, kw)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation (no kernel flip) with zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input has {cin} channels, weight expects {wcin} (weight shape {weight.shape})"
        )
    if kh < 1 or kw < 1 or padding < 0:
        raise ShapeError(f"invalid kernel {kh}x{kw} or padding {padding}")
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, padding {padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")

    out = _correlate(x.data, weight.data, padding, padding)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def back(g):
        gx = gw = gb = None
        if x.requires_grad:
            # full correlation with the flipped, channel-swapped kernel gives the
            # gradient on the padded input; crop the padding back off
            flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            full = _correlate(g, np.ascontiguousarray(flipped), kh - 1, kw - 1)
            gx = full[:, :, padding : padding + h, padding : padding + w]
        if weight.requires_grad:
            gw = _kernel_grad(x.data, g, kh, kw, padding, padding)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, back)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """2x2 transposed convolution with stride 2: doubles both spatial extents.

    Each input pixel scatters a ``weight[cin, :, :, :]``-weighted 2x2 patch into
    its own output block; blocks never overlap.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects a 4-D input, got shape {x.shape}")
    n, cin, h, w = x.shape
    if weight.ndim != 4 or weight.shape[0] != cin or weight.shape[2:] != (2, 2):
        raise ShapeError(f"conv_transpose2d weight must be ({cin}, Cout, 2, 2), got {weight.shape}")
    cout = weight.shape[1]
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d bias shape {bias.shape} does not match {cout} output channels")

    # (N, H, W, Cout, 2, 2) -> (N, Cout, H, 2, W, 2)
    y = np.tensordot(x.data.transpose(0, 2, 3, 1), weight.data, axes=([3], [0]))
    out = np.ascontiguousarray(y.transpose(0, 3, 1, 4, 2, 5)).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def back(g):
        blocks = g.reshape(n, cout, h, 2, w, 2)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.einsum("nohawb,ioab->nihw", blocks, weight.data, optimize=True)
        if weight.requires_grad:
            gw = np.einsum("nihw,nohawb->ioab", x.data, blocks, optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, back)


def maxpool2d(x: Tensor, return_indices: bool = False):
    """2x2 max-pooling with stride 2.

    Ties go to the first maximal element in row-major window order. The
    returned indices are in 0..3 (row-major position inside the window).
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def back(g):
        routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        gx = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    out = _result(out, (x,), back)
    return (out, idx) if return_indices else out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis (``a`` first)."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels expects 4-D tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels extent mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)

    def back(g):
        return g[:, :ca], g[:, ca:]

    return _result(out, (a, b), back)


def softmax(logits: Tensor, axis: int = 1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (logits,), back)


def log_softmax(logits: Tensor, axis: int = 1) -> Tensor:
    """Log-probabilities via log-sum-exp with a max shift."""
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (logits,), back)


class BatchNormState:
    """Per-channel batch-normalization parameters and running statistics.

    ``momentum`` weights the old running value:
    ``running = momentum * running + (1 - momentum) * batch``.
    """

    def __init__(self, num_channels: int, momentum: float = 0.99, eps: float = 1e-5, dtype=np.float32, name: str = "bn"):
        from .optim import Parameter

        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self.gamma = Parameter(np.ones(num_channels, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(num_channels, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(num_channels, dtype=dtype)
        self.running_var = np.ones(num_channels, dtype=dtype)

    @property
    def num_channels(self) -> int:
        return self.running_mean.shape[0]


def batchnorm2d(x: Tensor, state: BatchNormState) -> Tensor:
    """Batch normalization over (N, H, W) per channel, followed by gamma/beta."""
    if x.ndim != 4 or x.shape[1] != state.num_channels:
        raise ShapeError(f"batchnorm2d expects (N, {state.num_channels}, H, W), got {x.shape}")
    n, c, h, w = x.shape
    gamma = state.gamma.data.astype(x.dtype, copy=False).reshape(1, c, 1, 1)
    beta = state.beta.data.astype(x.dtype, copy=False).reshape(1, c, 1, 1)
    count = n * h * w

    if state.training:
        if count < 2:
            raise ShapeError("batchnorm2d in training mode needs N*H*W >= 2 to estimate a variance")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv_std.reshape(1, c, 1, 1)
        m = state.momentum
        unbiased = var * (count / (count - 1))
        state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(state.running_mean.dtype)
        running_var = m * state.running_var + (1 - m) * unbiased
        state.running_var = np.maximum(running_var, state.eps).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(x.dtype)
        inv_std = (1.0 / np.sqrt(state.running_var.astype(x.dtype) + state.eps)).astype(x.dtype)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = xhat * gamma + beta
    training = state.training

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if state.gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if state.beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma
            scale = inv_std.reshape(1, c, 1, 1)
            if training:
                sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = scale * (dxhat - sum_d / count - xhat * (sum_dx / count))
            else:
                gx = dxhat * scale
        return gx, gg, gb

    return _result(out.astype(x.dtype, copy=False), (x, state.gamma, state.beta), back)
