"""Dense tensors with reverse-mode automatic differentiation.

This is a deliberately small engine: it implements exactly the operations the
progressive prediction network needs (stride-1 convolutions, elementwise math,
nearest-neighbour upsampling, reductions, masked gather/scatter) on top of
numpy arrays.  float32 is the working precision for inference and training;
every op also runs in float64, which is what the gradient-check tests use.

Reductions go through numpy's row-major pairwise summation, so identical
inputs produce bit-identical outputs within one build -- the encoder and the
decoder must compute the same probabilities.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True
_FINITE_CHECKS = True


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class finite_checks:
    """Context manager toggling per-op NaN/Inf validation (on by default)."""

    def __init__(self, enabled: bool):
        self._enabled = enabled

    def __enter__(self):
        global _FINITE_CHECKS
        self._prev = _FINITE_CHECKS
        _FINITE_CHECKS = self._enabled

    def __exit__(self, *exc):
        global _FINITE_CHECKS
        _FINITE_CHECKS = self._prev
        return False


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf; results would be meaningless."""


def _validate(data: np.ndarray, op: str) -> np.ndarray:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")
    return data


class Tensor:
    """A numpy array plus an optional backward closure on the gradient tape.

    Tensors are immutable values once created.  ``data`` is float32 or
    float64; gradients accumulate into ``grad`` with the same dtype.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, _parents: Sequence["Tensor"] = ()):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward_fn: Callable[[], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return slice_view(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self, seed_grad=None) -> None:
        backward(self, seed_grad)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _validate(data, op)
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _parents=parents if requires else ())
    if requires:
        out._backward_fn = backward_fn
    return out


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def bw():
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(out.grad, b.shape))

    out = _make(out_data, (a, b), bw, "add")
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    out_data = a.data - b.data

    def bw():
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(-out.grad, b.shape))

    out = _make(out_data, (a, b), bw, "sub")
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def bw():
        _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    out = _make(out_data, (a, b), bw, "mul")
    return out


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def bw():
        _accumulate(a, _unbroadcast(out.grad / b.data, a.shape))
        _accumulate(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    out = _make(out_data, (a, b), bw, "div")
    return out


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def bw():
        _accumulate(x, out.grad * (x.data > 0))

    out = _make(out_data, (x,), bw, "relu")
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out_data = np.where(x.data > 0, x.data, x.data * x.data.dtype.type(slope))

    def bw():
        _accumulate(x, out.grad * np.where(x.data > 0, 1.0, slope).astype(x.dtype))

    out = _make(out_data, (x,), bw, "leaky_relu")
    return out


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bw():
        _accumulate(x, out.grad * out.data)

    out = _make(out_data, (x,), bw, "exp")
    return out


def log(x: Tensor) -> Tensor:
    out_data = np.log(x.data)

    def bw():
        _accumulate(x, out.grad / x.data)

    out = _make(out_data, (x,), bw, "log")
    return out


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def bw():
        _accumulate(x, out.grad * (1.0 - out.data * out.data))

    out = _make(out_data, (x,), bw, "tanh")
    return out


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic CDF as 0.5*(1 + tanh(x/2)): one ufunc, nothing overflows."""
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    out_data = stable_sigmoid(x.data)

    def bw():
        _accumulate(x, out.grad * out.data * (1.0 - out.data))

    out = _make(out_data, (x,), bw, "sigmoid")
    return out


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise clamp from below; gradient flows only where x > floor."""
    out_data = np.maximum(x.data, x.data.dtype.type(floor))

    def bw():
        _accumulate(x, out.grad * (x.data > floor))

    out = _make(out_data, (x,), bw, "maximum")
    return out


# -- shape ops ----------------------------------------------------------------


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate (N,C,H,W) tensors along the channel axis."""
    out_data = np.concatenate([t.data for t in tensors], axis=1)

    def bw():
        start = 0
        for t in tensors:
            n = t.shape[1]
            _accumulate(t, out.grad[:, start:start + n])
            start += n

    out = _make(out_data, tuple(tensors), bw, "concat_channels")
    return out


def slice_view(x: Tensor, idx) -> Tensor:
    """Basic (slice/int tuple) indexing; gradient scatters back to the source."""
    out_data = np.ascontiguousarray(x.data[idx])

    def bw():
        g = np.zeros_like(x.data)
        g[idx] = out.grad
        _accumulate(x, g)

    out = _make(out_data, (x,), bw, "slice")
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def bw():
        _accumulate(x, out.grad.reshape(x.shape))

    out = _make(out_data, (x,), bw, "reshape")
    return out


def nearest_upsample2x(x: Tensor) -> Tensor:
    """Replicate every element of an (N,C,H,W) tensor into a 2x2 block."""
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw():
        n, c, h2, w2 = out.grad.shape
        g = out.grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        _accumulate(x, g)

    out = _make(out_data, (x,), bw, "nearest_upsample2x")
    return out


def masked_select(x: Tensor, mask: np.ndarray) -> Tensor:
    """Gather elements where ``mask`` is true, as a flat tensor."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ValueError(f"mask shape {mask.shape} != tensor shape {x.shape}")
    out_data = x.data[mask]

    def bw():
        g = np.zeros_like(x.data)
        g[mask] = out.grad
        _accumulate(x, g)

    out = _make(out_data, (x,), bw, "masked_select")
    return out


def masked_assign(x: Tensor, mask: np.ndarray, values: Tensor) -> Tensor:
    """Out-of-place write of ``values`` into the masked positions of ``x``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ValueError(f"mask shape {mask.shape} != tensor shape {x.shape}")
    values = _as_tensor(values, x.dtype)
    out_data = x.data.copy()
    out_data[mask] = values.data

    def bw():
        g = out.grad.copy()
        _accumulate(values, g[mask])
        g[mask] = 0
        _accumulate(x, g)

    out = _make(out_data, (x, values), bw, "masked_assign")
    return out


def select_hw(x: Tensor, flat_idx: np.ndarray) -> Tensor:
    """Gather spatial positions from (N,C,H,W) by flat H*W index -> (N,C,S).

    ``flat_idx`` is (S,) to pick the same positions for the whole batch, or
    (N,S) for per-item positions; indices must be unique within an item.
    """
    n, c, h, w = x.shape
    flat_idx = np.asarray(flat_idx, dtype=np.int64)
    x3 = x.data.reshape(n, c, h * w)
    if flat_idx.ndim == 1:
        out_data = x3[:, :, flat_idx]
    else:
        out_data = np.take_along_axis(x3, flat_idx[:, None, :], axis=2)

    def bw():
        g = np.zeros((n, c, h * w), dtype=x.dtype)
        # indices are unique per item, so an overwriting scatter equals add
        if flat_idx.ndim == 1:
            g[:, :, flat_idx] += out.grad
        else:
            np.put_along_axis(g, flat_idx[:, None, :], out.grad, axis=2)
        _accumulate(x, g.reshape(n, c, h, w))

    out = _make(out_data, (x,), bw, "select_hw")
    return out


# -- reductions ---------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    out = _make(out_data, (x,), bw, "sum")
    return out


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(x: Tensor, axis: int) -> Tensor:
    """Fused log-sum-exp along ``axis`` (keepdims); gradient is the softmax."""
    m = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_data = m + np.log(total)

    def bw():
        _accumulate(x, out.grad * (shifted / total))

    out = _make(out_data, (x,), bw, "logsumexp")
    return out


def log_softmax(x: Tensor, axis: int) -> Tensor:
    return sub(x, logsumexp(x, axis))


# -- convolution --------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, padding: int) -> Tensor:
    """Stride-1 cross-correlation with zero padding, spatial size preserved.

    ``x`` is (N,C,H,W), ``weight`` is (O,C,k,k) with k odd and
    padding == (k-1)//2, ``bias`` is (O,) or None.  Computed as one GEMM per
    kernel offset against shifted input views, which keeps memory at one
    input-sized buffer and avoids im2col transposes.
    """
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {c} channels, "
            f"weight {weight.shape} expects {ci}"
        )
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d requires square odd kernels, got {kh}x{kw}")
    if padding != (kh - 1) // 2:
        raise ValueError(f"conv2d padding must be (k-1)//2={(kh - 1) // 2}, got {padding}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({o},)")

    if kh == 1:
        xflat = x.data.reshape(n, c, h * w)
        out_data = np.matmul(weight.data.reshape(o, c), xflat).reshape(n, o, h, w)
        if bias is not None:
            out_data += bias.data[None, :, None, None]

        def bw():
            g3 = out.grad.reshape(n, o, h * w)
            if weight.requires_grad:
                gw = np.matmul(g3, xflat.transpose(0, 2, 1)).sum(axis=0)
                _accumulate(weight, gw.reshape(o, c, 1, 1))
            if bias is not None and bias.requires_grad:
                _accumulate(bias, out.grad.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gx = np.matmul(weight.data.reshape(o, c).T, g3)
                _accumulate(x, gx.reshape(n, c, h, w))

        parents = (x, weight) if bias is None else (x, weight, bias)
        out = _make(out_data, parents, bw, "conv2d")
        return out

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (k*k, O, C) contiguous per-offset weight planes keep matmul on the BLAS path
    wplanes = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1)).reshape(kh * kw, o, c)
    acc = np.zeros((n, o, h * w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i:i + h, j:j + w].reshape(n, c, h * w)
            acc += np.matmul(wplanes[i * kw + j], sl)
    out_data = acc.reshape(n, o, h, w)
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    def bw():
        if bias is not None and bias.requires_grad:
            _accumulate(bias, out.grad.sum(axis=(0, 2, 3)))
        need_w = weight.requires_grad
        need_x = x.requires_grad
        if not (need_w or need_x):
            return
        g3 = out.grad.reshape(n, o, h * w)
        gw = np.empty((o, c, kh, kw), dtype=x.dtype) if need_w else None
        buf = np.zeros_like(xp) if need_x else None
        wplanes_bw = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1)).reshape(kh * kw, o, c)
        for i in range(kh):
            for j in range(kw):
                if need_w:
                    sl = xp[:, :, i:i + h, j:j + w].reshape(n, c, h * w)
                    gw[:, :, i, j] = np.matmul(g3, sl.transpose(0, 2, 1)).sum(axis=0)
                if need_x:
                    back = np.matmul(np.ascontiguousarray(wplanes_bw[i * kw + j].T), g3)
                    buf[:, :, i:i + h, j:j + w] += back.reshape(n, c, h, w)
        if need_w:
            _accumulate(weight, gw)
        if need_x:
            _accumulate(x, np.ascontiguousarray(
                buf[:, :, padding:padding + h, padding:padding + w]))

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(out_data, parents, bw, "conv2d")
    return out


# -- backward pass ------------------------------------------------------------


def backward(root: Tensor, seed_grad=None) -> None:
    """Reverse-mode sweep from a scalar (or explicitly seeded) tensor."""
    if not root.requires_grad:
        raise RuntimeError("backward() on a tensor that does not require grad")
    if seed_grad is None:
        if root.size != 1:
            raise RuntimeError("backward() without a seed gradient requires a scalar")
        root.grad = np.ones_like(root.data)
    else:
        root.grad = np.asarray(seed_grad, dtype=root.dtype).reshape(root.shape).copy()

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn()


def grads_of(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward from ``loss`` and collect gradients for named parameters."""
    for p in params.values():
        p.grad = None
    backward(loss)
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


# -- numeric differentiation (test oracle support) -----------------------------


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h_scale: float = 1e-6) -> np.ndarray:
    """Central finite differences with per-element step h = h_scale*(1+|x|)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        h = h_scale * (1.0 + abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
