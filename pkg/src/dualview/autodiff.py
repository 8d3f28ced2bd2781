"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy float array (32- or 64-bit, fixed at
construction). Operations executed while a ``Tape`` is active record a
backward closure; ``backward(tape, loss)`` replays the records in reverse
to fill ``grad`` buffers. Gradients accumulate additively, so callers must
zero parameter grads between optimization steps.

Only the primitives the two-view architecture needs are provided:
convolution (im2col + matmul), linear maps, sigmoid/ReLU/softmax, global
average pooling, per-channel instance normalization, elementwise
arithmetic with broadcasting, max-with-argmax, average pooling, bilinear
upsampling, and the usual reshape/transpose/concat/slice plumbing.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "AutodiffError", "NonFiniteError",
    "backward", "primitive_forward", "no_tape",
    "add", "sub", "mul", "div", "neg", "matmul", "linear", "conv2d",
    "relu", "sigmoid", "exp", "log", "sqrt", "clip", "softmax",
    "tsum", "tmean", "max_along", "gap2d", "instance_norm", "avg_pool2d",
    "upsample_bilinear", "reshape", "transpose", "concat", "narrow",
    "take_per_row", "gather_rows", "permute_rows", "l2_normalize", "logsumexp",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Input dimensions incompatible with an operation."""


class AutodiffError(RuntimeError):
    """Tape misuse: detached loss, non-scalar loss, missing tape, ..."""


class NonFiniteError(FloatingPointError):
    """A tensor or op produced NaN/Inf."""


class Tensor:
    """N-dimensional float array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "_id")

    _next_id = 0

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor construction with NaN/Inf values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._id = Tensor._next_id
        Tensor._next_id += 1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Records are appended in execution order, which is a topological order
    by construction; ``backward`` visits them exactly once, reversed.
    Usable as a context manager to make it the active tape.
    """

    def __init__(self):
        self.records = []          # (op_name, inputs, output, backward_fn)
        self._output_ids = set()

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _pop_tape(self)
        return False

    def record(self, op_name, inputs, output, backward_fn):
        self.records.append((op_name, inputs, output, backward_fn))
        self._output_ids.add(output._id)

    def produced(self, tensor: Tensor) -> bool:
        return tensor._id in self._output_ids

    def __len__(self):
        return len(self.records)


_TAPE_STACK: list = []


def _push_tape(tape):
    _TAPE_STACK.append(tape)


def _pop_tape(tape):
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise AutodiffError("tape stack corrupted: exiting a non-active tape")
    _TAPE_STACK.pop()


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_tape:
    """Context manager disabling recording (fast inference path)."""

    def __enter__(self):
        _push_tape(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        if not _TAPE_STACK or _TAPE_STACK[-1] is not None:
            raise AutodiffError("tape stack corrupted: unbalanced no_tape")
        _TAPE_STACK.pop()
        return False


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from loss.

    Records whose output never received a gradient are dead branches and
    are skipped (their contribution is identically zero).
    """
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise AutodiffError("loss is detached from this tape")
    loss.grad = np.ones_like(loss.data)
    for op_name, inputs, output, backward_fn in reversed(tape.records):
        if output.grad is None:
            continue
        backward_fn(output.grad)


# ---------------------------------------------------------------------------
# op plumbing


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same_dtype(op_name, *tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op_name}: mixed precisions {sorted(str(d) for d in dtypes)}; "
                         "precision is fixed per tensor at construction")


def _check_finite(op_name, out_data):
    # min+max propagate NaN/Inf without materializing a bool temp
    if out_data.size and not (np.isfinite(out_data.min())
                              and np.isfinite(out_data.max())):
        raise NonFiniteError(f"op '{op_name}' produced non-finite values")


def _make_output(op_name, inputs, out_data, backward_fn):
    """Wrap op output; record on the active tape when gradients are needed.

    Output grad buffers are allocated lazily on first accumulation, so
    branches that never feed the loss cost nothing in backward.
    """
    _check_finite(op_name, out_data)
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = track
    out.grad = None
    out._id = Tensor._next_id
    Tensor._next_id += 1
    if track:
        tape.record(op_name, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias or broadcast-view a downstream grad buffer
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _accum_owned(t: Tensor, g: np.ndarray):
    """Like _accum for closures that freshly allocated ``g`` (no aliasing)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if g.dtype == t.data.dtype else g.astype(t.data.dtype)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype("add", a, b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make_output("add", (a, b), out_data, bwd)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype("sub", a, b)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make_output("sub", (a, b), out_data, bwd)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype("mul", a, b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum_owned(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum_owned(b, _unbroadcast(g * a.data, b.shape))

    return _make_output("mul", (a, b), out_data, bwd)


def div(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _check_same_dtype("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accum_owned(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum_owned(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make_output("div", (a, b), out_data, bwd)


def neg(a):
    def bwd(g):
        _accum(a, -g)

    return _make_output("neg", (a,), -a.data, bwd)


# ---------------------------------------------------------------------------
# matmul / linear / conv


def matmul(a: Tensor, b: Tensor):
    """Matrix product; leading batch dims broadcast like np.matmul."""
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.shape))

    return _make_output("matmul", (a, b), out_data, bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None):
    """Affine map on the last axis: ``x @ w.T + b`` with w of shape (out, in)."""
    _check_same_dtype("linear", x, w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with w {w.shape}")
    out_data = np.matmul(x.data, w.data.T)
    if b is not None:
        _check_same_dtype("linear", x, b)
        out_data = out_data + b.data

    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        if x.requires_grad:
            _accum(x, np.matmul(g, w.data))
        g2 = g.reshape(-1, g.shape[-1])
        if w.requires_grad:
            x2 = x.data.reshape(-1, x.shape[-1])
            _accum(w, np.matmul(g2.T, x2))
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _make_output("linear", inputs, out_data, bwd)


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


def _im2col(xp: np.ndarray, kh, kw, stride, oh, ow):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0):
    """2-D convolution, NCHW layout, via explicit im2col + matmul.

    w has shape (out_c, in_c, kh, kw); stride/padding are symmetric ints.
    """
    _check_same_dtype("conv2d", x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and w, got {x.shape}, {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin} vs kernel {cin_w}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}")

    xp = _pad2d(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, oh, ow)           # (B, C*kh*kw, OH*OW)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out_data = np.matmul(wmat, cols).reshape(bsz, cout, oh, ow)
    if b is not None:
        _check_same_dtype("conv2d", x, b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
        out_data = out_data + b.data.reshape(1, cout, 1, 1)

    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gmat = np.ascontiguousarray(g.reshape(bsz, cout, oh * ow))
        if w.requires_grad:
            # batched (B,O,P)@(B,P,CKK) keeps BLAS on strided views, no big copy
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum_owned(w, gw.reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum_owned(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            if stride == 1 and kh - 1 - padding >= 0:
                # dx = correlation of g with the channel-swapped flipped
                # kernel; avoids the scatter and is cheap for few out_c
                gp = _pad2d(g, kh - 1 - padding)
                gcols = _im2col(gp, kh, kw, 1, h, wd)
                wswap = w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
                wswap = np.ascontiguousarray(wswap).reshape(cin, cout * kh * kw)
                gx = np.matmul(wswap, gcols).reshape(bsz, cin, h, wd)
                _accum_owned(x, gx)
            else:
                gcols = np.matmul(wmat.T, gmat)          # (B, C*kh*kw, OH*OW)
                gcols = gcols.reshape(bsz, cin, kh, kw, oh, ow)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * oh:stride,
                            j:j + stride * ow:stride] += gcols[:, :, i, j]
                if padding:
                    gxp = np.ascontiguousarray(
                        gxp[:, :, padding:padding + h, padding:padding + wd])
                _accum_owned(x, gxp)

    return _make_output("conv2d", inputs, out_data, bwd)


# ---------------------------------------------------------------------------
# activations and pointwise functions


def relu(x: Tensor):
    out_data = np.maximum(x.data, 0.0)

    def bwd(g):
        _accum_owned(x, g * (x.data > 0.0))    # subgradient 0 at exactly 0

    return _make_output("relu", (x,), out_data, bwd)


def sigmoid(x: Tensor):
    d = x.data
    t = np.exp(-np.abs(d))          # stable: never exponentiates positives
    out_data = np.where(d >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    def bwd(g):
        _accum_owned(x, g * out_data * (1.0 - out_data))

    return _make_output("sigmoid", (x,), out_data, bwd)


def exp(x: Tensor):
    out_data = np.exp(x.data)

    def bwd(g):
        _accum_owned(x, g * out_data)

    return _make_output("exp", (x,), out_data, bwd)


def log(x: Tensor):
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(x.data)

    def bwd(g):
        _accum_owned(x, g / x.data)

    return _make_output("log", (x,), out_data, bwd)


def sqrt(x: Tensor):
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(x.data)

    def bwd(g):
        _accum_owned(x, g * 0.5 / out_data)

    return _make_output("sqrt", (x,), out_data, bwd)


def clip(x: Tensor, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient is zero outside the open interval."""
    out_data = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def bwd(g):
        _accum_owned(x, g * inside)

    return _make_output("clip", (x,), out_data, bwd)


def softmax(x: Tensor, axis: int = -1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum_owned(x, out_data * (g - dot))

    return _make_output("softmax", (x,), out_data, bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims=False):
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None and not keepdims:
            _accum(x, np.full(x.shape, g, dtype=x.dtype))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(gg, x.shape))

    return _make_output("sum", (x,), np.asarray(out_data), bwd)


def tmean(x: Tensor, axis=None, keepdims=False):
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.shape[ax]

    def bwd(g):
        if axis is None and not keepdims:
            _accum(x, np.full(x.shape, g / count, dtype=x.dtype))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum_owned(x, np.broadcast_to(gg, x.shape) / count)

    return _make_output("mean", (x,), np.asarray(out_data), bwd)


def max_along(x: Tensor, axis: int):
    """Max over one axis. Returns (values, argmax); ties take the lowest index."""
    idx = np.argmax(x.data, axis=axis)
    out_data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis=axis)
        _accum_owned(x, gx)

    out = _make_output("max", (x,), out_data, bwd)
    return out, idx


# ---------------------------------------------------------------------------
# spatial ops (NCHW)


def gap2d(x: Tensor):
    """Spatial global average pooling: (B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise ShapeError(f"gap2d expects 4-d input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    out_data = x.data.mean(axis=(2, 3))

    def bwd(g):
        _accum_owned(x, np.broadcast_to(g[:, :, None, None], x.shape) / (h * w))

    return _make_output("gap2d", (x,), out_data, bwd)


def instance_norm(x: Tensor, eps: float = 1e-6):
    """Per-sample per-channel spatial standardization, eps inside the sqrt."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects 4-d input, got {x.shape}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def bwd(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gym = (g * y).mean(axis=(2, 3), keepdims=True)
        _accum_owned(x, inv * (g - gm - y * gym))

    return _make_output("instance_norm", (x,), y, bwd)


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None):
    """Non-overlapping-capable average pooling with square kernel."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects 4-d input, got {x.shape}")
    stride = kernel if stride is None else stride
    b, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"avg_pool2d kernel {kernel} too large for input {x.shape}")
    acc = np.zeros((b, c, oh, ow), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            acc += x.data[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    out_data = acc / (kernel * kernel)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gk = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gk
        _accum_owned(x, gx)

    return _make_output("avg_pool2d", (x,), out_data, bwd)


def _bilinear_weights(out_size: int, in_size: int, dtype):
    """Half-pixel-centered source indices/weights for one axis."""
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, in_size - 1)
    i1c = np.clip(i0 + 1, 0, in_size - 1)
    return i0c, i1c, frac.astype(dtype)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int):
    """Bilinear resize of (B, C, H, W) maps to (out_h, out_w)."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        # half-pixel-centered sampling at equal size hits the grid exactly
        def bwd_id(g):
            _accum(x, g)

        return _make_output("upsample_bilinear", (x,), x.data.copy(), bwd_id)
    r0, r1, rf = _bilinear_weights(out_h, h, x.dtype)
    c0, c1, cf = _bilinear_weights(out_w, w, x.dtype)
    rf = rf[:, None]
    cf = cf[None, :]
    d = x.data
    out_data = ((1 - rf) * (1 - cf) * d[:, :, r0[:, None], c0[None, :]]
                + (1 - rf) * cf * d[:, :, r0[:, None], c1[None, :]]
                + rf * (1 - cf) * d[:, :, r1[:, None], c0[None, :]]
                + rf * cf * d[:, :, r1[:, None], c1[None, :]])

    def bwd(g):
        gx = np.zeros_like(x.data)
        rows = [(r0, 1 - rf), (r1, rf)]
        colsw = [(c0, 1 - cf), (c1, cf)]
        for ri, rw in rows:
            for ci, cw in colsw:
                np.add.at(gx, (slice(None), slice(None), ri[:, None], ci[None, :]), g * rw * cw)
        _accum(x, gx)

    return _make_output("upsample_bilinear", (x,), np.ascontiguousarray(out_data), bwd)


# ---------------------------------------------------------------------------
# structural ops


def reshape(x: Tensor, shape):
    out_data = x.data.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(x.shape))

    return _make_output("reshape", (x,), out_data, bwd)


def transpose(x: Tensor, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g):
        _accum(x, g.transpose(inv))

    return _make_output("transpose", (x,), out_data, bwd)


def concat(tensors, axis: int = 0):
    tensors = tuple(tensors)
    _check_same_dtype("concat", *tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        start = 0
        for t, sz in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + sz)
            _accum(t, g[tuple(sl)])
            start += sz

    return _make_output("concat", tensors, out_data, bwd)


def narrow(x: Tensor, axis: int, start: int, length: int):
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = np.ascontiguousarray(x.data[sl])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        _accum_owned(x, gx)

    return _make_output("narrow", (x,), out_data, bwd)


def take_per_row(x: Tensor, indices):
    """Select one slice per batch row: (B, N, ...) with idx (B,) -> (B, ...)."""
    idx = np.asarray(indices)
    if idx.shape != (x.shape[0],):
        raise ShapeError(f"take_per_row indices {idx.shape} != ({x.shape[0]},)")
    rows = np.arange(x.shape[0])
    out_data = np.ascontiguousarray(x.data[rows, idx])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        _accum_owned(x, gx)

    return _make_output("take_per_row", (x,), out_data, bwd)


def gather_rows(x: Tensor, rows):
    """Select a subset of batch rows (possibly repeated) by index list."""
    rows = np.asarray(rows, dtype=np.int64)
    out_data = np.ascontiguousarray(x.data[rows])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, rows, g)
        _accum_owned(x, gx)

    return _make_output("gather_rows", (x,), out_data, bwd)


def permute_rows(x: Tensor, perm):
    """Reorder the batch axis by a permutation; backward applies the inverse."""
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(x.shape[0])):
        raise ShapeError("permute_rows: not a permutation of the batch axis")
    out_data = np.ascontiguousarray(x.data[perm])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[perm] = g
        _accum_owned(x, gx)

    return _make_output("permute_rows", (x,), out_data, bwd)


# ---------------------------------------------------------------------------
# composites used by several heads


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12):
    """x / ||x||_2 along ``axis`` (eps keeps the zero vector finite)."""
    sq = tsum(mul(x, x), axis=axis, keepdims=True)
    norm = sqrt(add(sq, float(eps)))
    return div(x, norm)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False):
    """Numerically stable log-sum-exp along one axis (shift is constant)."""
    shift = x.data.max(axis=axis, keepdims=True)
    shifted = sub(x, Tensor(shift))
    s = tsum(exp(shifted), axis=axis, keepdims=True)
    out = add(log(s), Tensor(shift))
    if not keepdims:
        out = reshape(out, tuple(np.delete(np.array(out.shape), axis)))
    return out


# ---------------------------------------------------------------------------
# generic dispatch surface


_PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "matmul": matmul, "linear": linear, "conv2d": conv2d,
    "relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log, "sqrt": sqrt,
    "clip": clip, "softmax": softmax, "sum": tsum, "mean": tmean,
    "max": max_along, "gap2d": gap2d, "instance_norm": instance_norm,
    "avg_pool2d": avg_pool2d, "upsample_bilinear": upsample_bilinear,
    "reshape": reshape, "transpose": transpose, "concat": concat,
    "narrow": narrow, "take_per_row": take_per_row, "gather_rows": gather_rows,
    "permute_rows": permute_rows,
}


def primitive_forward(op: str, inputs, attrs: dict | None = None):
    """Apply a primitive by id. Unknown ids raise; shape errors propagate."""
    if op not in _PRIMITIVES:
        raise KeyError(f"unknown primitive op id: {op!r}")
    attrs = attrs or {}
    if op == "concat":
        return _PRIMITIVES[op](inputs, **attrs)
    return _PRIMITIVES[op](*inputs, **attrs)
