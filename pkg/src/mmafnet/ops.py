"""Differentiable layer vocabulary: convolution, pooling, normalization,
activations, bilinear upsampling, softmax, and masked cross-entropy.

All functions operate on rank-4 :class:`~mmafnet.autodiff.Tensor` values and
record backward rules on the active tape. Convolution contractions go through
``np.einsum`` with optimization disabled so results do not depend on BLAS
threading and are reproducible run to run.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, active_tape
from .errors import AllVoidImage, ContractError

# ---------------------------------------------------------------------------
# FLOP accounting: ops add into the innermost active tally.
# ---------------------------------------------------------------------------

_TALLY_STACK: list["FlopTally"] = []


class FlopTally:
    """Context that accumulates per-op-kind operation counts during forwards.

    Convolution and linear count multiply-accumulates; every other op counts
    one operation per output element.
    """

    def __init__(self):
        self.by_op: dict[str, int] = {}
        self.total: int = 0

    def add(self, op_kind: str, count: int) -> None:
        self.by_op[op_kind] = self.by_op.get(op_kind, 0) + count
        self.total += count

    def __enter__(self) -> "FlopTally":
        _TALLY_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TALLY_STACK.pop()
        assert popped is self


def _tally(op_kind: str, count: int) -> None:
    if _TALLY_STACK:
        _TALLY_STACK[-1].add(op_kind, int(count))


def _emit(op_kind: str, inputs, data: np.ndarray, backward) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        tape.record(op_kind, inputs, out, backward)
    return out


def _out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    ``weight`` is (out_c, in_c, kh, kw); ``bias`` is (1, out_c, 1, 1).
    """
    n, ci, h, w = x.shape
    co, ciw, kh, kw = weight.shape
    if ci != ciw:
        raise ContractError(f"conv2d: input has {ci} channels, weight expects {ciw}")
    s, p = int(stride), int(padding)
    if s < 1 or p < 0:
        raise ContractError(f"conv2d: invalid stride {s} / padding {p}")
    oh, ow = _out_size(h, kh, s, p), _out_size(w, kw, s, p)
    if oh < 1 or ow < 1:
        raise ContractError(f"conv2d: output size {oh}x{ow} must be >= 1")
    if bias is not None and bias.shape != (1, co, 1, 1):
        raise ContractError(f"conv2d: bias must be (1,{co},1,1), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wd = weight.data
    out = np.zeros((n, co, oh, ow), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u:u + s * (oh - 1) + 1:s, v:v + s * (ow - 1) + 1:s]
            out += np.einsum("nchw,oc->nohw", patch, wd[:, :, u, v], optimize=False)
    if bias is not None:
        out = out + bias.data
    _tally("conv2d", n * co * oh * ow * ci * kh * kw)

    def backward(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(wd)
        for u in range(kh):
            for v in range(kw):
                sl = (slice(None), slice(None),
                      slice(u, u + s * (oh - 1) + 1, s),
                      slice(v, v + s * (ow - 1) + 1, s))
                dw[:, :, u, v] = np.einsum("nohw,nchw->oc", g, xp[sl], optimize=False)
                dxp[sl] += np.einsum("nohw,oc->nchw", g, wd[:, :, u, v], optimize=False)
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        if bias is None:
            return (dx, dw)
        db = g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1)
        return (dx, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", inputs, out, backward)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def pool2d(x: Tensor, kind: str, kernel: int, stride: int | None = None,
           padding: int = 0) -> Tensor:
    """Square max or average pooling.

    Max pooling treats padded cells as -inf; average pooling excludes them
    from the divisor. On ties the earliest window offset (row-major) takes
    the gradient.
    """
    if kind not in ("max", "avg"):
        raise ContractError(f"pool2d: kind must be 'max' or 'avg', got {kind!r}")
    n, c, h, w = x.shape
    k = int(kernel)
    s = k if stride is None else int(stride)
    p = int(padding)
    if k < 1 or s < 1 or p < 0 or (p > 0 and 2 * p >= k):
        raise ContractError(f"pool2d: invalid geometry kernel={k} stride={s} padding={p}")
    oh, ow = _out_size(h, k, s, p), _out_size(w, k, s, p)
    if oh < 1 or ow < 1:
        raise ContractError(f"pool2d: output size {oh}x{ow} must be >= 1")

    offsets = [(u, v) for u in range(k) for v in range(k)]
    slices = [(slice(None), slice(None),
               slice(u, u + s * (oh - 1) + 1, s),
               slice(v, v + s * (ow - 1) + 1, s)) for u, v in offsets]
    _tally("pool2d", n * c * oh * ow)

    if kind == "max":
        fill = -np.inf
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=fill) if p else x.data
        stack = np.stack([xp[sl] for sl in slices])
        arg = stack.argmax(axis=0)
        out = stack.max(axis=0)

        def backward(g):
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for t, sl in enumerate(slices):
                dxp[sl] += g * (arg == t)
            return (dxp[:, :, p:p + h, p:p + w] if p else dxp,)

        return _emit("pool2d_max", (x,), out, backward)

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ones = np.pad(np.ones((1, 1, h, w), dtype=x.data.dtype),
                  ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ones((1, 1, h, w), dtype=x.data.dtype)
    total = np.zeros((n, c, oh, ow), dtype=x.data.dtype)
    count = np.zeros((1, 1, oh, ow), dtype=x.data.dtype)
    for sl in slices:
        total += xp[sl]
        count += ones[sl]
    out = total / count

    def backward(g):
        gshare = g / count
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for sl in slices:
            dxp[sl] += gshare
        return (dxp[:, :, p:p + h, p:p + w] if p else dxp,)

    return _emit("pool2d_avg", (x,), out, backward)


def global_pool(x: Tensor, kind: str) -> Tensor:
    """Reduce each channel over all spatial positions to (n, c, 1, 1)."""
    if kind not in ("max", "avg"):
        raise ContractError(f"global_pool: kind must be 'max' or 'avg', got {kind!r}")
    n, c, h, w = x.shape
    _tally("global_pool", n * c)
    if kind == "avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)
        inv = 1.0 / (h * w)
        return _emit("global_pool_avg", (x,), out,
                     lambda g: (np.broadcast_to(g * inv, x.shape).copy(),))
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(n, c, 1, 1)

    def backward(g):
        dflat = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(dflat, idx[:, :, None], g.reshape(n, c, 1), axis=2)
        return (dflat.reshape(x.shape),)

    return _emit("global_pool_max", (x,), out, backward)


def channel_pool(x: Tensor, kind: str) -> Tensor:
    """Reduce across channels at each position to (n, 1, h, w)."""
    if kind not in ("max", "avg"):
        raise ContractError(f"channel_pool: kind must be 'max' or 'avg', got {kind!r}")
    n, c, h, w = x.shape
    _tally("channel_pool", n * h * w)
    if kind == "avg":
        out = x.data.mean(axis=1, keepdims=True)
        inv = 1.0 / c
        return _emit("channel_pool_avg", (x,), out,
                     lambda g: (np.broadcast_to(g * inv, x.shape).copy(),))
    arg = x.data.argmax(axis=1)
    out = np.take_along_axis(x.data, arg[:, None], axis=1)

    def backward(g):
        dx = np.zeros_like(x.data, dtype=g.dtype)
        np.put_along_axis(dx, arg[:, None], g, axis=1)
        return (dx,)

    return _emit("channel_pool_max", (x,), out, backward)


# ---------------------------------------------------------------------------
# Linear (applied to (n, c, 1, 1) vectors)
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map per batch element; ``weight`` is (out, in, 1, 1)."""
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise ContractError(f"linear: expects (n,c,1,1) input, got {x.shape}")
    co, ci = weight.shape[0], weight.shape[1]
    if weight.shape[2:] != (1, 1):
        raise ContractError(f"linear: weight must be (out,in,1,1), got {weight.shape}")
    if ci != c:
        raise ContractError(f"linear: input has {c} features, weight expects {ci}")
    if bias is not None and bias.shape != (1, co, 1, 1):
        raise ContractError(f"linear: bias must be (1,{co},1,1), got {bias.shape}")
    xv = x.data[:, :, 0, 0]
    wv = weight.data[:, :, 0, 0]
    out = np.einsum("nc,oc->no", xv, wv, optimize=False).reshape(n, co, 1, 1)
    if bias is not None:
        out = out + bias.data
    _tally("linear", n * co * ci)

    def backward(g):
        gv = g[:, :, 0, 0]
        dx = np.einsum("no,oc->nc", gv, wv, optimize=False).reshape(x.shape)
        dw = np.einsum("no,nc->oc", gv, xv, optimize=False).reshape(weight.shape)
        if bias is None:
            return (dx, dw)
        return (dx, dw, gv.sum(axis=0).reshape(1, co, 1, 1))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", inputs, out, backward)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                momentum: float = 0.1, eps: float = 1e-5,
                training: bool = True, update_running: bool = True) -> Tensor:
    """Per-channel normalization with affine scale and shift.

    Train mode normalizes by batch statistics (population variance) and
    updates the running buffers in place; eval mode reads only the buffers.
    """
    n, c, h, w = x.shape
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ContractError(f"batchnorm2d: affine params must be (1,{c},1,1)")
    _tally("batchnorm2d", x.data.size)

    if training:
        if n * h * w < 2:
            raise ContractError("batchnorm2d: train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mu = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    if training:
        m = n * h * w

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
            dxhat = g * gamma.data
            # standard batch-norm backward through the batch statistics
            dx = (inv_std / m) * (m * dxhat
                                  - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                                  - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            return (dx, dgamma, dbeta)
    else:
        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
            return (g * (gamma.data * inv_std), dgamma, dbeta)

    return _emit("batchnorm2d", (x, gamma, beta), out, backward)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _tally("relu", x.data.size)
    return _emit("relu", (x,), np.where(mask, x.data, 0.0).astype(x.data.dtype, copy=False),
                 lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd >= 0
    z = np.exp(np.where(pos, -xd, xd))  # always exp of a non-positive number
    s = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype, copy=False)
    _tally("sigmoid", xd.size)
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"activation: kind must be 'relu' or 'sigmoid', got {kind!r}")


# ---------------------------------------------------------------------------
# Bilinear upsampling (half-pixel centers)
# ---------------------------------------------------------------------------

def _bilinear_axis(src: int, dst: int, dtype):
    """Source indices and blend weights for one axis, half-pixel convention."""
    d = np.arange(dst, dtype=np.float64)
    pos = np.maximum((d + 0.5) * (src / dst) - 0.5, 0.0)
    i0 = np.minimum(np.floor(pos).astype(np.int64), src - 1)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = (pos - i0).astype(dtype)
    return i0, i1, frac


def upsample_bilinear(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Resize spatially to (target_h, target_w) with bilinear interpolation."""
    n, c, h, w = x.shape
    th, tw = int(target_h), int(target_w)
    if th < h or tw < w:
        raise ContractError(f"upsample_bilinear: target {th}x{tw} smaller than source {h}x{w}")
    dtype = x.data.dtype
    y0, y1, fy = _bilinear_axis(h, th, dtype)
    x0, x1, fx = _bilinear_axis(w, tw, dtype)
    fy = fy.reshape(1, 1, th, 1)
    fx = fx.reshape(1, 1, 1, tw)

    rows = x.data[:, :, y0, :] * (1.0 - fy) + x.data[:, :, y1, :] * fy
    out = rows[:, :, :, x0] * (1.0 - fx) + rows[:, :, :, x1] * fx
    _tally("upsample_bilinear", n * c * th * tw)

    def backward(g):
        drows = np.zeros((n, c, th, w), dtype=g.dtype)
        np.add.at(drows, (slice(None), slice(None), slice(None), x0), g * (1.0 - fx))
        np.add.at(drows, (slice(None), slice(None), slice(None), x1), g * fx)
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), slice(None), y0, slice(None)), drows * (1.0 - fy))
        np.add.at(dx, (slice(None), slice(None), y1, slice(None)), drows * fy)
        return (dx,)

    return _emit("upsample_bilinear", (x,), out, backward)


# ---------------------------------------------------------------------------
# Softmax and masked cross-entropy
# ---------------------------------------------------------------------------

def _softmax_parts(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel channel max, shifted exponentials, and their channel sum.

    Channel reductions accumulate slice by slice in index order, so each
    pixel's result is bitwise identical to the same accumulation done on its
    extracted channel vector.
    """
    c = logits.shape[1]
    m = logits[:, 0:1].copy()
    for k in range(1, c):
        np.maximum(m, logits[:, k:k + 1], out=m)
    e = np.exp(logits - m)
    s = e[:, 0:1].copy()
    for k in range(1, c):
        s += e[:, k:k + 1]
    return m, e, s


def _softmax_data(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted per-pixel softmax over the channel axis."""
    _, e, s = _softmax_parts(logits)
    return e / s


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel class distribution over the channel axis."""
    p = _softmax_data(logits.data)
    _tally("softmax_channels", logits.data.size)

    def backward(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - inner),)

    return _emit("softmax_channels", (logits,), p, backward)


def cross_entropy_masked(logits: Tensor, labels: np.ndarray, void_label: int = 255) -> Tensor:
    """Mean negative log-probability of the true class over non-void pixels.

    ``labels`` is an integer (n, h, w) array; ``void_label`` marks pixels that
    contribute neither loss nor gradient. Each pixel's term is evaluated as
    log-sum-exp minus the chosen logit (both max-shifted), which stays finite
    even when the chosen class's probability underflows to zero.
    """
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError(f"cross_entropy_masked: labels must be integer, got {labels.dtype}")
    if labels.shape != (n, h, w):
        raise ContractError(f"cross_entropy_masked: labels must be {(n, h, w)}, got {labels.shape}")
    valid = labels != void_label
    if not valid.any():
        raise AllVoidImage("cross_entropy_masked: every pixel is void")
    picked_labels = labels[valid]
    if picked_labels.min() < 0 or picked_labels.max() >= c:
        raise ContractError(f"cross_entropy_masked: labels must be in [0,{c}) or {void_label}")

    mx, e, s = _softmax_parts(logits.data)
    p = e / s
    ns, ys, xs = np.nonzero(valid)  # row-major pixel order
    cs = labels[ns, ys, xs]
    m = cs.size
    per_pixel = np.log(s[ns, 0, ys, xs]) - (logits.data[ns, cs, ys, xs] - mx[ns, 0, ys, xs])
    loss = np.full((1, 1, 1, 1), np.mean(per_pixel), dtype=logits.data.dtype)
    _tally("cross_entropy_masked", logits.data.size)

    def backward(g):
        d = p * valid[:, None]
        d[ns, cs, ys, xs] -= 1.0
        d *= g.item() / m
        return (d.astype(logits.data.dtype, copy=False),)

    return _emit("cross_entropy_masked", (logits,), loss, backward)
