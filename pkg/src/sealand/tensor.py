"""Rank-4 tensor ops with reverse-mode autodiff on an explicit tape.

Data lives in numpy arrays (float32 by default, float64 when a gradient
check replays the graph in higher precision); the matrix work inside the
convolutions is delegated to BLAS via im2col + matmul. Only the operations
the segmentation network needs are implemented - no broadcasting, no
general-rank support.
"""

from __future__ import annotations

import numpy as np

# Toggled on by tests / gradient checks: verify every op output is finite.
FINITE_CHECKS = False

# Upper bound (in float elements) for one im2col column buffer. Convolutions
# over larger inputs are processed in output-row chunks so memory stays flat
# even for full-resolution inference tiles.
_COL_BUDGET = 24_000_000



class Tensor:
    """Dense float array with an optional gradient buffer.

    Feature maps are (batch, channels, height, width); convolution weights
    are (out_c, in_c, kh, kw); biases are (out_c,); losses are 0-d.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape", "producer")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = None
        self.producer = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flags})"


class _Node:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of operations, replayed in reverse by backward().

    Used as a context manager; ops executed inside the block are recorded
    whenever one of their inputs requires a gradient. Appending preserves
    topological order because every input tensor already exists when its
    consumer runs.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


def _record(op, inputs, output, backward):
    """Attach output to the active tape if any input participates in grad."""
    tape = _ACTIVE_TAPE
    if tape is None or tape.consumed:
        return
    if not any(t.requires_grad for t in inputs):
        return
    output.requires_grad = True
    output.tape = tape
    node = _Node(op, inputs, output, backward)
    output.producer = node
    tape.nodes.append(node)


def _accumulate(tensor: Tensor, grad: np.ndarray):
    # Always own the stored buffer: callers may pass views of, or aliases to,
    # arrays that other deposits will mutate in place.
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad)
    else:
        tensor.grad += grad


def _check_finite(op: str, arr: np.ndarray):
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")


def backward(loss: Tensor):
    """Run the reverse sweep from a scalar loss down to every leaf.

    Leaf gradients accumulate additively, so a tensor feeding several ops
    receives the sum of all path contributions.
    """
    if loss.tape is None:
        raise ValueError("backward on a tensor detached from any tape")
    tape = loss.tape
    if tape.consumed:
        raise RuntimeError("this tape was already swept; build a new one")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        node.backward(g)
    tape.consumed = True
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# convolution


def _conv_extent(extent: int, k: int, stride: int, pad: int, axis: str) -> int:
    span = extent + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"conv2d {axis} extent {extent} with kernel {k}, stride {stride}, "
            f"padding {pad} does not yield an integer output extent"
        )
    return span // stride + 1


def _pad_input(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _row_chunks(n, k, oh, ow):
    """Split output rows so one column buffer holds <= _COL_BUDGET floats."""
    per_row = max(1, n * k * ow)
    rows = max(1, min(oh, _COL_BUDGET // per_row))
    for lo in range(0, oh, rows):
        yield lo, min(lo + rows, oh)


def _im2col(xp, kh, kw, stride, lo, hi, ow):
    """Columns for output rows [lo, hi): (n, c*kh*kw, rows*ow)."""
    n, c, _, wp = xp.shape
    rows = hi - lo
    cols = np.empty((n, c, kh, kw, rows, ow), dtype=xp.dtype)
    for i in range(kh):
        r0 = lo * stride + i
        r1 = r0 + (rows - 1) * stride + 1
        for j in range(kw):
            c1 = j + (ow - 1) * stride + 1
            cols[:, :, i, j] = xp[:, :, r0:r1:stride, j:c1:stride]
    return cols.reshape(n, c * kh * kw, rows * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    x is (n, c, h, w), weight (o, c, kh, kw), bias (o,). Gradients flow to
    x, weight, and bias.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be rank 4, got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d weight must be rank 4, got shape {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.shape} has {c} channels, "
            f"weight shape {weight.shape} expects {cw}"
        )
    if bias.data.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {o} output channels")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    oh = _conv_extent(h, kh, stride, padding, "height")
    ow = _conv_extent(w, kw, stride, padding, "width")

    xp = _pad_input(x.data, padding)
    wmat = weight.data.reshape(o, -1)
    out = np.empty((n, o, oh, ow), dtype=x.dtype)
    for lo, hi in _row_chunks(n, c * kh * kw, oh, ow):
        cols = _im2col(xp, kh, kw, stride, lo, hi, ow)
        out[:, :, lo:hi] = np.matmul(wmat, cols).reshape(n, o, hi - lo, ow)
    out += bias.data.reshape(1, o, 1, 1)
    _check_finite("conv2d", out)

    result = Tensor(out)

    def _backward(g):
        gmat = g.reshape(n, o, oh * ow)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        need_gx = x.requires_grad
        need_gw = weight.requires_grad
        xpb = _pad_input(x.data, padding)
        gw = np.zeros((o, c * kh * kw), dtype=x.dtype) if need_gw else None
        gxp = np.zeros_like(xpb) if need_gx else None
        for lo, hi in _row_chunks(n, c * kh * kw, oh, ow):
            cols = _im2col(xpb, kh, kw, stride, lo, hi, ow)
            gchunk = gmat[:, :, lo * ow : hi * ow]
            if need_gw:
                # (n,o,p) @ (n,p,k) summed over the batch -> (o,k)
                gw += np.matmul(gchunk, cols.transpose(0, 2, 1)).sum(axis=0)
            if need_gx:
                gcols = np.matmul(wmat.T, gchunk)
                g6 = gcols.reshape(n, c, kh, kw, hi - lo, ow)
                for i in range(kh):
                    r0 = lo * stride + i
                    r1 = r0 + (hi - lo - 1) * stride + 1
                    for j in range(kw):
                        c1 = j + (ow - 1) * stride + 1
                        gxp[:, :, r0:r1:stride, j:c1:stride] += g6[:, :, i, j]
        if need_gw:
            _accumulate(weight, gw.reshape(o, c, kh, kw))
        if need_gx:
            gx = gxp if padding == 0 else gxp[:, :, padding : padding + h, padding : padding + w]
            _accumulate(x, gx)

    _record("conv2d", (x, weight, bias), result, _backward)
    return result


# ---------------------------------------------------------------------------
# pointwise and structural ops


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); gradient is masked where the input is <= 0."""
    out = np.maximum(x.data, 0)
    result = Tensor(out)

    def _backward(g):
        _accumulate(x, g * (x.data > 0))

    _record("relu", (x,), result, _backward)
    return result


def maxpool2x2(x: Tensor):
    """2x2 max pooling with stride 2.

    Returns (pooled, argmax) where argmax holds, per output pixel, the flat
    index of the winning input pixel inside its (h*w) plane. Ties go to the
    first element in row-major window order; the backward pass routes the
    gradient only to recorded winners.
    """
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2x2 input must be rank 4, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    oh, ow = h // 2, w // 2
    windows = (
        x.data.reshape(n, c, oh, 2, ow, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, 4)
    )
    idx4 = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx4[..., None], axis=-1)[..., 0]

    rows = (np.arange(oh)[:, None] * 2) + idx4 // 2
    cols = (np.arange(ow)[None, :] * 2) + idx4 % 2
    argmax = (rows * w + cols).astype(np.int64)

    result = Tensor(out)

    def _backward(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gx, argmax.reshape(n, c, -1), g.reshape(n, c, -1), axis=2)
        _accumulate(x, gx.reshape(n, c, h, w))

    _record("maxpool2x2", (x,), result, _backward)
    return result, argmax


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block; backward sums the 4 copies."""
    if x.data.ndim != 4:
        raise ValueError(f"upsample_nearest2x input must be rank 4, got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    result = Tensor(out)

    def _backward(g):
        _accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    _record("upsample_nearest2x", (x,), result, _backward)
    return result


def concat_channels(parts) -> Tensor:
    """Concatenate along the channel axis; backward splits by channel range."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    first = parts[0].shape
    for p in parts[1:]:
        s = p.shape
        if (s[0], s[2], s[3]) != (first[0], first[2], first[3]):
            raise ValueError(
                f"concat_channels spatial/batch mismatch: {first} vs {s}"
            )
    out = np.concatenate([p.data for p in parts], axis=1) if len(parts) > 1 else parts[0].data.copy()
    result = Tensor(out)
    spans = np.cumsum([0] + [p.shape[1] for p in parts])

    def _backward(g):
        for p, lo, hi in zip(parts, spans[:-1], spans[1:]):
            _accumulate(p, g[:, lo:hi])

    _record("concat_channels", tuple(parts), result, _backward)
    return result


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    result = Tensor(a.data + b.data)

    def _backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    _record("add", (a, b), result, _backward)
    return result


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    if x.data.ndim != 4:
        raise ValueError(f"softmax_channels input must be rank 4, got shape {x.shape}")
    if x.shape[1] < 2:
        raise ValueError(f"softmax_channels needs >= 2 channels, got {x.shape[1]}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    _check_finite("softmax_channels", p)
    result = Tensor(p)

    def _backward(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        _accumulate(x, p * (g - dot))

    _record("softmax_channels", (x,), result, _backward)
    return result


def cross_entropy_loss(probs: Tensor, target: np.ndarray) -> Tensor:
    """Mean -log p(true class) over all pixels, for 2-channel probabilities.

    target holds class ids in {0, 1} with shape (n, h, w). When probs came
    straight out of softmax_channels the loss is evaluated in log space
    from the logits (logsumexp - z_true), which never clips however
    saturated the softmax gets, and the backward pass writes its exact
    gradient (p - onehot) / npix directly into the logits. Probabilities
    fed in directly take the plain -log(p) route, floored at the dtype's
    smallest normal so an exact zero stays finite; pixels sitting on the
    floor are flat, so they contribute no gradient.
    """
    if probs.data.ndim != 4 or probs.shape[1] != 2:
        raise ValueError(f"cross_entropy_loss expects (n, 2, h, w) probabilities, got {probs.shape}")
    target = np.asarray(target)
    n, _, h, w = probs.shape
    if target.shape != (n, h, w):
        raise ValueError(
            f"cross_entropy_loss target shape {target.shape} does not match probabilities {probs.shape}"
        )
    if not np.issubdtype(target.dtype, np.integer):
        raise ValueError(f"cross_entropy_loss target must hold integer class ids, got {target.dtype}")
    if target.min() < 0 or target.max() > 1:
        raise ValueError("cross_entropy_loss target ids must be 0 or 1")

    idx = target[:, None].astype(np.int64)
    npix = n * h * w
    producer = probs.producer
    fused = producer is not None and producer.op == "softmax_channels"

    if fused:
        logits = producer.inputs[0]
        z = logits.data
        m = z.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
        z_true = np.take_along_axis(z, idx, axis=1)
        loss_val = (lse - z_true).mean(dtype=probs.dtype)
        _check_finite("cross_entropy_loss", loss_val)
        result = Tensor(np.asarray(loss_val, dtype=probs.dtype))
        idx3 = idx.reshape(n, 1, h * w)

        def _backward(g):
            scale = g / npix
            # (p - onehot) * upstream / npix, deposited straight into the logits
            gl = probs.data * scale
            flat = gl.reshape(n, 2, h * w)
            sel = np.take_along_axis(flat, idx3, axis=1)
            np.put_along_axis(flat, idx3, sel - scale, axis=1)
            _accumulate(logits, gl)

        _record("cross_entropy_loss", (logits,), result, _backward)
    else:
        floor = np.finfo(probs.data.dtype).tiny
        p_true = np.take_along_axis(probs.data, idx, axis=1)[:, 0]
        loss_val = -np.log(np.clip(p_true, floor, 1.0)).mean(dtype=probs.dtype)
        _check_finite("cross_entropy_loss", loss_val)
        result = Tensor(np.asarray(loss_val, dtype=probs.dtype))

        def _backward(g):
            gp = np.zeros_like(probs.data)
            inv = np.where(p_true >= floor, -(g / npix) / np.clip(p_true, floor, None), 0.0)
            np.put_along_axis(gp, idx, inv[:, None], axis=1)
            _accumulate(probs, gp)

        _record("cross_entropy_loss", (probs,), result, _backward)
    return result


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    """Outcome of a finite-difference comparison for one function."""

    def __init__(self, max_rel_error: float, failures, tol: float, checked: int):
        self.max_rel_error = max_rel_error
        self.failures = failures
        self.tol = tol
        self.checked = checked

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tol

    def __repr__(self):
        status = "ok" if self.ok else f"{len(self.failures)} failing coords"
        return (
            f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
            f"checked={self.checked}, tol={self.tol:.1e}, {status})"
        )


def grad_check(fn, inputs, h: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of a scalar-valued fn against central differences.

    The graph is replayed in float64 so autodiff mistakes are not masked by
    float32 rounding. Every element of every requires_grad input is checked;
    failures are reported, never raised.
    """
    inputs64 = [Tensor(t.data.astype(np.float64), requires_grad=t.requires_grad) for t in inputs]

    with Tape():
        out = fn(*inputs64)
        backward(out)

    def eval_at(tensors):
        val = fn(*tensors)
        return val.data.item()

    max_rel = 0.0
    failures = []
    checked = 0
    for i, t in enumerate(inputs64):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for coord in range(flat.size):
            orig = flat[coord]
            flat[coord] = orig + h
            up = eval_at(inputs64)
            flat[coord] = orig - h
            down = eval_at(inputs64)
            flat[coord] = orig
            numeric = (up - down) / (2 * h)
            a = float(analytic.reshape(-1)[coord])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            checked += 1
            if rel > max_rel:
                max_rel = rel
            if rel > tol:
                failures.append((i, np.unravel_index(coord, t.data.shape), a, numeric, rel))
    return GradCheckReport(max_rel, failures, tol, checked)
