"""Differentiable building blocks for the recognizer.

Every function takes and returns Tensors, computes forward with numpy, and
registers its backward rule on the active tape. Convolution is im2col plus
one matmul; the naive direct form lives in the test suite as an oracle.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, record, accumulate_grad
from .tensor import add, sub, mul, scale, sum_all  # noqa: F401  (re-exported)


def _require(cond, msg):
    if not cond:
        raise ValueError(msg)


class kink_trace:
    """Collects, for every relu/maxpool run inside the context, the distance
    to the nearest non-differentiable point (zero crossing, argmax tie).

    Finite-difference probes are only valid when these margins comfortably
    exceed the probe epsilon; the gradient checker uses this to certify its
    probe points instead of silently comparing garbage at a kink.
    """

    _active = None

    def __init__(self):
        self.margins = []

    def __enter__(self):
        kink_trace._active = self
        return self

    def __exit__(self, *exc):
        kink_trace._active = None
        return False

    @staticmethod
    def report(margin):
        if kink_trace._active is not None:
            kink_trace._active.margins.append(float(margin))


def conv2d(x, weight, bias, stride=1, padding=0, label=None):
    """2-d cross-correlation with zero padding.

    x: (N, C_in, H, W), weight: (C_out, C_in, kh, kw), bias: (C_out,).
    Output spatial dims are (H + 2p - kh) // stride + 1 and likewise for W.
    """
    _require(x.ndim == 4, f"conv2d: input must be 4-d, got {x.shape}")
    _require(weight.ndim == 4, f"conv2d: weight must be 4-d, got {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    _require(c_in == c_in_w, f"conv2d: channel mismatch, input {c_in} vs weight {c_in_w}")
    _require(bias.shape == (c_out,), f"conv2d: bias shape {bias.shape} != ({c_out},)")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    _require(h_out >= 1 and w_out >= 1,
             f"conv2d: degenerate output {h_out}x{w_out} for input {h}x{w} kernel {kh}x{kw}")

    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    # im2col: gather every kernel offset as a strided slice, then collapse to
    # (N, C_in*kh*kw, L) so the convolution is a single batched matmul.
    l = h_out * w_out
    cols = np.empty((n, c_in, kh, kw, h_out, w_out), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
    cols2 = cols.reshape(n, c_in * kh * kw, l)
    wmat = weight.data.reshape(c_out, c_in * kh * kw)
    out_data = np.matmul(wmat[None], cols2)  # (N, C_out, L)
    out_data += bias.data[:, None]
    out = Tensor(out_data.reshape(n, c_out, h_out, w_out))

    def bwd(g):
        gmat = g.reshape(n, c_out, l)
        if bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = np.matmul(gmat, cols2.transpose(0, 2, 1)).sum(axis=0)
            accumulate_grad(weight, gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T[None], gmat).reshape(n, c_in, kh, kw, h_out, w_out)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += gcols[:, :, i, j]
            if padding > 0:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            accumulate_grad(x, gxp)

    return record("conv2d", (x, weight, bias), out, bwd, label)


def batchnorm2d(x, gamma, beta, running_mean, running_var, momentum=0.1,
                eps=1e-5, training=True, label=None):
    """Per-channel batch normalization over the (N, H, W) axes.

    Train mode normalizes with biased batch statistics and folds them into
    the running estimates in place: running <- (1 - momentum) * running +
    momentum * batch. Eval mode normalizes with the running estimates and
    never mutates them.
    """
    _require(x.ndim == 4, f"batchnorm2d: input must be 4-d, got {x.shape}")
    n, c, h, w = x.shape
    _require(gamma.shape == (c,) and beta.shape == (c,),
             f"batchnorm2d: gamma/beta must be ({c},)")
    if training:
        count = n * h * w
        _require(count >= 2,
                 f"batchnorm2d: train mode needs at least 2 values per channel, got {count}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

    def bwd(g):
        if beta.requires_grad:
            accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                cnt = n * h * w
                s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - (s1 + xhat * s2) / cnt) * invstd[None, :, None, None]
            else:
                gx = gxhat * invstd[None, :, None, None]
            accumulate_grad(x, gx)

    return record("batchnorm2d", (x, gamma, beta), out, bwd, label)


def relu(x, label=None):
    if kink_trace._active is not None:
        kink_trace.report(np.abs(x.data).min())
    out = Tensor(np.maximum(x.data, 0))

    def bwd(g):
        accumulate_grad(x, g * (out.data > 0))

    return record("relu", (x,), out, bwd, label)


def sigmoid(x, label=None):
    # Two-branch form keeps exp() off large positive arguments.
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data)

    def bwd(g):
        accumulate_grad(x, g * out.data * (1.0 - out.data))

    return record("sigmoid", (x,), out, bwd, label)


def tanh(x, label=None):
    out = Tensor(np.tanh(x.data))

    def bwd(g):
        accumulate_grad(x, g * (1.0 - out.data * out.data))

    return record("tanh", (x,), out, bwd, label)


def maxpool2d(x, kernel, stride=None, label=None):
    """Non-overlapping max pooling; kernel must equal stride and divide H, W.

    The backward pass routes each window's gradient to its argmax, first
    occurrence in row-major window order on ties.
    """
    stride = kernel if stride is None else stride
    _require(kernel == stride, f"maxpool2d: kernel {kernel} must equal stride {stride}")
    _require(x.ndim == 4, f"maxpool2d: input must be 4-d, got {x.shape}")
    n, c, h, w = x.shape
    _require(h % kernel == 0 and w % kernel == 0,
             f"maxpool2d: {h}x{w} not divisible by window {kernel}")
    ho, wo = h // kernel, w // kernel
    windows = (x.data.reshape(n, c, ho, kernel, wo, kernel)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, ho, wo, kernel * kernel))
    if kink_trace._active is not None and windows.shape[-1] >= 2:
        top2 = np.partition(windows, windows.shape[-1] - 2, axis=-1)
        gap = top2[..., -1] - top2[..., -2]
        # a window whose two largest entries are both exactly zero is a tie
        # between relu-clamped values: locally constant, not a kink
        live = ~((top2[..., -1] == 0.0) & (top2[..., -2] == 0.0))
        if live.any():
            kink_trace.report(gap[live].min())
    idx = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])

    def bwd(g):
        if not x.requires_grad:
            return
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = (gwin.reshape(n, c, ho, wo, kernel, kernel)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h, w))
        accumulate_grad(x, gx)

    return record("maxpool2d", (x,), out, bwd, label)


def interp_matrix(n_in, n_out, dtype):
    """Dense 1-d bilinear interpolation matrix (n_out x n_in).

    Sample positions follow the half-pixel convention: the source coordinate
    of output index i is (i + 0.5) * n_in / n_out - 0.5, clamped to the valid
    range. Rows sum to 1 exactly, so constants are preserved.
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    for o in range(n_out):
        m[o, i0[o]] += 1.0 - frac[o]
        m[o, i1[o]] += frac[o]
    return m


_interp_cache = {}


def _cached_interp(n_in, n_out, dtype):
    key = (n_in, n_out, np.dtype(dtype).name)
    m = _interp_cache.get(key)
    if m is None:
        m = interp_matrix(n_in, n_out, dtype)
        _interp_cache[key] = m
    return m


def bilinear_upsample(x, factor, label=None):
    """Bilinear upsampling by an integer factor (2, 4, or 8) on H and W."""
    _require(factor in (2, 4, 8), f"bilinear_upsample: unsupported factor {factor}")
    _require(x.ndim == 4, f"bilinear_upsample: input must be 4-d, got {x.shape}")
    n, c, h, w = x.shape
    mh = _cached_interp(h, h * factor, x.data.dtype)
    mw = _cached_interp(w, w * factor, x.data.dtype)
    out = Tensor(np.matmul(mh, np.matmul(x.data, mw.T)))

    def bwd(g):
        accumulate_grad(x, np.matmul(mh.T, np.matmul(g, mw)))

    return record("bilinear_upsample", (x,), out, bwd, label)


def concat(xs, axis=1, label=None):
    """Concatenate tensors along one axis; all other dims must agree."""
    xs = list(xs)
    _require(len(xs) >= 1, "concat: need at least one tensor")
    nd = xs[0].ndim
    for t in xs[1:]:
        _require(t.ndim == nd, "concat: rank mismatch")
        for ax in range(nd):
            if ax != axis:
                _require(t.shape[ax] == xs[0].shape[ax],
                         f"concat: dim {ax} mismatch {t.shape} vs {xs[0].shape}")
    out = Tensor(np.concatenate([t.data for t in xs], axis=axis))
    sizes = [t.shape[axis] for t in xs]

    def bwd(g):
        start = 0
        for t, s in zip(xs, sizes):
            sl = [slice(None)] * nd
            sl[axis] = slice(start, start + s)
            accumulate_grad(t, g[tuple(sl)])
            start += s

    return record("concat", tuple(xs), out, bwd, label)


def concat_channels(xs, label=None):
    for t in xs:
        _require(t.ndim == 4, f"concat_channels: inputs must be 4-d, got {t.shape}")
    return concat(xs, axis=1, label=label)


def gate_multiply(x, gate, label=None):
    """Multiply (N, C, H, W) features by a single-channel (N, 1, H, W) map."""
    _require(x.ndim == 4 and gate.ndim == 4, "gate_multiply: inputs must be 4-d")
    n, c, h, w = x.shape
    _require(gate.shape == (n, 1, h, w),
             f"gate_multiply: gate shape {gate.shape} != ({n}, 1, {h}, {w})")
    out = Tensor(x.data * gate.data)

    def bwd(g):
        accumulate_grad(x, g * gate.data)
        accumulate_grad(gate, (g * x.data).sum(axis=1, keepdims=True))

    return record("gate_multiply", (x, gate), out, bwd, label)


def matmul(a, b, label=None):
    _require(a.ndim == 2 and b.ndim == 2, "matmul: inputs must be 2-d")
    _require(a.shape[1] == b.shape[0], f"matmul: inner dims {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        accumulate_grad(a, g @ b.data.T)
        accumulate_grad(b, a.data.T @ g)

    return record("matmul", (a, b), out, bwd, label)


def linear(x, weight, bias, label=None):
    """Affine map: x (N, D_in) @ weight (D_in, D_out) + bias (D_out,)."""
    _require(x.ndim == 2, f"linear: input must be 2-d, got {x.shape}")
    _require(x.shape[1] == weight.shape[0],
             f"linear: dim mismatch {x.shape} vs {weight.shape}")
    _require(bias.shape == (weight.shape[1],), "linear: bias shape mismatch")
    out = Tensor(x.data @ weight.data + bias.data)

    def bwd(g):
        accumulate_grad(x, g @ weight.data.T)
        accumulate_grad(weight, x.data.T @ g)
        accumulate_grad(bias, g.sum(axis=0))

    return record("linear", (x, weight, bias), out, bwd, label)


def softmax(x, label=None):
    """Row-wise softmax over the last axis, max-shifted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))

    def bwd(g):
        s = out.data
        accumulate_grad(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return record("softmax", (x,), out, bwd, label)


def embedding_lookup(table, idx, label=None):
    """Fetch one row of an embedding table as a (E,) tensor."""
    v, _ = table.shape
    _require(0 <= idx < v, f"embedding_lookup: index {idx} out of range for {v} rows")
    out = Tensor(table.data[idx].copy())

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            gt[idx] = g
            accumulate_grad(table, gt)

    return record("embedding_lookup", (table,), out, bwd, label)


def embedding(table, indices, label=None):
    """Batched row gather: indices (N,) -> (N, E). Repeats accumulate."""
    indices = np.asarray(indices, dtype=np.int64)
    v, _ = table.shape
    _require(indices.ndim == 1, "embedding: indices must be 1-d")
    _require(np.all((indices >= 0) & (indices < v)),
             f"embedding: index out of range for {v} rows")
    out = Tensor(table.data[indices])

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, indices, g)
            accumulate_grad(table, gt)

    return record("embedding", (table,), out, bwd, label)


def select_step(x, t, label=None):
    """Slice one time step from a (N, T, K) tensor -> (N, K)."""
    _require(x.ndim == 3, f"select_step: input must be 3-d, got {x.shape}")
    _require(0 <= t < x.shape[1], f"select_step: step {t} out of range {x.shape[1]}")
    out = Tensor(x.data[:, t, :])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, t, :] = g
        accumulate_grad(x, gx)

    return record("select_step", (x,), out, bwd, label)


def reshape(x, shape, label=None):
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        accumulate_grad(x, g.reshape(x.shape))

    return record("reshape", (x,), out, bwd, label)


@dataclass
class GruWeights:
    """Weight tensors for one GRU cell: per-gate input (w), hidden (u), bias (b)."""
    wz: Tensor
    uz: Tensor
    bz: Tensor
    wr: Tensor
    ur: Tensor
    br: Tensor
    wh: Tensor
    uh: Tensor
    bh: Tensor


def gru_cell(x, h_prev, p, label=None):
    """One GRU step, composed from primitive ops so the tape differentiates it.

        z = sigmoid(x wz + h uz + bz)        update gate
        r = sigmoid(x wr + h ur + br)        reset gate
        c = tanh(x wh + (r * h) uh + bh)     candidate state
        h' = (1 - z) * h + z * c             written as h + z * (c - h)
    """
    z = sigmoid(add(linear(x, p.wz, p.bz), matmul(h_prev, p.uz)), label=label)
    r = sigmoid(add(linear(x, p.wr, p.br), matmul(h_prev, p.ur)), label=label)
    c = tanh(add(linear(x, p.wh, p.bh), matmul(mul(r, h_prev), p.uh)), label=label)
    return add(h_prev, mul(z, sub(c, h_prev)))


def sequence_nll(logits_seq, targets, label=None):
    """Mean-over-batch of the per-sample summed negative log-likelihood.

    logits_seq is a list of (N, V) tensors, one per time step. targets is a
    list of N index sequences; sample i is scored at steps 0..len(targets[i])-1
    and contributes nothing at later steps. Each sequence is expected to end
    with the end-of-sequence class, which is supervised like any other step.
    """
    _require(len(logits_seq) >= 1, "sequence_nll: need at least one step")
    n, v = logits_seq[0].shape
    for t, lg in enumerate(logits_seq):
        _require(lg.shape == (n, v), f"sequence_nll: step {t} shape {lg.shape} != ({n}, {v})")
    _require(len(targets) == n, f"sequence_nll: {len(targets)} target rows for batch {n}")
    steps = len(logits_seq)
    for i, seq in enumerate(targets):
        _require(len(seq) <= steps,
                 f"sequence_nll: target {i} has {len(seq)} steps but only {steps} logits")
        for cls in seq:
            _require(0 <= cls < v, f"sequence_nll: class {cls} out of range {v}")

    probs = []
    masks = []
    tgt_idx = []
    total = 0.0
    for t, lg in enumerate(logits_seq):
        shifted = lg.data - lg.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        denom = e.sum(axis=-1, keepdims=True)
        p = e / denom
        logp = shifted - np.log(denom)
        active = np.array([len(seq) > t for seq in targets])
        idx = np.array([seq[t] if len(seq) > t else 0 for seq in targets], dtype=np.int64)
        total -= logp[np.arange(n), idx][active].sum()
        probs.append(p)
        masks.append(active)
        tgt_idx.append(idx)
    out = Tensor(np.asarray(total / n, dtype=logits_seq[0].data.dtype))

    def bwd(g):
        gs = np.asarray(g).reshape(-1)[0] / n
        for t, lg in enumerate(logits_seq):
            if not lg.requires_grad:
                continue
            glogits = probs[t].copy()
            glogits[np.arange(n), tgt_idx[t]] -= 1.0
            glogits[~masks[t]] = 0.0
            accumulate_grad(lg, glogits * gs)

    return record("sequence_nll", tuple(logits_seq), out, bwd, label)
