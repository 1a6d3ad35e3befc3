"""Forward primitives with reverse-mode backward closures.

Every primitive follows the same contract: validate shapes (raising
ConfigurationError / ContractError), compute the forward result, and - only
if a tape is active and some input requires a gradient - record a backward
closure. The closure receives the upstream gradient and the transient
gradient pool and routes gradients to inputs via :func:`tensor.propagate`.
Weight gradients are produced only for trainable parameters; input
gradients only for inputs that require them. Inputs that require nothing
cost nothing.

Convolution uses im2col + batched matmul; the input (not the column
buffer) is saved for backward, so saved-activation accounting reflects
the feature maps actually retained.
"""

from __future__ import annotations

import numpy as np

from . import metering
from .errors import ConfigurationError, ContractError
from .tensor import Parameter, Tensor, active_tape, propagate


def _needs(x):
    return isinstance(x, Tensor) and x.requires_grad


def _weight_needs(p):
    return isinstance(p, Parameter) and p.trainable


def _out(data, requires_grad):
    t = Tensor(data)
    t.requires_grad = requires_grad
    return t


def _record(out, backward_fn, name, fwd_flops, saved_arrays, weight_grad=False, grad_inputs=()):
    """Attach a backward closure and report costs to the active meter.

    The coarse backward model charges one forward-equivalent per gradient
    the op must produce. The weight gradient is attributed to the op's own
    scope; each input gradient is attributed to the partition that produced
    that input (that is where the gradient flows), which is what lets the
    freeze-vs-finetune cost gap equal the backbone backward estimate
    exactly.
    """
    out.origin = metering.current_scope()
    tape = active_tape()
    recorded = tape is not None and out.requires_grad
    if recorded:
        tape.record(out, backward_fn, name)
        saved = sum(int(a.nbytes) for a in saved_arrays)
        metering.report(name, fwd_flops, fwd_flops if weight_grad else 0, saved)
        for t in grad_inputs:
            metering.report(name + ".dx", 0, fwd_flops, 0, partition=t.origin)
    else:
        metering.report(name, fwd_flops, 0, 0)
    return out


# ---------------------------------------------------------------------------
# convolution / linear


def _im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for ky in range(k):
        ye = ky + (ho - 1) * stride + 1
        for kx in range(k):
            xe = kx + (wo - 1) * stride + 1
            cols[:, :, ky, kx] = xp[:, :, ky:ye:stride, kx:xe:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d convolution, NCHW input, [Cout, Cin, k, k] square kernels."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(
            f"conv2d expects 4-d input and weight, got input {tuple(x.shape)} and weight {tuple(weight.shape)}"
        )
    if weight.shape[2] != weight.shape[3]:
        raise ConfigurationError(f"conv2d kernels must be square, got weight {tuple(weight.shape)}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, cin, h, w = x.shape
    cout, cin_w, k, _ = weight.shape
    if cin != cin_w:
        raise ConfigurationError(
            f"conv2d channel mismatch: input {tuple(x.shape)} vs weight {tuple(weight.shape)}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"conv2d bias shape {tuple(bias.shape)} does not match Cout={cout}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigurationError(
            f"conv2d output would be empty for input {tuple(x.shape)}, kernel {k}, stride {stride}, padding {padding}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(cout, cin * k * k)
    y = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        y += bias.data[None, :, None, None]

    need_x, need_w = _needs(x), _weight_needs(weight)
    need_b = bias is not None and _weight_needs(bias)
    out = _out(y, need_x or need_w or need_b)
    fwd = 2 * k * k * cin * cout * ho * wo * n

    def bwd(g, grads):
        g2 = g.reshape(n, cout, ho * wo)
        if need_w or need_x:
            cols_b = _im2col(
                np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data,
                k, stride, ho, wo,
            )
        if need_w:
            gw = np.matmul(g2, cols_b.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_grad(gw.reshape(weight.shape))
        if need_b:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if need_x:
            gcols = np.matmul(w2.T, g2).reshape(n, cin, k, k, ho, wo)
            gxp = np.zeros(
                (n, cin, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype
            )
            for ky in range(k):
                ye = ky + (ho - 1) * stride + 1
                for kx in range(k):
                    xe = kx + (wo - 1) * stride + 1
                    gxp[:, :, ky:ye:stride, kx:xe:stride] += gcols[:, :, ky, kx]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            propagate(grads, x, gx)

    return _record(out, bwd, "conv2d", fwd, [x.data], weight_grad=need_w or need_b,
                   grad_inputs=[x] if need_x else ())


def linear(x, weight, bias=None):
    """Affine map: x [N, D] times weight [out, D] transposed, plus bias."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ConfigurationError(
            f"linear expects 2-d input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}"
        )
    if x.shape[1] != weight.shape[1]:
        raise ConfigurationError(
            f"linear feature mismatch: input {tuple(x.shape)} vs weight {tuple(weight.shape)}"
        )
    y = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ConfigurationError(f"linear bias shape {tuple(bias.shape)} does not match out={weight.shape[0]}")
        y += bias.data
    need_x, need_w = _needs(x), _weight_needs(weight)
    need_b = bias is not None and _weight_needs(bias)
    out = _out(y, need_x or need_w or need_b)
    fwd = 2 * x.shape[0] * x.shape[1] * weight.shape[0]

    def bwd(g, grads):
        if need_w:
            weight.accumulate_grad(g.T @ x.data)
        if need_b:
            bias.accumulate_grad(g.sum(axis=0))
        if need_x:
            propagate(grads, x, g @ weight.data)

    return _record(out, bwd, "linear", fwd, [x.data], weight_grad=need_w or need_b,
                   grad_inputs=[x] if need_x else ())


# ---------------------------------------------------------------------------
# normalization


def batch_norm(x, gamma, beta, running_mean, running_var, mode, eps=1e-5, momentum=0.1):
    """Channel batch normalization over NCHW input.

    ``train_stats`` normalizes by batch statistics and folds them into the
    running buffers with the given momentum. ``frozen_stats`` normalizes by
    the stored running statistics and never mutates them, which is what
    makes a frozen backbone a pure fixed feature extractor.
    """
    if mode not in ("train_stats", "frozen_stats"):
        raise ContractError(f"unknown batch_norm mode {mode!r}")
    if eps <= 0:
        raise ContractError("batch_norm eps must be > 0")
    if x.ndim != 4:
        raise ConfigurationError(f"batch_norm expects NCHW input, got {tuple(x.shape)}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ConfigurationError(
                f"batch_norm {name} has {tuple(t.shape)} entries but input has C={c} channels"
            )

    need_x, need_g, need_b = _needs(x), _weight_needs(gamma), _weight_needs(beta)
    if mode == "train_stats":
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean.data *= 1.0 - momentum
        running_mean.data += momentum * mu
        running_var.data *= 1.0 - momentum
        running_var.data += momentum * var
    else:
        mu = running_mean.data
        var = running_var.data
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = _out(y, need_x or need_g or need_b)
    fwd = 2 * x.size

    def bwd(g, grads):
        if need_g:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if need_b:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if need_x:
            gxhat = g * gamma.data[None, :, None, None]
            if mode == "frozen_stats":
                gx = gxhat * inv_std[None, :, None, None]
            else:
                sum_gxhat = gxhat.sum(axis=(0, 2, 3))
                sum_gxhat_xhat = (gxhat * xhat).sum(axis=(0, 2, 3))
                gx = (
                    gxhat
                    - (sum_gxhat[None, :, None, None] + xhat * sum_gxhat_xhat[None, :, None, None]) / m
                ) * inv_std[None, :, None, None]
            propagate(grads, x, gx)

    return _record(out, bwd, "batch_norm", fwd, [xhat], weight_grad=need_g or need_b,
                   grad_inputs=[x] if need_x else ())


# ---------------------------------------------------------------------------
# activations and shape ops


def relu(x):
    y = np.maximum(x.data, 0)
    out = _out(y, _needs(x))

    def bwd(g, grads):
        propagate(grads, x, g * (y > 0))

    return _record(out, bwd, "relu", x.size, [y], grad_inputs=[x])


def sigmoid(x):
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = _out(y, _needs(x))

    def bwd(g, grads):
        propagate(grads, x, g * y * (1.0 - y))

    return _record(out, bwd, "sigmoid", x.size, [y], grad_inputs=[x])


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _out(y, _needs(x))

    def bwd(g, grads):
        dot = (g * y).sum(axis=axis, keepdims=True)
        propagate(grads, x, y * (g - dot))

    return _record(out, bwd, "softmax", 3 * x.size, [y], grad_inputs=[x])


def max_pool2d(x, kernel=2):
    """Non-overlapping max pool (stride == kernel); extents must divide."""
    if x.ndim != 4:
        raise ConfigurationError(f"max_pool2d expects NCHW input, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ContractError(f"max_pool2d needs extents divisible by {kernel}, got {h}x{w}")
    ho, wo = h // kernel, w // kernel
    win = (
        x.data.reshape(n, c, ho, kernel, wo, kernel)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, kernel * kernel)
    )
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = _out(y, _needs(x))

    def bwd(g, grads):
        gwin = np.zeros((n, c, ho, wo, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = (
            gwin.reshape(n, c, ho, wo, kernel, kernel)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        propagate(grads, x, gx)

    return _record(out, bwd, "max_pool2d", x.size, [idx], grad_inputs=[x])


def upsample_nearest2x(x):
    if x.ndim != 4:
        raise ConfigurationError(f"upsample_nearest2x expects NCHW input, got {tuple(x.shape)}")
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    out = _out(y, _needs(x))
    n, c, h, w = x.shape

    def bwd(g, grads):
        propagate(grads, x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _record(out, bwd, "upsample_nearest2x", out.size, [], grad_inputs=[x])


def global_avg_pool(x):
    if x.ndim != 4:
        raise ConfigurationError(f"global_avg_pool expects NCHW input, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3))
    out = _out(y, _needs(x))

    def bwd(g, grads):
        propagate(grads, x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy())

    return _record(out, bwd, "global_avg_pool", x.size, [], grad_inputs=[x])


def add(a, b):
    """Elementwise add; shapes must match exactly (no broadcasting)."""
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    out = _out(a.data + b.data, _needs(a) or _needs(b))
    na, nb = _needs(a), _needs(b)

    def bwd(g, grads):
        if na:
            propagate(grads, a, g)
        if nb:
            propagate(grads, b, g.copy())

    return _record(out, bwd, "add", a.size, [],
                   grad_inputs=[t for t, n in ((a, na), (b, nb)) if n])


def mul(a, b):
    """Elementwise product; shapes must match exactly."""
    if a.shape != b.shape:
        raise ConfigurationError(f"mul shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    out = _out(a.data * b.data, _needs(a) or _needs(b))
    na, nb = _needs(a), _needs(b)

    def bwd(g, grads):
        if na:
            propagate(grads, a, g * b.data)
        if nb:
            propagate(grads, b, g * a.data)

    return _record(out, bwd, "mul", a.size, [a.data, b.data],
                   grad_inputs=[t for t, n in ((a, na), (b, nb)) if n])


def mul_scalar(x, c):
    c = float(c)
    out = _out(x.data * c, _needs(x))

    def bwd(g, grads):
        propagate(grads, x, g * c)

    return _record(out, bwd, "mul_scalar", x.size, [], grad_inputs=[x])


def sum_all(x):
    out = _out(np.asarray(x.data.sum(), dtype=x.dtype), _needs(x))

    def bwd(g, grads):
        propagate(grads, x, np.full(x.shape, g, dtype=x.dtype))

    return _record(out, bwd, "sum_all", x.size, [], grad_inputs=[x])


def reshape(x, shape):
    out = _out(x.data.reshape(shape), _needs(x))

    def bwd(g, grads):
        propagate(grads, x, g.reshape(x.shape))

    return _record(out, bwd, "reshape", 0, [], grad_inputs=[x])


def permute(x, axes):
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = _out(np.ascontiguousarray(x.data.transpose(axes)), _needs(x))

    def bwd(g, grads):
        propagate(grads, x, np.ascontiguousarray(g.transpose(inv)))

    return _record(out, bwd, "permute", 0, [], grad_inputs=[x])


def concat_rows(tensors):
    """Concatenate 2-d tensors along axis 0."""
    k = tensors[0].shape[1]
    for t in tensors[1:]:
        if t.ndim != 2 or t.shape[1] != k:
            raise ConfigurationError(
                f"concat_rows needs matching widths, got {[tuple(t.shape) for t in tensors]}"
            )
    y = np.concatenate([t.data for t in tensors], axis=0)
    needs = [_needs(t) for t in tensors]
    out = _out(y, any(needs))
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def bwd(g, grads):
        for t, n, piece in zip(tensors, needs, np.split(g, splits, axis=0)):
            if n:
                propagate(grads, t, piece.copy())

    return _record(out, bwd, "concat_rows", 0, [],
                   grad_inputs=[t for t, n in zip(tensors, needs) if n])


def concat_channels(tensors):
    """Concatenate tensors along axis 1; other extents must match."""
    base = tensors[0]
    for t in tensors[1:]:
        if t.ndim != base.ndim or t.shape[0] != base.shape[0] or t.shape[2:] != base.shape[2:]:
            raise ConfigurationError(
                f"concat_channels needs matching extents off axis 1, got {[tuple(t.shape) for t in tensors]}"
            )
    y = np.concatenate([t.data for t in tensors], axis=1)
    needs = [_needs(t) for t in tensors]
    out = _out(y, any(needs))
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def bwd(g, grads):
        for t, n, piece in zip(tensors, needs, np.split(g, splits, axis=1)):
            if n:
                propagate(grads, t, piece.copy())

    return _record(out, bwd, "concat_channels", 0, [],
                   grad_inputs=[t for t, n in zip(tensors, needs) if n])


def take_rows(x, idx):
    """Gather rows of a 2-d tensor; backward scatter-adds (duplicates allowed)."""
    if x.ndim != 2:
        raise ConfigurationError(f"take_rows expects 2-d input, got {tuple(x.shape)}")
    idx = np.asarray(idx, dtype=np.int64)
    y = x.data[idx]
    out = _out(y, _needs(x))

    def bwd(g, grads):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        propagate(grads, x, gx)

    return _record(out, bwd, "take_rows", y.size, [idx], grad_inputs=[x])


def crop_gather(x, batch_idx, ys, xs):
    """Sample x[b, :, ys, xs] per region: the fixed-grid lookup behind ROI pooling.

    ``batch_idx`` is [R]; ``ys``/``xs`` are integer index grids [R, h, w]
    precomputed outside the gradient path. Output is [R, C, h, w].
    """
    if x.ndim != 4:
        raise ConfigurationError(f"crop_gather expects NCHW input, got {tuple(x.shape)}")
    b = np.asarray(batch_idx, dtype=np.int64)[:, None, None]
    xl = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    y = xl[b, ys, xs].transpose(0, 3, 1, 2)
    out = _out(y, _needs(x))

    def bwd(g, grads):
        gxl = np.zeros_like(xl)
        np.add.at(gxl, (b, ys, xs), g.transpose(0, 2, 3, 1))
        propagate(grads, x, gxl.transpose(0, 3, 1, 2))

    return _record(out, bwd, "crop_gather", y.size, [b, ys, xs], grad_inputs=[x])
