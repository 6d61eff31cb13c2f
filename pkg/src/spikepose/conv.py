"""Dense 2-D convolution primitives on ``(N, C, H, W)`` arrays.

Forward passes use a strided window view contracted with the kernel; the
transposed convolution and the input gradient share one tap-scatter routine.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse


def conv_output_size(size, kernel, stride=1, padding=0, dilation=1):
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv_transpose_output_size(size, kernel, stride=1, padding=0, output_padding=0):
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def _windows(x, kernel, stride, padding, dilation):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    span = dilation * (kernel - 1) + 1
    win = sliding_window_view(x, (span, span), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dilation, ::dilation]


def conv2d(x, w, bias=None, stride=1, padding=0, dilation=1):
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (Co, C, K, K)."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    win = _windows(x, w.shape[2], stride, padding, dilation)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def depthwise_conv2d(x, w, bias=None, stride=1, padding=0, dilation=1):
    """Per-channel convolution; ``w`` is (C, 1, K, K)."""
    if w.shape[0] != x.shape[1] or w.shape[1] != 1:
        raise ValueError(f"depthwise kernel {w.shape} incompatible with {x.shape[1]} channels")
    win = _windows(x, w.shape[2], stride, padding, dilation)
    out = np.einsum("nchwij,cij->nchw", win, w[:, 0])
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def _scatter_taps(y, w, stride, dilation, out_hw):
    """Sum ``w[:, :, i, j]``-weighted copies of ``y`` into a strided output grid.

    ``y`` is (N, A, Hy, Wy) and ``w`` is (A, B, K, K); the result (N, B, *out_hw)
    holds, for every tap, ``y`` placed at offset ``(i*d, j*d)`` with step ``stride``.
    """
    n, _, hy, wy = y.shape
    k = w.shape[2]
    out = np.zeros((n, w.shape[1]) + tuple(out_hw), dtype=np.result_type(y, w))
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(y, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            r0, c0 = i * dilation, j * dilation
            out[:, :, r0 : r0 + stride * (hy - 1) + 1 : stride, c0 : c0 + stride * (wy - 1) + 1 : stride] += contrib
    return out


def conv_transpose2d(x, w, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution of ``x`` (N, Ci, H, W) with ``w`` (Ci, Co, K, K)."""
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {w.shape[0]}")
    k = w.shape[2]
    full_h = (x.shape[2] - 1) * stride + k + output_padding
    full_w = (x.shape[3] - 1) * stride + k + output_padding
    full = _scatter_taps(x, w, stride, 1, (full_h, full_w))
    out = full[:, :, padding : full_h - padding, padding : full_w - padding]
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x, w, grad_out, stride=1, padding=0, dilation=1):
    """Gradients of :func:`conv2d` w.r.t. input, kernel and bias."""
    win = _windows(x, w.shape[2], stride, padding, dilation)
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    full = _scatter_taps(grad_out, w, stride, dilation, (hp, wp))
    grad_x = full[:, :, padding : hp - padding, padding : wp - padding]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def upsample_nearest(x, factor):
    if factor == 1:
        return x
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def batchnorm(x, gamma, beta, mean, var, eps=1e-5):
    """Inference-mode batch normalisation over the channel axis."""
    scale = gamma / np.sqrt(var + eps)
    return x * scale[None, :, None, None] + (beta - mean * scale)[None, :, None, None]


def receptive_fanout(size_in, kernel, stride, padding, dilation=1):
    """Number of output positions each input coordinate feeds, along one axis."""
    size_out = conv_output_size(size_in, kernel, stride, padding, dilation)
    fan = np.zeros(size_in, dtype=np.int64)
    for o in range(size_out):
        for k in range(kernel):
            i = o * stride - padding + k * dilation
            if 0 <= i < size_in:
                fan[i] += 1
    return fan


def sparse_conv2d(x, w, bias=None, stride=1, padding=0, dilation=1, nonzero=None):
    """Event-driven :func:`conv2d`: only non-zero input sites are propagated.

    Work scales with the number of synaptic accumulations rather than with
    the dense output volume. ``nonzero`` may pass precomputed ``np.nonzero(x)``.
    """
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(wd, k, stride, padding, dilation)
    nz = np.nonzero(x) if nonzero is None else nonzero
    vals = x[nz].astype(w.dtype)
    bi, ci, yi, xi = (a.astype(np.int64) for a in nz)
    ty, tx = np.divmod(np.arange(k * k), k)
    # output row for input row y through tap i: (y + padding - i*dilation) / stride
    ny = yi[:, None] + padding - ty[None, :] * dilation
    nx = xi[:, None] + padding - tx[None, :] * dilation
    ok = (ny % stride == 0) & (nx % stride == 0)
    ny //= stride
    nx //= stride
    ok &= (ny >= 0) & (ny < ho) & (nx >= 0) & (nx < wo)
    rows = ((bi[:, None] * ho + ny) * wo + nx)[ok]
    cols = (ci[:, None] * (k * k) + np.arange(k * k)[None, :])[ok]
    v = np.broadcast_to(vals[:, None], ok.shape)[ok]
    wmat = w.reshape(co, c * k * k).T
    acc = sparse.csr_matrix((v, (rows, cols)), shape=(n * ho * wo, c * k * k))
    out = np.asarray(acc @ wmat)
    out = out.reshape(n, ho, wo, co)
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
