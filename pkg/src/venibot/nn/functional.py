"""Array-level kernels for 2-D (transposed) convolution and pooling.

All tensors are NCHW. A convolution is lowered to a batched matmul over an
im2col buffer; its two adjoints (input gradient, weight gradient) are
exposed separately so that the transposed convolution can be written as
conv's input-gradient (forward) and conv itself (backward).
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def transconv_output_size(size, kernel, stride, pad, out_pad):
    return (size - 1) * stride - 2 * pad + kernel + out_pad


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(x, kernel, stride, pad, groups):
    """Return columns of shape (N, G, C/G * k * k, Ho * Wo)."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, pad)
    wo = conv_output_size(w, kernel, stride, pad)
    if kernel == 1 and stride == 1 and pad == 0:
        return x.reshape(n, groups, c // groups, h * w), ho, wo
    xp = np.ascontiguousarray(_pad(x, pad))
    s0, s1, s2, s3 = xp.strides
    win = as_strided(
        xp,
        shape=(n, c, kernel, kernel, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = win.reshape(n, groups, (c // groups) * kernel * kernel, ho * wo)
    return cols, ho, wo


def col2im(cols, x_shape, kernel, stride, pad, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add columns back onto an image."""
    n, c, h, w = x_shape
    if kernel == 1 and stride == 1 and pad == 0:
        return cols.reshape(n, c, h, w)
    cols = cols.reshape(n, c, kernel, kernel, ho, wo)
    hp, wp = h + 2 * pad, w + 2 * pad
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for a in range(kernel):
        for b in range(kernel):
            out[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += cols[:, :, a, b]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


def conv2d(x, weight, stride=1, pad=0, groups=1):
    """Grouped cross-correlation. Returns ``(y, cols)``; ``cols`` feeds the weight gradient."""
    n = x.shape[0]
    out_c, cg, k, _ = weight.shape
    cols, ho, wo = im2col(x, k, stride, pad, groups)
    wm = weight.reshape(groups, out_c // groups, cg * k * k)
    y = np.matmul(wm[None], cols)
    return y.reshape(n, out_c, ho, wo), cols


def conv2d_grad_input(grad, weight, x_shape, stride=1, pad=0, groups=1):
    n, out_c, ho, wo = grad.shape
    _, cg, k, _ = weight.shape
    wm = weight.reshape(groups, out_c // groups, cg * k * k)
    g = grad.reshape(n, groups, out_c // groups, ho * wo)
    dcols = np.matmul(wm.transpose(0, 2, 1)[None], g)
    return col2im(dcols, x_shape, k, stride, pad, ho, wo)


def conv2d_grad_weight(grad, cols, weight_shape, groups=1):
    n, out_c, ho, wo = grad.shape
    g = grad.reshape(n, groups, out_c // groups, ho * wo)
    dw = np.matmul(g, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    return dw.reshape(weight_shape)


def conv_transpose2d(x, weight, stride=1, pad=0, out_pad=0):
    """Transposed convolution with ``weight`` laid out as (C_in, C_out, k, k).

    Returns ``(y, buffer_shape)``; ``buffer_shape`` is the uncropped output
    extent needed by the backward pass.
    """
    n, _, h, w = x.shape
    c_out, k = weight.shape[1], weight.shape[2]
    hb = (h - 1) * stride + k + out_pad
    wb = (w - 1) * stride + k + out_pad
    buf_shape = (n, c_out, hb, wb)
    y = conv2d_grad_input(x, weight, buf_shape, stride=stride, pad=0)
    if pad:
        y = y[:, :, pad:hb - pad, pad:wb - pad]
    return y, buf_shape


def conv_transpose2d_backward(grad, x, weight, buf_shape, stride=1, pad=0):
    """Return ``(dx, dweight)`` for :func:`conv_transpose2d`."""
    if pad:
        full = np.zeros(buf_shape, dtype=grad.dtype)
        full[:, :, pad:buf_shape[2] - pad, pad:buf_shape[3] - pad] = grad
    else:
        full = grad
    dx, cols = conv2d(full, weight, stride=stride, pad=0)
    dx = dx[:, :, :x.shape[2], :x.shape[3]]
    dw = conv2d_grad_weight(x, cols, weight.shape)
    return dx, dw


def max_pool2d(x, kernel, stride):
    """Returns ``(y, argmax)`` where argmax indexes the flattened k*k window."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, 0)
    wo = conv_output_size(w, kernel, stride, 0)
    xc = np.ascontiguousarray(x)
    s0, s1, s2, s3 = xc.strides
    win = as_strided(
        xc,
        shape=(n, c, ho, wo, kernel, kernel),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    ).reshape(n, c, ho, wo, kernel * kernel)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def max_pool2d_backward(grad, idx, x_shape, kernel, stride):
    n, c, ho, wo = grad.shape
    dx = np.zeros(x_shape, dtype=grad.dtype)
    ia, ib = np.divmod(idx, kernel)
    rows = np.arange(ho)[None, None, :, None] * stride + ia
    cols = np.arange(wo)[None, None, None, :] * stride + ib
    nn_ = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(dx, (nn_, cc, rows, cols), grad)
    return dx
