"""Pure-numpy implementations of the hot convolution/resampling kernels.

These mirror ``_ckernels.pyx`` exactly, including the accumulation order of
``col2im`` so both backends agree bitwise.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """(n, c, h, w) -> (n, c*kh*kw, oh*ow), rows ordered (c, ky, kx)."""
    n, c, h, w = x.shape
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (n, c, oh, ow, kh, kw) -> (n, c, kh, kw, oh, ow)
    cols = win.transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(cols).reshape(n, c * kh * kw, oh * ow)


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to image layout."""
    n, c, h, w = shape
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            out[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += cols[:, :, ky, kx]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


def upsample2(x):
    """Bilinear x2 upsampling with half-pixel centers and clamped borders.

    Along one axis output 2i samples 0.75*x[i] + 0.25*x[i-1] and output 2i+1
    samples 0.75*x[i] + 0.25*x[i+1], indices clamped to the valid range.
    """
    rows = _up_axis(x, 2)
    return _up_axis(rows, 3)


def _up_axis(x, axis):
    n = x.shape[axis]
    idx = np.arange(n)
    prev = np.take(x, np.maximum(idx - 1, 0), axis=axis)
    nxt = np.take(x, np.minimum(idx + 1, n - 1), axis=axis)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] *= 2
    return out.reshape(shape).astype(x.dtype, copy=False)


def upsample2_backward(g):
    """Adjoint of :func:`upsample2`; ``g`` has shape (n, c, 2h, 2w)."""
    cols = _up_axis_t(g, 3)
    return _up_axis_t(cols, 2)


def _up_axis_t(g, axis):
    n2 = g.shape[axis]
    n = n2 // 2
    even = np.take(g, np.arange(0, n2, 2), axis=axis)
    odd = np.take(g, np.arange(1, n2, 2), axis=axis)
    # each source i receives 0.75 from even[i] and odd[i]; 0.25 from even[i+1]
    # and odd[i-1]; clamped neighbours fold back onto the border sample.
    out = 0.75 * even + 0.75 * odd
    sl = [slice(None)] * g.ndim

    def at(a, s):
        sl2 = list(sl)
        sl2[axis] = s
        return tuple(sl2)

    out[at(out, slice(0, n - 1))] += 0.25 * even[at(even, slice(1, n))]
    out[at(out, slice(0, 1))] += 0.25 * even[at(even, slice(0, 1))]
    out[at(out, slice(1, n))] += 0.25 * odd[at(odd, slice(0, n - 1))]
    out[at(out, slice(n - 1, n))] += 0.25 * odd[at(odd, slice(n - 1, n))]
    return out.astype(g.dtype, copy=False)


def tap_gather(y, kh, kw, oh, ow):
    """Shift-and-sum of per-tap responses.

    ``y`` is (n, kh*kw, cout, hp, wp); returns (n, cout, oh, ow) with
    ``out[.., oy, ox] = sum_k y[:, k, :, oy + ky, ox + kx]`` summed in tap order.
    """
    n, _, cout, hp, wp = y.shape
    out = np.zeros((n, cout, oh, ow), dtype=y.dtype)
    for ky in range(kh):
        for kx in range(kw):
            out += y[:, ky * kw + kx, :, ky : ky + oh, kx : kx + ow]
    return out


def tap_scatter(g, kh, kw, hp, wp):
    """Adjoint of :func:`tap_gather`."""
    n, cout, oh, ow = g.shape
    out = np.zeros((n, kh * kw, cout, hp, wp), dtype=g.dtype)
    for ky in range(kh):
        for kx in range(kw):
            out[:, ky * kw + kx, :, ky : ky + oh, kx : kx + ow] = g
    return out
