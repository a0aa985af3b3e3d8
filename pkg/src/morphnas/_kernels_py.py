"""Pure-numpy reference kernels.

These define the exact semantics (including accumulation order) that the
compiled kernels in ``_kernels_ext`` reproduce bit for bit.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    """Unfold a padded batch ``(N, C, Hp, Wp)`` into rows of receptive fields.

    Returns a float32 array ``(N*Ho*Wo, C*kh*kw)``; row order is (n, ho, wo)
    and column order is (c, i, j).
    """
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * ho * wo, c * kh * kw)


def col2im(cols, shape, kh, kw, stride):
    """Adjoint of :func:`im2col`: scatter-add columns back into a padded batch."""
    n, c, hp, wp = shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += blocks[:, :, i, j]
    return out


def maxpool_forward(x, pool):
    """Non-overlapping max pool; ties resolve to the first element in scan order.

    Returns the pooled batch and the flat in-window argmax per output cell.
    """
    n, c, h, w = x.shape
    ho, wo = h // pool, w // pool
    xs = x[:, :, :ho * pool, :wo * pool].reshape(n, c, ho, pool, wo, pool)
    xs = xs.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, pool * pool)
    arg = xs.argmax(axis=-1)
    out = np.take_along_axis(xs, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int32)


def maxpool_backward(dout, arg, shape, pool):
    n, c, h, w = shape
    ho, wo = dout.shape[2], dout.shape[3]
    grid = np.zeros((n, c, ho, wo, pool * pool), dtype=dout.dtype)
    np.put_along_axis(grid, arg[..., None].astype(np.intp), dout[..., None], axis=-1)
    grid = grid.reshape(n, c, ho, wo, pool, pool).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, :ho * pool, :wo * pool] = grid.reshape(n, c, ho * pool, wo * pool)
    return dx
