"""Pure-numpy reference versions of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature
and bit-identical results. ``sptlab.kernels`` picks one at import time.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp, kh, kw, stride):
    """Unfold a padded NCHW batch into a (N*Ho*Wo, C*kh*kw) patch matrix."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n * ho * wo, c * kh * kw)


def col2im(cols, n, c, hp, wp, kh, kw, stride):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the padded input."""
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    dcols = cols.reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dx


def maxpool_forward(x, window, stride):
    """Windowed max with implicit -inf padding on the right/bottom edge.

    Returns the pooled array and, per output cell, the flat (row-major)
    index inside the input plane of the first maximal element.
    """
    n, c, h, w = x.shape
    ho = (h - window + stride - 1) // stride + 1
    wo = (w - window + stride - 1) // stride + 1
    hp = (ho - 1) * stride + window
    wp = (wo - 1) * stride + window
    if hp != h or wp != w:
        xp = np.full((n, c, hp, wp), -np.inf)
        xp[:, :, :h, :w] = x
    else:
        xp = np.ascontiguousarray(x)
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, ho, wo, window, window),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    ).reshape(n, c, ho, wo, window * window)
    local = view.argmax(axis=-1)
    out = np.take_along_axis(view, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, window)
    rows = np.arange(ho)[:, None] * stride + di
    cols = np.arange(wo)[None, :] * stride + dj
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool_backward(dout, argidx, h, w):
    """Route each output gradient to its recorded argmax position."""
    n, c = dout.shape[:2]
    planes = n * c
    flat_idx = argidx.reshape(planes, -1) + (np.arange(planes) * (h * w))[:, None]
    dx = np.bincount(flat_idx.ravel(), weights=dout.ravel(), minlength=planes * h * w)
    return dx.reshape(n, c, h, w)
