"""Pure-numpy im2col/col2im, used when the compiled core is unavailable.

Column layout (shared with ``_im2col_c``): row index ``(c * kh + i) * kw + j``,
column index ``(n * oh + y) * ow + x``. Both backends accumulate col2im
contributions in the same (i, j) order so results are bit-identical.
"""

import numpy as np


def im2col(x, kh, kw, stride, pad, dil, oh, ow):
    n, c, h, w = x.shape
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    hspan = stride * (oh - 1) + 1
    wspan = stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i * dil:i * dil + hspan:stride, j * dil:j * dil + wspan:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def col2im(cols, n, c, h, w, kh, kw, stride, pad, dil, oh, ow):
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(c, kh, kw, n, oh, ow)
    hspan = stride * (oh - 1) + 1
    wspan = stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i * dil:i * dil + hspan:stride, j * dil:j * dil + wspan:stride] += (
                cols6[:, i, j].transpose(1, 0, 2, 3)
            )
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp
