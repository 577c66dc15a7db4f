"""Pure NumPy depthwise convolution kernels.

Both kernels take an input that is already padded and produce the "valid"
output. Accumulation order per output element is: bias first, then taps in
row-major kernel order. The compiled kernels follow the same order so both
backends agree bit-for-bit.
"""

import numpy as np

NAME = "python"


def dwconv2d_valid(xpad, kernel, bias):
    """Depthwise 2D convolution over a padded (T, H+kh-1, W+kw-1, C) grid.

    ``kernel`` is (C, kh, kw); ``bias`` is (C,).
    """
    c, kh, kw = kernel.shape
    t, hp, wp, _ = xpad.shape
    h, w = hp - kh + 1, wp - kw + 1
    out = np.empty((t, h, w, c), dtype=np.float32)
    out[...] = bias
    taps = np.ascontiguousarray(kernel.transpose(1, 2, 0))
    for a in range(kh):
        for b in range(kw):
            out += taps[a, b] * xpad[:, a:a + h, b:b + w, :]
    return out


def dwconv1d_valid(lines, kernel, bias):
    """Depthwise 1D convolution along axis 1 of a padded (M, T+kt-1, C) array.

    ``lines`` is temporal-major: one row per spatial position.
    ``kernel`` is (C, kt); ``bias`` is (C,).
    """
    c, kt = kernel.shape
    m, tp, _ = lines.shape
    t = tp - kt + 1
    out = np.empty((m, t, c), dtype=np.float32)
    out[...] = bias
    taps = np.ascontiguousarray(kernel.T)
    for a in range(kt):
        out += taps[a] * lines[:, a:a + t, :]
    return out
