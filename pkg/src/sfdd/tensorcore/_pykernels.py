"""Pure-numpy kernels. Same contract as the compiled ``_ckernels`` module."""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col3x3(x):
    """(N, C, H, W) -> (N, C*9, H*W) patch columns for a 3x3 window, stride 1, zero pad 1."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, (n, c, 3, 3, h, w), (s0, s1, s2, s3, s2, s3), writeable=False)
    return win.reshape(n, c * 9, h * w)


def avgpool2x2(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    v = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2)
    return (v[:, :, :, 0, :, 0] + v[:, :, :, 0, :, 1] + v[:, :, :, 1, :, 0] + v[:, :, :, 1, :, 1]) * x.dtype.type(0.25)


def avgpool2x2_adjoint(g, h, w):
    n, c, h2, w2 = g.shape
    out = np.zeros((n, c, h, w), dtype=g.dtype)
    q = g * g.dtype.type(0.25)
    for dy in (0, 1):
        for dx in (0, 1):
            out[:, :, dy: 2 * h2: 2, dx: 2 * w2: 2] = q
    return out


def instance_norm_fwd(x, eps):
    """Per (sample, channel) plane: y = (x - mean) / sqrt(var + eps). Returns (y, inv_std)."""
    h, w = x.shape[2], x.shape[3]
    mu = x.sum(axis=(2, 3), dtype=np.float64, keepdims=True) / (h * w)
    xc = x - mu.astype(x.dtype)
    var = np.square(xc, dtype=np.float64).sum(axis=(2, 3), keepdims=True) / (h * w)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    return xc * inv, inv


def instance_norm_bwd(g, y, inv):
    """Adjoint of ``instance_norm_fwd``: (g - mean(g) - y * mean(g * y)) * inv_std."""
    hw = g.shape[2] * g.shape[3]
    gm = (g.sum(axis=(2, 3), dtype=np.float64, keepdims=True) / hw).astype(g.dtype)
    gy = (np.einsum("nchw,nchw->nc", g, y, dtype=np.float64)[:, :, None, None] / hw).astype(g.dtype)
    return (g - gm - y * gy) * inv
