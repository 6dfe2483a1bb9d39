"""Layer primitives with explicit forward and backward passes.

Tensors are channels-last: images are (B, H, W, C). Every ``*_forward``
returns ``(output, cache)`` and the matching ``*_backward`` consumes the
upstream gradient and that cache.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv_forward(x, W, b, stride=1, pad=0):
    """x (B, H, W, Cin), W (k, k, Cin, Cout), b (Cout,)."""
    B, H, Wd, C = x.shape
    k = W.shape[0]
    Ho = conv_output_size(H, k, stride, pad)
    Wo = conv_output_size(Wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, H', W', C, k, k)
    win = win[:, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, k * k * C)
    y = cols @ W.reshape(-1, W.shape[-1]) + b
    return y.reshape(B, Ho, Wo, -1), (x.shape, cols, W, stride, pad)


def conv_backward(dy, cache, need_dx=True):
    """Returns (dx, dW, db); dx is None when ``need_dx`` is false."""
    xshape, cols, W, stride, pad = cache
    B, H, Wd, C = xshape
    k, cout = W.shape[0], W.shape[-1]
    _, Ho, Wo, _ = dy.shape
    dy2 = dy.reshape(-1, cout)
    dW = (cols.T @ dy2).reshape(W.shape)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, dW, db
    if stride == 1 and pad <= k - 1:
        # correlation of dy with the spatially flipped, channel-swapped kernel
        Wf = W[::-1, ::-1].transpose(0, 1, 3, 2)
        dx, _ = conv_forward(dy, Wf, np.zeros(C, dtype=dy.dtype), 1, k - 1 - pad)
        return dx, dW, db
    dcols = (dy2 @ W.reshape(-1, cout).T).reshape(B, Ho, Wo, k, k, C)
    dxp = np.zeros((B, H + 2 * pad, Wd + 2 * pad, C), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, :, :, i, j]
    dx = dxp[:, pad : pad + H, pad : pad + Wd] if pad else dxp
    return dx, dW, db


def pool_forward(x, size=2, mode="max"):
    """Non-overlapping pooling (stride = size); trailing rows/cols that do not
    fill a window are dropped."""
    B, H, W, C = x.shape
    Ho, Wo = H // size, W // size
    xr = x[:, : Ho * size, : Wo * size].reshape(B, Ho, size, Wo, size, C)
    xr = xr.transpose(0, 1, 3, 5, 2, 4).reshape(B, Ho, Wo, C, size * size)
    if mode == "max":
        idx = xr.argmax(axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    else:
        idx = None
        y = xr.mean(axis=-1)
    return y, (x.shape, idx, size, mode)


def pool_backward(dy, cache):
    xshape, idx, size, mode = cache
    B, H, W, C = xshape
    Ho, Wo = dy.shape[1], dy.shape[2]
    if mode == "max":
        g = np.zeros(dy.shape + (size * size,), dtype=dy.dtype)
        np.put_along_axis(g, idx[..., None], dy[..., None], axis=-1)
    else:
        g = np.repeat(dy[..., None] / (size * size), size * size, axis=-1)
    g = g.reshape(B, Ho, Wo, C, size, size).transpose(0, 1, 4, 2, 5, 3).reshape(B, Ho * size, Wo * size, C)
    dx = np.zeros(xshape, dtype=dy.dtype)
    dx[:, : Ho * size, : Wo * size] = g
    return dx


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def dense_forward(x, W, b):
    return x @ W + b, (x, W)


def dense_backward(dy, cache):
    x, W = cache
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)
