"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np

def dwconv3x3(x, k):
    """Per-channel 3x3 correlation with edge-replicated borders."""
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros((C, H, W))
    for di in range(3):
        for dj in range(3):
            out += k[:, di, dj, None, None] * xp[:, di:di + H, dj:dj + W]
    return out


def dwconv3x3_backward(g, k):
    """Adjoint of :func:`dwconv3x3` with respect to its input."""
    C, H, W = g.shape
    gp = np.zeros((C, H + 2, W + 2))
    for di in range(3):
        for dj in range(3):
            gp[:, di:di + H, dj:dj + W] += k[:, di, dj, None, None] * g
    # fold the replicated border back onto the edge pixels
    gp[:, 1, :] += gp[:, 0, :]
    gp[:, H, :] += gp[:, H + 1, :]
    gp[:, :, 1] += gp[:, :, 0]
    gp[:, :, W] += gp[:, :, W + 1]
    return gp[:, 1:H + 1, 1:W + 1].copy()


def smooth_leaky(x, slope):
    """Return (y, dy/dx) for y = slope*x + (1-slope)*(x + sqrt(x*x + 1) - 1)/2."""
    a = 0.5 * (1.0 - slope)
    r = np.sqrt(x * x + 1.0)
    return slope * x + a * (x + r - 1.0), slope + a * (1.0 + x / r)


def modconv_forward(x, scale, shift, k, field, mix, bias, gain, slope):
    """Fused modulate, depthwise 3x3, channel mix, bias and activation.

    Returns the activation and its derivative (both already scaled by gain).
    """
    C, H, W = x.shape
    t = dwconv3x3(x, k) * scale[:, None, None] + shift[:, None, None] * field
    z = (mix @ t.reshape(C, H * W)).reshape(mix.shape[0], H, W) + bias
    y, d = smooth_leaky(z, slope)
    return gain * y, gain * d


def modconv_backward(g, x, scale, k, field, mix, d):
    """Gradients of :func:`modconv_forward` w.r.t. x, scale and shift."""
    O, H, W = g.shape
    C = x.shape[0]
    gt = (mix.T @ (g * d).reshape(O, H * W)).reshape(C, H, W)
    gx = dwconv3x3_backward(gt, k)
    gscale = np.einsum("chw,chw->c", gx, x)
    gshift = np.einsum("chw,chw->c", gt, field)
    return gx * scale[:, None, None], gscale, gshift
