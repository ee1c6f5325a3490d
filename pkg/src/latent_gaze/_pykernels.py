"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` must agree with them
(bit-exactly for the warp, to float32 rounding for inference).
"""

import math

import numpy as np

from .geometry import circle_mask


def warp_into(src, params, gain, out):
    """Nearest-neighbour shift/scale/mirror resample of each ``src[i]`` into ``out[i]``.

    ``params[i] = (shift_y, shift_x, scale, flip)``.  Samples that land outside
    the source are zero, and the output's circular aperture is enforced.
    """
    B, H, W = src.shape
    S = out.shape[1]
    co = (S - 1) / 2.0
    cr = (H - 1) / 2.0
    cc = (W - 1) / 2.0
    grid = np.arange(S, dtype=np.float64) - co
    inside = circle_mask(S, S / 2.0)
    for i in range(B):
        ty, tx, s, flip = params[i]
        rows = np.floor(cr + ty + grid / s + 0.5).astype(np.intp)
        cgrid = -grid if flip != 0 else grid
        cols = np.floor(cc + tx + cgrid / s + 0.5).astype(np.intp)
        rv = (rows >= 0) & (rows < H)
        cv = (cols >= 0) & (cols < W)
        img = src[i][np.clip(rows, 0, H - 1)[:, None], np.clip(cols, 0, W - 1)[None, :]]
        img = (img.astype(np.float64) * gain).astype(np.float32)
        img[~(rv[:, None] & cv[None, :] & inside)] = 0.0
        out[i] = img
    return out


class InferenceEngine:
    """Single-sample deployment path: normalize, decode, threshold."""

    def __init__(self, packed):
        self.p = packed
        self.act = packed.activation

    def _act(self, x):
        if self.act == 0:
            return np.maximum(x, 0)
        return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x ** 3)))

    @staticmethod
    def _ln(x, scale, shift, eps):
        m = x.mean()
        xc = x - m
        return xc / np.sqrt((xc * xc).mean() + eps) * scale + shift

    def infer(self, y, gaze_out=None):
        p = self.p
        z = (y - p.mean) * p.inv_std
        z = self._ln(z, p.in_scale, p.in_shift, p.eps)
        a = self._act(p.W_up @ z + p.b_up)
        a = self._act(p.W_up2 @ a + p.b_up2)
        r = self._ln(a, p.res_scale, p.res_shift, p.eps)
        r = self._act(p.W_r1 @ r + p.b_r1)
        a = a + (p.W_r2 @ r + p.b_r2)
        h = self._act(p.W_pre @ a + p.b_pre)
        g = p.W_g @ h + p.b_g
        logit = float(p.W_v[0] @ h + p.b_v[0])
        n = float(np.sqrt(g @ g))
        if gaze_out is None:
            gaze_out = np.empty(3, np.float32)
        if n > 0:
            gaze_out[:] = g / n
        else:
            gaze_out[:] = 0.0
        if logit >= 0:
            return 1.0 / (1.0 + math.exp(-logit))
        e = math.exp(logit)
        return e / (1.0 + e)
