"""Pure-numpy reference implementations of the hot kernels.

Used when the compiled core is unavailable (or forced via
PROTOPOSE_KERNELS=python). Semantics must match `_core.pyx`; the compiled
path may differ in the last ulp because libm and numpy vectorize exp
differently.
"""

from __future__ import annotations

import numpy as np


def encode_gaussians(xs, ys, visible, H, W, sigma):
    """Render one unnormalized Gaussian per visible joint.

    The Gaussian is centered at the continuous keypoint location, truncated
    to a (6*sigma+1)-wide window around the nearest in-grid pixel, and scaled
    so that pixel is exactly 1.0. Invisible joints give all-zero channels.
    """
    J = xs.shape[0]
    out = np.zeros((J, H, W), dtype=np.float64)
    r = int(np.floor(3.0 * sigma + 0.5))
    denom = 2.0 * sigma * sigma
    for j in range(J):
        if not visible[j]:
            continue
        x0 = xs[j]
        y0 = ys[j]
        mx = min(max(int(np.floor(x0 + 0.5)), 0), W - 1)
        my = min(max(int(np.floor(y0 + 0.5)), 0), H - 1)
        xlo = max(mx - r, 0)
        xhi = min(mx + r, W - 1)
        ylo = max(my - r, 0)
        yhi = min(my + r, H - 1)
        gx = np.exp(-((np.arange(xlo, xhi + 1, dtype=np.float64) - x0) ** 2) / denom)
        gy = np.exp(-((np.arange(ylo, yhi + 1, dtype=np.float64) - y0) ** 2) / denom)
        # Normalizing each axis by its own value at the peak pixel makes the
        # peak exactly 1.0 (x/x == 1.0 in floating point).
        gx /= gx[mx - xlo]
        gy /= gy[my - ylo]
        out[j, ylo : yhi + 1, xlo : xhi + 1] = np.outer(gy, gx)
    return out


def decode_peaks(hm):
    """Per-channel argmax (row-major tie break) plus quarter-pixel refinement.

    The 0.25 px shift moves toward the larger axis neighbor and is skipped at
    the border where one neighbor is missing.
    """
    J, H, W = hm.shape
    flat = hm.reshape(J, H * W)
    idx = np.argmax(flat, axis=1)
    ys = (idx // W).astype(np.float64)
    xs = (idx % W).astype(np.float64)
    conf = flat[np.arange(J), idx].copy()
    for j in range(J):
        x = int(xs[j])
        y = int(ys[j])
        if 0 < x < W - 1:
            d = hm[j, y, x + 1] - hm[j, y, x - 1]
            if d > 0.0:
                xs[j] += 0.25
            elif d < 0.0:
                xs[j] -= 0.25
        if 0 < y < H - 1:
            d = hm[j, y + 1, x] - hm[j, y - 1, x]
            if d > 0.0:
                ys[j] += 0.25
            elif d < 0.0:
                ys[j] -= 0.25
    return xs, ys, conf


def sinkhorn(logits, kappa, iters, tol):
    """Balanced Sinkhorn scaling of exp(logits/kappa).

    Column marginals are driven to 1 and row marginals to N/M. Each column's
    max is subtracted before exponentiation; fully underflowed entries are
    floored at 1e-300 so the equipartition rescale never divides by zero.
    tol <= 0 runs exactly `iters` sweeps; otherwise sweeps stop early once
    the row-marginal violation falls below tol (column sums are exact by
    construction at the end of a sweep).
    """
    S = logits / kappa
    S = S - S.max(axis=0, keepdims=True)
    Q = np.exp(S)
    np.maximum(Q, 1e-300, out=Q)
    M, N = Q.shape
    r = N / M
    it = 0
    for it in range(1, iters + 1):
        Q *= (r / Q.sum(axis=1))[:, None]
        Q /= Q.sum(axis=0)[None, :]
        if tol > 0.0 and np.abs(Q.sum(axis=1) - r).max() < tol:
            break
    return Q, it
