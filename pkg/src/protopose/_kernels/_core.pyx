# Compiled kernel core. Mirrors _fallback.py; keep the two in lockstep.

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, floor

cnp.import_array()


def encode_gaussians(cnp.ndarray[cnp.float64_t, ndim=1] xs,
                     cnp.ndarray[cnp.float64_t, ndim=1] ys,
                     cnp.ndarray[cnp.uint8_t, ndim=1] visible,
                     int H, int W, double sigma):
    cdef int J = xs.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.zeros((J, H, W), dtype=np.float64)
    cdef int r = <int>floor(3.0 * sigma + 0.5)
    cdef double denom = 2.0 * sigma * sigma
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gx = np.empty(2 * r + 1, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gy = np.empty(2 * r + 1, dtype=np.float64)
    cdef int j, mx, my, xlo, xhi, ylo, yhi, px, py
    cdef double x0, y0, gpx, gpy
    for j in range(J):
        if visible[j] == 0:
            continue
        x0 = xs[j]
        y0 = ys[j]
        mx = <int>floor(x0 + 0.5)
        my = <int>floor(y0 + 0.5)
        if mx < 0:
            mx = 0
        if mx > W - 1:
            mx = W - 1
        if my < 0:
            my = 0
        if my > H - 1:
            my = H - 1
        xlo = mx - r if mx - r > 0 else 0
        xhi = mx + r if mx + r < W - 1 else W - 1
        ylo = my - r if my - r > 0 else 0
        yhi = my + r if my + r < H - 1 else H - 1
        # Separable Gaussian, each axis normalized by its value at the peak
        # pixel: the peak is exactly 1.0 (x/x == 1.0 in floating point).
        for px in range(xlo, xhi + 1):
            gx[px - xlo] = exp(-((px - x0) * (px - x0)) / denom)
        for py in range(ylo, yhi + 1):
            gy[py - ylo] = exp(-((py - y0) * (py - y0)) / denom)
        gpx = gx[mx - xlo]
        for px in range(xlo, xhi + 1):
            gx[px - xlo] /= gpx
        gpy = gy[my - ylo]
        for py in range(ylo, yhi + 1):
            gy[py - ylo] /= gpy
        for py in range(ylo, yhi + 1):
            for px in range(xlo, xhi + 1):
                out[j, py, px] = gy[py - ylo] * gx[px - xlo]
    return out


def decode_peaks(cnp.ndarray[cnp.float64_t, ndim=3] hm):
    cdef int J = hm.shape[0]
    cdef int H = hm.shape[1]
    cdef int W = hm.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xs = np.zeros(J, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ys = np.zeros(J, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] conf = np.zeros(J, dtype=np.float64)
    cdef int j, y, x, by, bx
    cdef double best, v, d
    for j in range(J):
        best = hm[j, 0, 0]
        by = 0
        bx = 0
        for y in range(H):
            for x in range(W):
                v = hm[j, y, x]
                if v > best:
                    best = v
                    by = y
                    bx = x
        conf[j] = best
        xs[j] = bx
        ys[j] = by
        if 0 < bx < W - 1:
            d = hm[j, by, bx + 1] - hm[j, by, bx - 1]
            if d > 0.0:
                xs[j] = bx + 0.25
            elif d < 0.0:
                xs[j] = bx - 0.25
        if 0 < by < H - 1:
            d = hm[j, by + 1, bx] - hm[j, by - 1, bx]
            if d > 0.0:
                ys[j] = by + 0.25
            elif d < 0.0:
                ys[j] = by - 0.25
    return xs, ys, conf


def sinkhorn(cnp.ndarray[cnp.float64_t, ndim=2] logits, double kappa, int iters, double tol):
    cdef int M = logits.shape[0]
    cdef int N = logits.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Q = np.empty((M, N), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] rowsum = np.empty(M, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] colsum = np.empty(N, dtype=np.float64)
    cdef double r = (<double>N) / (<double>M)
    cdef int m, n, it, done
    cdef double cmax, v, viol, s
    for n in range(N):
        cmax = logits[0, n]
        for m in range(1, M):
            if logits[m, n] > cmax:
                cmax = logits[m, n]
        cmax = cmax / kappa
        for m in range(M):
            v = exp(logits[m, n] / kappa - cmax)
            if v < 1e-300:
                v = 1e-300
            Q[m, n] = v
    it = 0
    for it in range(1, iters + 1):
        for m in range(M):
            s = 0.0
            for n in range(N):
                s += Q[m, n]
            rowsum[m] = s
        for m in range(M):
            s = r / rowsum[m]
            for n in range(N):
                Q[m, n] *= s
        for n in range(N):
            s = 0.0
            for m in range(M):
                s += Q[m, n]
            colsum[n] = s
        for n in range(N):
            s = colsum[n]
            for m in range(M):
                Q[m, n] /= s
        if tol > 0.0:
            viol = 0.0
            for m in range(M):
                s = 0.0
                for n in range(N):
                    s += Q[m, n]
                v = s - r
                if v < 0.0:
                    v = -v
                if v > viol:
                    viol = v
            if viol < tol:
                break
    return Q, it
