"""Compiled sweep kernel for the DPP solver.

The arithmetic mirrors :func:`pmvlab.fields.apply_weights`,
:func:`pmvlab.fields.sample_mean` and :func:`pmvlab.operators.combine`
operation by operation, so results agree bit for bit with the vectorized
path. Without numba the solver falls back to that path.
"""

import math

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None


def _sweep(u, idx, w, const, plus, alpha, beta, n_mean, out, kbest):
    n, _, nc, ns, nk = idx.shape
    for i in range(n):
        best = np.inf if plus[i] else -np.inf
        bk = 0
        for k in range(nc):
            ext = -np.inf if plus[i] else np.inf
            for s in range(ns):
                v = w[i, 0, k, s, 0] * u[idx[i, 0, k, s, 0]]
                for q in range(1, nk):
                    v = v + w[i, 0, k, s, q] * u[idx[i, 0, k, s, q]]
                v = v + const[i, 0, k, s]
                if plus[i]:
                    if v > ext:
                        ext = v
                elif v < ext:
                    ext = v
            vmax = -np.inf
            vmin = np.inf
            acc = 0.0
            for s in range(ns):
                v = w[i, 1, k, s, 0] * u[idx[i, 1, k, s, 0]]
                for q in range(1, nk):
                    v = v + w[i, 1, k, s, q] * u[idx[i, 1, k, s, q]]
                v = v + const[i, 1, k, s]
                if v > vmax:
                    vmax = v
                if v < vmin:
                    vmin = v
                if s < n_mean:
                    acc = acc + v
            mean = acc / n_mean
            mid = 0.5 * vmax + 0.5 * vmin
            mr = beta * mid + (1.0 - beta) * mean
            obj = alpha * ext + (1.0 - alpha) * mr
            if plus[i]:
                if obj < best:
                    best = obj
                    bk = k
            elif obj > best:
                best = obj
                bk = k
        out[i] = best
        kbest[i] = bk


if numba is not None:
    sweep_kernel = numba.njit(cache=True, nogil=True)(_sweep)
else:  # pragma: no cover
    sweep_kernel = None


# The interpolation below is written out in both kernels: a jitted helper
# taking array arguments costs about 100 ns per call in reference counting.
# Weights and summation order are those of
# :func:`pmvlab.fields.interpolation_weights` and :func:`pmvlab.fields.apply_weights`.


def _interp_eval(values, lower, h, counts, strides, pts, ins, gvals, add_const, out):
    """Multilinear interpolation at ``pts``; exterior rows (``ins`` false) give ``gvals``.

    Returns the index of the first interior point outside the grid hull, or -1.
    """
    n_pts, d = pts.shape
    t = np.empty(d)
    base = np.empty(d, dtype=np.int64)
    n_corners = 1 << d
    for n in range(n_pts):
        if not ins[n]:
            acc = 0.0 * values[0]
            for c in range(1, n_corners):
                acc = acc + 0.0 * values[0]
            out[n] = acc + gvals[n]
            continue
        for k in range(d):
            sk = (pts[n, k] - lower[k]) / h
            snapped = np.rint(sk)
            if abs(sk - snapped) < 1e-10:
                sk = snapped
            if sk < 0.0 or sk > counts[k] - 1:
                return n
            b = int(math.floor(sk))
            if b > counts[k] - 2:
                b = counts[k] - 2
            base[k] = b
            t[k] = sk - b
        if d == 1:
            b0 = base[0]
            acc = (1.0 - t[0]) * values[b0]
            acc = acc + t[0] * values[b0 + 1]
        elif d == 2:
            t0 = t[0]
            t1 = t[1]
            f = base[0] * strides[0] + base[1]
            st = strides[0]
            acc = ((1.0 - t0) * (1.0 - t1)) * values[f]
            acc = acc + ((1.0 - t0) * t1) * values[f + 1]
            acc = acc + (t0 * (1.0 - t1)) * values[f + st]
            acc = acc + (t0 * t1) * values[f + st + 1]
        else:
            acc = 0.0
            for c in range(n_corners):
                wgt = 1.0
                flat = 0
                for k in range(d):
                    bit = (c >> (d - 1 - k)) & 1
                    if bit == 1:
                        wgt = wgt * t[k]
                    else:
                        wgt = wgt * (1.0 - t[k])
                    flat += (base[k] + bit) * strides[k]
                if c == 0:
                    acc = wgt * values[flat]
                else:
                    acc = acc + wgt * values[flat]
        out[n] = acc + gvals[n] if add_const else acc
    return -1


def _ball_stats(values, lower, h, counts, strides, X, radii, spts, n_mean, inner,
                smax, smin, smean):
    """Max, min and sample mean of the interpolant over the balls ``B(X[i], radii[j])``.

    Only entries with ``inner[i, j]`` are filled. Points are formed as
    ``X[i] + radii[j] * spts[s]`` and the mean is the left-to-right sum of the
    first ``n_mean`` values over ``n_mean``, as in
    :func:`pmvlab.fields.sample_mean`. Returns -1, or the flat index
    ``i * n_balls + j`` of a ball that left the grid hull.
    """
    n, nb = inner.shape
    ns, d = spts.shape
    t = np.empty(d)
    base = np.empty(d, dtype=np.int64)
    n_corners = 1 << d
    for i in range(n):
        for j in range(nb):
            if not inner[i, j]:
                continue
            r = radii[j]
            vmax = -np.inf
            vmin = np.inf
            total = 0.0
            for s in range(ns):
                if d == 1:
                    s0 = (X[i, 0] + r * spts[s, 0] - lower[0]) / h
                    q = np.rint(s0)
                    if abs(s0 - q) < 1e-10:
                        s0 = q
                    if s0 < 0.0 or s0 > counts[0] - 1:
                        return i * nb + j
                    b0 = int(math.floor(s0))
                    if b0 > counts[0] - 2:
                        b0 = counts[0] - 2
                    t0 = s0 - b0
                    acc = (1.0 - t0) * values[b0]
                    acc = acc + t0 * values[b0 + 1]
                elif d == 2:
                    s0 = (X[i, 0] + r * spts[s, 0] - lower[0]) / h
                    q = np.rint(s0)
                    if abs(s0 - q) < 1e-10:
                        s0 = q
                    s1 = (X[i, 1] + r * spts[s, 1] - lower[1]) / h
                    q = np.rint(s1)
                    if abs(s1 - q) < 1e-10:
                        s1 = q
                    if s0 < 0.0 or s0 > counts[0] - 1 or s1 < 0.0 or s1 > counts[1] - 1:
                        return i * nb + j
                    b0 = int(math.floor(s0))
                    if b0 > counts[0] - 2:
                        b0 = counts[0] - 2
                    b1 = int(math.floor(s1))
                    if b1 > counts[1] - 2:
                        b1 = counts[1] - 2
                    t0 = s0 - b0
                    t1 = s1 - b1
                    f = b0 * strides[0] + b1
                    st = strides[0]
                    acc = ((1.0 - t0) * (1.0 - t1)) * values[f]
                    acc = acc + ((1.0 - t0) * t1) * values[f + 1]
                    acc = acc + (t0 * (1.0 - t1)) * values[f + st]
                    acc = acc + (t0 * t1) * values[f + st + 1]
                else:
                    for k in range(d):
                        sk = (X[i, k] + r * spts[s, k] - lower[k]) / h
                        snapped = np.rint(sk)
                        if abs(sk - snapped) < 1e-10:
                            sk = snapped
                        if sk < 0.0 or sk > counts[k] - 1:
                            return i * nb + j
                        b = int(math.floor(sk))
                        if b > counts[k] - 2:
                            b = counts[k] - 2
                        base[k] = b
                        t[k] = sk - b
                    acc = 0.0
                    for c in range(n_corners):
                        wgt = 1.0
                        flat = 0
                        for k in range(d):
                            bit = (c >> (d - 1 - k)) & 1
                            if bit == 1:
                                wgt = wgt * t[k]
                            else:
                                wgt = wgt * (1.0 - t[k])
                            flat += (base[k] + bit) * strides[k]
                        if c == 0:
                            acc = wgt * values[flat]
                        else:
                            acc = acc + wgt * values[flat]
                if acc > vmax:
                    vmax = acc
                if acc < vmin:
                    vmin = acc
                if s == 0:
                    total = acc
                elif s < n_mean:
                    total = total + acc
            smax[i, j] = vmax
            smin[i, j] = vmin
            smean[i, j] = total / n_mean
    return -1


if numba is not None:
    interp_kernel = numba.njit(cache=True, nogil=True)(_interp_eval)
    ball_stats_kernel = numba.njit(cache=True, nogil=True)(_ball_stats)
else:  # pragma: no cover
    interp_kernel = None
    ball_stats_kernel = None
