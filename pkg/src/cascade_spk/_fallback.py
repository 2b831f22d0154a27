"""Pure-Python versions of the compiled kernels in ``_kernels.pyx``.

Same algorithms and operation order, so both back ends agree to rounding.
"""

import math

import numpy as np


def _off_norm(a):
    # sequential row-major sum (cumsum) to round exactly like the compiled loop
    sq = a * a
    np.fill_diagonal(sq, 0.0)
    return math.sqrt(float(np.cumsum(sq.ravel())[-1])) if sq.size else 0.0


def jacobi_eigh(a_in, tol, max_sweeps):
    a = np.array(a_in, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    sweep = 0
    off = _off_norm(a)
    while off >= tol and sweep < max_sweeps:
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                h = a[q, q] - a[p, p]
                if abs(h) + 1e100 * abs(apq) == abs(h):
                    # apq negligible: t = 1/(2 theta) without overflow
                    t = apq / h
                else:
                    theta = h / (2.0 * apq)
                    if theta >= 0:
                        t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                    else:
                        t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                new_p = c * col_p - s * col_q
                new_q = s * col_p + c * col_q
                a[:, p] = new_p
                a[p, :] = new_p
                a[:, q] = new_q
                a[q, :] = new_q
                a[p, p] = col_p[p] - t * apq
                a[q, q] = col_q[q] + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        sweep += 1
        off = _off_norm(a)
    return np.diag(a).copy(), v, sweep, off


def lloyd(points, init_centers, max_iter):
    points = np.asarray(points, dtype=np.float64)
    centers = np.array(init_centers, dtype=np.float64, copy=True)
    n = points.shape[0]
    k = centers.shape[0]
    labels = np.full(n, -1, dtype=np.intp)
    inertia = 0.0
    it = 0
    changed = True
    while changed and it < max_iter:
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), new].sum())
        changed = bool(np.any(new != labels))
        labels = new
        it += 1
        if not changed:
            break
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = points[members].mean(axis=0)
    return labels.astype(np.intp), centers, inertia, it
