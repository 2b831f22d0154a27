# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: cyclic Jacobi eigensolver and Lloyd k-means."""

import numpy as np
from libc.math cimport sqrt, fabs


cdef double _off_norm(double[:, ::1] a, Py_ssize_t n) nogil:
    cdef double s = 0.0
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(n):
            if i != j:
                s += a[i, j] * a[i, j]
    return sqrt(s)


def jacobi_eigh(double[:, ::1] a_in, double tol, int max_sweeps):
    """Return (diag, V, sweeps, off) for a symmetric matrix.

    Eigenvalues are left unsorted; the caller orders them.
    """
    cdef Py_ssize_t n = a_in.shape[0]
    a_np = np.array(a_in, dtype=np.float64, copy=True)
    v_np = np.eye(n, dtype=np.float64)
    cdef double[:, ::1] a = a_np
    cdef double[:, ::1] v = v_np
    cdef Py_ssize_t p, q, k
    cdef double apq, h, theta, t, c, s, akp, akq, vkp, vkq, off
    cdef int sweep = 0
    with nogil:
        off = _off_norm(a, n)
        while off >= tol and sweep < max_sweeps:
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    h = a[q, q] - a[p, p]
                    if fabs(h) + 1e100 * fabs(apq) == fabs(h):
                        t = apq / h
                    else:
                        theta = h / (2.0 * apq)
                        if theta >= 0:
                            t = 1.0 / (theta + sqrt(theta * theta + 1.0))
                        else:
                            t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
                    c = 1.0 / sqrt(t * t + 1.0)
                    s = t * c
                    for k in range(n):
                        if k != p and k != q:
                            akp = a[k, p]
                            akq = a[k, q]
                            a[k, p] = c * akp - s * akq
                            a[p, k] = a[k, p]
                            a[k, q] = s * akp + c * akq
                            a[q, k] = a[k, q]
                    a[p, p] = a[p, p] - t * apq
                    a[q, q] = a[q, q] + t * apq
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    for k in range(n):
                        vkp = v[k, p]
                        vkq = v[k, q]
                        v[k, p] = c * vkp - s * vkq
                        v[k, q] = s * vkp + c * vkq
            sweep += 1
            off = _off_norm(a, n)
    return np.diag(a_np).copy(), v_np, sweep, off


def lloyd(double[:, ::1] points, double[:, ::1] init_centers, int max_iter):
    """Lloyd iterations from fixed initial centers.

    Returns (labels, centers, inertia, iterations). An emptied cluster keeps
    its previous center.
    """
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t d = points.shape[1]
    cdef Py_ssize_t k = init_centers.shape[0]
    centers_np = np.array(init_centers, dtype=np.float64, copy=True)
    labels_np = np.full(n, -1, dtype=np.intp)
    sums_np = np.zeros((k, d), dtype=np.float64)
    counts_np = np.zeros(k, dtype=np.intp)
    cdef double[:, ::1] centers = centers_np
    cdef Py_ssize_t[::1] labels = labels_np
    cdef double[:, ::1] sums = sums_np
    cdef Py_ssize_t[::1] counts = counts_np
    cdef Py_ssize_t i, j, c, best
    cdef double dist, diff, best_dist, inertia = 0.0
    cdef int it = 0
    cdef bint changed = True
    with nogil:
        while changed and it < max_iter:
            changed = False
            inertia = 0.0
            for i in range(n):
                best = 0
                best_dist = -1.0
                for c in range(k):
                    dist = 0.0
                    for j in range(d):
                        diff = points[i, j] - centers[c, j]
                        dist = dist + diff * diff
                    if best_dist < 0 or dist < best_dist:
                        best_dist = dist
                        best = c
                inertia = inertia + best_dist
                if labels[i] != best:
                    labels[i] = best
                    changed = True
            it += 1
            if not changed:
                break
            for c in range(k):
                counts[c] = 0
                for j in range(d):
                    sums[c, j] = 0.0
            for i in range(n):
                c = labels[i]
                counts[c] += 1
                for j in range(d):
                    sums[c, j] = sums[c, j] + points[i, j]
            for c in range(k):
                if counts[c] > 0:
                    for j in range(d):
                        centers[c, j] = sums[c, j] / counts[c]
    return labels_np, centers_np, inertia, it
