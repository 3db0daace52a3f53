# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pixel kernels. Semantics must match ``siamcd._fallback`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef int _cmp_double(const void* a, const void* b) noexcept nogil:
    cdef double x = (<double*>a)[0]
    cdef double y = (<double*>b)[0]
    return (x > y) - (x < y)


cdef extern from "stdlib.h":
    void qsort(void* base, size_t nmemb, size_t size,
               int (*compar)(const void*, const void*) noexcept nogil) nogil


def rasterize_polygons(list polygons, Py_ssize_t height, Py_ssize_t width):
    """Even-odd fill of pixel centers; ``polygons`` is a list of lists of (n, 2) rings."""
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] out = np.zeros((height, width), dtype=np.uint8)
    cdef double[:, ::1] ring
    cdef double[::1] xs
    cdef Py_ssize_t r, c, i, j, n, m, k, r0, r1, total_edges
    cdef double y, x0, y0, x1, y1, ymin, ymax
    for poly in polygons:
        rings = [np.ascontiguousarray(rg, dtype=np.float64) for rg in poly]
        total_edges = 0
        ymin = 1e300
        ymax = -1e300
        for rg in rings:
            total_edges += rg.shape[0]
            if rg.shape[0]:
                ymin = min(ymin, rg[:, 1].min())
                ymax = max(ymax, rg[:, 1].max())
        if total_edges == 0:
            continue
        xs = np.empty(total_edges, dtype=np.float64)
        r0 = max(<Py_ssize_t>0, <Py_ssize_t>floor(ymin - 0.5))
        r1 = min(height - 1, <Py_ssize_t>floor(ymax - 0.5) + 1)
        for r in range(r0, r1 + 1):
            y = r + 0.5
            m = 0
            for rg in rings:
                ring = rg
                n = ring.shape[0]
                for i in range(n):
                    j = i + 1 if i + 1 < n else 0
                    y0 = ring[i, 1]
                    y1 = ring[j, 1]
                    if (y0 > y) != (y1 > y):
                        x0 = ring[i, 0]
                        x1 = ring[j, 0]
                        xs[m] = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
                        m += 1
            if m < 2:
                continue
            qsort(&xs[0], m, sizeof(double), _cmp_double)
            # inside iff an odd number of crossings lie strictly right of the center
            k = 0
            while k + 1 < m:
                c = <Py_ssize_t>floor(xs[k] - 0.5)
                if c < 0:
                    c = 0
                while c < width and c + 0.5 < xs[k]:
                    c += 1
                while c < width and c + 0.5 < xs[k + 1]:
                    out[r, c] = 1
                    c += 1
                k += 2
    return out


def confusion_counts(cnp.ndarray pred, cnp.ndarray label, double threshold):
    cdef double[::1] p = np.ascontiguousarray(pred, dtype=np.float64).ravel()
    cdef cnp.uint8_t[::1] y = np.ascontiguousarray(label, dtype=np.uint8).ravel()
    cdef Py_ssize_t i, n = p.shape[0]
    cdef long long tp = 0, npos = 0, ntrue = 0
    cdef int pos, truth
    # branch-free: random predictions would defeat the branch predictor
    with nogil:
        for i in range(n):
            pos = p[i] >= threshold
            truth = y[i] != 0
            tp += pos & truth
            npos += pos
            ntrue += truth
    fp = npos - tp
    fn = ntrue - tp
    tn = n - tp - fp - fn
    return int(tp), int(fp), int(fn), int(tn)


def window_sums(cnp.ndarray label, cnp.ndarray origins, Py_ssize_t size):
    """Number of nonzero pixels inside each ``size``x``size`` window at ``origins``."""
    cdef cnp.uint8_t[:, ::1] y = np.ascontiguousarray(label != 0, dtype=np.uint8)
    cdef long long[:, ::1] org = np.ascontiguousarray(origins, dtype=np.int64).reshape(-1, 2)
    cdef Py_ssize_t h = y.shape[0], w = y.shape[1]
    cdef Py_ssize_t n = org.shape[0], i, r, c
    cdef cnp.ndarray[cnp.int64_t, ndim=2] integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    cdef long long[:, ::1] s = integral
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.zeros(n, dtype=np.int64)
    cdef long long row_acc
    cdef Py_ssize_t r0, c0
    with nogil:
        for r in range(h):
            row_acc = 0
            for c in range(w):
                row_acc += y[r, c]
                s[r + 1, c + 1] = s[r, c + 1] + row_acc
    for i in range(n):
        r0 = org[i, 0]
        c0 = org[i, 1]
        if r0 < 0 or c0 < 0 or r0 + size > h or c0 + size > w:
            raise ValueError("window at (%d, %d) exceeds %dx%d raster" % (r0, c0, h, w))
        out[i] = s[r0 + size, c0 + size] - s[r0, c0 + size] - s[r0 + size, c0] + s[r0, c0]
    return out
