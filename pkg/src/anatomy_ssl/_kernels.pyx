# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled numeric kernels. Semantics match ``_kernels_py`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def histogram256(image):
    cdef const double[:, :] img = np.ascontiguousarray(image, dtype=np.float64)
    cdef cnp.int64_t[:] hist = np.zeros(256, dtype=np.int64)
    cdef Py_ssize_t i, j
    cdef long b
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            b = <long>floor(img[i, j] * 256.0)
            if b > 255:
                b = 255
            elif b < 0:
                b = 0
            hist[b] += 1
    return np.asarray(hist)


def otsu_scan(hist):
    cdef const cnp.int64_t[:] h = np.ascontiguousarray(hist, dtype=np.int64)
    cdef Py_ssize_t n = h.shape[0], k
    cdef double total = 0.0, total_s = 0.0, w0 = 0.0, s0 = 0.0, w1, s1, var, d
    cdef double best = 0.0
    cdef Py_ssize_t best_k = 0
    for k in range(n):
        total += h[k]
        total_s += h[k] * <double>k
    for k in range(n - 1):
        w0 += h[k]
        s0 += h[k] * <double>k
        w1 = total - w0
        s1 = total_s - s0
        if w0 > 0 and w1 > 0:
            d = s0 / w0 - s1 / w1
            var = w0 * w1 * (d * d)
            if var > best:
                best = var
                best_k = k
    return int(best_k + 1), float(best)


def sinkhorn_balance(q, int iters):
    cdef double[:, :, ::1] a = q
    cdef Py_ssize_t n = a.shape[0], npos = a.shape[1], kk = a.shape[2]
    cdef Py_ssize_t i, j, k
    cdef int it
    cdef double target = <double>n / <double>kk, s
    cdef double[::1] col = np.empty(kk, dtype=np.float64)
    for j in range(npos):
        for it in range(iters):
            for k in range(kk):
                col[k] = 0.0
            for i in range(n):
                for k in range(kk):
                    col[k] += a[i, j, k]
            for k in range(kk):
                col[k] = target / col[k]
            for i in range(n):
                s = 0.0
                for k in range(kk):
                    a[i, j, k] *= col[k]
                    s += a[i, j, k]
                for k in range(kk):
                    a[i, j, k] /= s
    return q


def patch_means(field, int patch):
    cdef const double[:, :] f = np.ascontiguousarray(field, dtype=np.float64)
    cdef Py_ssize_t rows = f.shape[0] // patch, cols = f.shape[1] // patch
    cdef double[:, ::1] out = np.zeros((rows, cols), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double area = <double>(patch * patch)
    for i in range(f.shape[0]):
        for j in range(f.shape[1]):
            out[i // patch, j // patch] += f[i, j]
    for i in range(rows):
        for j in range(cols):
            out[i, j] /= area
    return np.asarray(out)


def paste_add(canvas, lesion, Py_ssize_t row, Py_ssize_t col):
    cdef double[:, :] c = canvas
    cdef const double[:, :] l = np.ascontiguousarray(lesion, dtype=np.float64)
    cdef Py_ssize_t i, j
    for i in range(l.shape[0]):
        for j in range(l.shape[1]):
            c[row + i, col + j] += l[i, j]
    return canvas


def auc_rank(scores, positive):
    cdef const double[:] s = np.ascontiguousarray(scores, dtype=np.float64)
    pos_arr = np.ascontiguousarray(positive, dtype=np.uint8)
    cdef const cnp.uint8_t[:] pos = pos_arr
    cdef cnp.int64_t[:] order = np.argsort(s, kind="mergesort").astype(np.int64)
    cdef Py_ssize_t n = s.shape[0], start = 0, end, t
    cdef double rank_sum = 0.0, avg
    cdef long n_pos = 0
    while start < n:
        end = start + 1
        while end < n and s[order[end]] == s[order[start]]:
            end += 1
        avg = (start + end + 1) / 2.0
        for t in range(start, end):
            if pos[order[t]]:
                rank_sum += avg
                n_pos += 1
        start = end
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * (n - n_pos))
