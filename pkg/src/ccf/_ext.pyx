# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: convolution and decision-tree window scanning.

Summation order inside every output value matches ``ccf._pykernels``
exactly, so both paths return bit-identical results.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d(const float[:, :, ::1] x, const float[:, :, :, ::1] w, const float[::1] bias,
           int stride, int pad):
    """Cross-correlation of ``x (C_in, H, W)`` with ``w (C_out, C_in, kh, kw)``."""
    cdef Py_ssize_t c_in = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t c_out = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    if w.shape[1] != c_in:
        raise ValueError("channel mismatch")
    cdef Py_ssize_t Hp = H + 2 * pad, Wp = W + 2 * pad
    cdef Py_ssize_t Ho = (Hp - kh) // stride + 1, Wo = (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError("kernel larger than padded input")
    xp_arr = np.zeros((c_in, Hp, Wp), dtype=np.float32)
    xp_arr[:, pad:pad + H, pad:pad + W] = x
    cdef float[:, :, ::1] xp = xp_arr
    out_arr = np.empty((c_out, Ho, Wo), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef Py_ssize_t co, ci, ky, kx, oy, ox
    cdef float wv, b
    cdef float *orow
    cdef const float *irow
    with nogil:
        for co in range(c_out):
            b = bias[co]
            for oy in range(Ho):
                for ox in range(Wo):
                    out[co, oy, ox] = b
            for ci in range(c_in):
                for ky in range(kh):
                    for kx in range(kw):
                        wv = w[co, ci, ky, kx]
                        for oy in range(Ho):
                            orow = &out[co, oy, 0]
                            irow = &xp[ci, oy * stride + ky, kx]
                            if stride == 1:
                                for ox in range(Wo):
                                    orow[ox] = orow[ox] + wv * irow[ox]
                            else:
                                for ox in range(Wo):
                                    orow[ox] = orow[ox] + wv * irow[ox * stride]
    return out_arr


cdef inline Py_ssize_t _walk(Py_ssize_t node, Py_ssize_t base,
                             const float *src_a, const float *src_b,
                             const signed char *kind, const long long *off_a,
                             const long long *off_b, const float *thr,
                             const int *left, const int *right) noexcept nogil:
    cdef float v
    while kind[node] >= 0:
        if kind[node] == 0:
            v = src_a[base + off_a[node]]
        else:
            v = src_b[base + off_a[node]] - src_b[base + off_b[node]]
        if v <= thr[node]:
            node = left[node]
        else:
            node = right[node]
    return node


def score_windows(const float[::1] src_a, const float[::1] src_b, int plane_w,
                  int n_y, int n_x, int step,
                  const signed char[::1] kind, const long long[::1] off_a,
                  const long long[::1] off_b, const float[::1] thr,
                  const int[::1] left, const int[::1] right, const float[::1] value,
                  const int[::1] roots, const double[::1] cascade, bint use_cascade):
    """Forest score of every window origin on an ``n_y x n_x`` grid.

    Returns ``(scores float64 (n_y, n_x), n_evaluated int32 (n_y, n_x))``.
    """
    cdef Py_ssize_t n_trees = roots.shape[0]
    scores_arr = np.empty((n_y, n_x), dtype=np.float64)
    n_eval_arr = np.empty((n_y, n_x), dtype=np.int32)
    cdef double[:, ::1] scores = scores_arr
    cdef int[:, ::1] n_eval = n_eval_arr
    cdef Py_ssize_t iy, ix, t, leaf, base
    cdef double s
    with nogil:
        for iy in range(n_y):
            for ix in range(n_x):
                base = (iy * step) * plane_w + ix * step
                s = 0.0
                t = 0
                while t < n_trees:
                    leaf = _walk(roots[t], base, &src_a[0], &src_b[0], &kind[0],
                                 &off_a[0], &off_b[0], &thr[0], &left[0], &right[0])
                    s = s + value[leaf]
                    t = t + 1
                    if use_cascade and s < cascade[t - 1]:
                        break
                scores[iy, ix] = s
                n_eval[iy, ix] = <int>t
    return scores_arr, n_eval_arr


def leaf_windows(const float[::1] src_a, const float[::1] src_b, int plane_w,
                 int n_y, int n_x, int step,
                 const signed char[::1] kind, const long long[::1] off_a,
                 const long long[::1] off_b, const float[::1] thr,
                 const int[::1] left, const int[::1] right, const int[::1] roots):
    """Leaf node index reached by every tree at every window origin,
    shape ``(n_trees, n_y, n_x)``."""
    cdef Py_ssize_t n_trees = roots.shape[0]
    out_arr = np.empty((n_trees, n_y, n_x), dtype=np.int32)
    cdef int[:, :, ::1] out = out_arr
    cdef Py_ssize_t iy, ix, t, base
    with nogil:
        for t in range(n_trees):
            for iy in range(n_y):
                for ix in range(n_x):
                    base = (iy * step) * plane_w + ix * step
                    out[t, iy, ix] = <int>_walk(roots[t], base, &src_a[0], &src_b[0], &kind[0],
                                                &off_a[0], &off_b[0], &thr[0], &left[0], &right[0])
    return out_arr
