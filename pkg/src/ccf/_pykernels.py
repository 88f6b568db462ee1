"""Numpy implementations of the compiled kernels in ``_ext.pyx``.

Same signatures, same per-value summation order: results are bit-identical
to the compiled path, only slower.
"""

import numpy as np


def conv2d(x, w, bias, stride, pad):
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    c_in, H, W = x.shape
    c_out, wc, kh, kw = w.shape
    if wc != c_in:
        raise ValueError("channel mismatch")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError("kernel larger than padded input")
    xp = np.zeros((c_in, Hp, Wp), dtype=np.float32)
    xp[:, pad : pad + H, pad : pad + W] = x
    out = np.empty((c_out, Ho, Wo), dtype=np.float32)
    out[...] = np.asarray(bias, dtype=np.float32)[:, None, None]
    ys, xs = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for ci in range(c_in):
        for ky in range(kh):
            for kx in range(kw):
                patch = xp[ci, ky : ky + ys : stride, kx : kx + xs : stride]
                out += w[:, ci, ky, kx][:, None, None] * patch[None]
    return out


def _walk(nodes, base, src_a, src_b, kind, off_a, off_b, thr, left, right):
    nodes = nodes.copy()
    active = np.flatnonzero(kind[nodes] >= 0)
    while active.size:
        nd = nodes[active]
        b = base[active]
        k = kind[nd]
        v = np.empty(nd.size, dtype=np.float32)
        look = k == 0
        v[look] = src_a[b[look] + off_a[nd[look]]]
        pair = ~look
        if pair.any():
            npair = nd[pair]
            v[pair] = src_b[b[pair] + off_a[npair]] - src_b[b[pair] + off_b[npair]]
        nodes[active] = np.where(v <= thr[nd], left[nd], right[nd])
        active = active[kind[nodes[active]] >= 0]
    return nodes


def _bases(plane_w, n_y, n_x, step):
    iy, ix = np.meshgrid(np.arange(n_y), np.arange(n_x), indexing="ij")
    return ((iy * step) * plane_w + ix * step).ravel().astype(np.int64)


def score_windows(src_a, src_b, plane_w, n_y, n_x, step, kind, off_a, off_b, thr,
                  left, right, value, roots, cascade, use_cascade):
    base = _bases(plane_w, n_y, n_x, step)
    n = base.size
    scores = np.zeros(n, dtype=np.float64)
    n_eval = np.zeros(n, dtype=np.int32)
    alive = np.arange(n)
    for t, root in enumerate(roots):
        if alive.size == 0:
            break
        leaves = _walk(np.full(alive.size, root, dtype=np.int64), base[alive], src_a, src_b,
                       kind, off_a, off_b, thr, left, right)
        scores[alive] = scores[alive] + value[leaves].astype(np.float64)
        n_eval[alive] = t + 1
        if use_cascade:
            alive = alive[scores[alive] >= cascade[t]]
    return scores.reshape(n_y, n_x), n_eval.reshape(n_y, n_x)


def leaf_windows(src_a, src_b, plane_w, n_y, n_x, step, kind, off_a, off_b, thr, left, right, roots):
    base = _bases(plane_w, n_y, n_x, step)
    out = np.empty((len(roots), base.size), dtype=np.int32)
    for t, root in enumerate(roots):
        out[t] = _walk(np.full(base.size, root, dtype=np.int64), base, src_a, src_b,
                       kind, off_a, off_b, thr, left, right)
    return out.reshape(len(roots), n_y, n_x)
