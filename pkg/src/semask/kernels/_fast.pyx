# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: stride-1 conv2d and bilinear resize, fwd + bwd.

Index conventions match numpy_backend exactly; see that module's docstring.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def _axis_coords(Py_ssize_t n_in, Py_ssize_t n_out):
    scale = n_in / float(n_out)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] k,
                   Py_ssize_t pad_t, Py_ssize_t pad_l,
                   Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], ci = x.shape[3]
    cdef Py_ssize_t kh = k.shape[0], kw = k.shape[1], co = k.shape[3]
    out_arr = np.zeros((b, out_h, out_w, co),
                       dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bb, i, j, u, v, c, o, xi, xj
    cdef real xv
    with nogil:
        for bb in range(b):
            for i in range(out_h):
                for u in range(kh):
                    xi = i + u - pad_t
                    if xi < 0 or xi >= h:
                        continue
                    for j in range(out_w):
                        for v in range(kw):
                            xj = j + v - pad_l
                            if xj < 0 or xj >= w:
                                continue
                            for c in range(ci):
                                xv = x[bb, xi, xj, c]
                                for o in range(co):
                                    out[bb, i, j, o] += xv * k[u, v, c, o]
    return out_arr


def conv2d_backward_input(real[:, :, :, ::1] dout, real[:, :, :, ::1] k,
                          Py_ssize_t pad_t, Py_ssize_t pad_l,
                          Py_ssize_t in_h, Py_ssize_t in_w):
    cdef Py_ssize_t b = dout.shape[0], oh = dout.shape[1], ow = dout.shape[2]
    cdef Py_ssize_t kh = k.shape[0], kw = k.shape[1], ci = k.shape[2], co = k.shape[3]
    dx_arr = np.zeros((b, in_h, in_w, ci),
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t bb, p, q, u, v, c, o, di, dj
    cdef real acc
    with nogil:
        for bb in range(b):
            for p in range(in_h):
                for u in range(kh):
                    di = p + pad_t - u
                    if di < 0 or di >= oh:
                        continue
                    for q in range(in_w):
                        for v in range(kw):
                            dj = q + pad_l - v
                            if dj < 0 or dj >= ow:
                                continue
                            for c in range(ci):
                                acc = 0
                                for o in range(co):
                                    acc += dout[bb, di, dj, o] * k[u, v, c, o]
                                dx[bb, p, q, c] += acc
    return dx_arr


def conv2d_backward_kernel(real[:, :, :, ::1] x, real[:, :, :, ::1] dout,
                           Py_ssize_t pad_t, Py_ssize_t pad_l,
                           Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], ci = x.shape[3]
    cdef Py_ssize_t oh = dout.shape[1], ow = dout.shape[2], co = dout.shape[3]
    dk_arr = np.zeros((kh, kw, ci, co),
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] dk = dk_arr
    cdef Py_ssize_t bb, i, j, u, v, c, o, xi, xj
    cdef real xv
    with nogil:
        for bb in range(b):
            for i in range(oh):
                for u in range(kh):
                    xi = i + u - pad_t
                    if xi < 0 or xi >= h:
                        continue
                    for j in range(ow):
                        for v in range(kw):
                            xj = j + v - pad_l
                            if xj < 0 or xj >= w:
                                continue
                            for c in range(ci):
                                xv = x[bb, xi, xj, c]
                                for o in range(co):
                                    dk[u, v, c, o] += xv * dout[bb, i, j, o]
    return dk_arr


def bilinear_forward(real[:, :, :, ::1] x, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    if out_h == h and out_w == w:
        return np.array(x, copy=True)
    y0_a, y1_a, fy_a = _axis_coords(h, out_h)
    x0_a, x1_a, fx_a = _axis_coords(w, out_w)
    cdef Py_ssize_t[::1] y0 = y0_a, y1 = y1_a, x0 = x0_a, x1 = x1_a
    cdef double[::1] fy = fy_a, fx = fx_a
    out_arr = np.empty((b, out_h, out_w, c),
                       dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bb, i, j, ch
    cdef real gx, gy, v00, v01, v10, v11, top, bot
    with nogil:
        for bb in range(b):
            for i in range(out_h):
                gy = <real> fy[i]
                for j in range(out_w):
                    gx = <real> fx[j]
                    for ch in range(c):
                        v00 = x[bb, y0[i], x0[j], ch]
                        v01 = x[bb, y0[i], x1[j], ch]
                        v10 = x[bb, y1[i], x0[j], ch]
                        v11 = x[bb, y1[i], x1[j], ch]
                        top = v00 + gx * (v01 - v00)
                        bot = v10 + gx * (v11 - v10)
                        out[bb, i, j, ch] = top + gy * (bot - top)
    return out_arr


def bilinear_backward(real[:, :, :, ::1] dout, Py_ssize_t in_h, Py_ssize_t in_w):
    cdef Py_ssize_t b = dout.shape[0], oh = dout.shape[1], ow = dout.shape[2], c = dout.shape[3]
    if oh == in_h and ow == in_w:
        return np.array(dout, copy=True)
    y0_a, y1_a, fy_a = _axis_coords(in_h, oh)
    x0_a, x1_a, fx_a = _axis_coords(in_w, ow)
    cdef Py_ssize_t[::1] y0 = y0_a, y1 = y1_a, x0 = x0_a, x1 = x1_a
    cdef double[::1] fy = fy_a, fx = fx_a
    dx_arr = np.zeros((b, in_h, in_w, c),
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t bb, i, j, ch
    cdef real gx, gy, g, w00, w01, w10, w11
    with nogil:
        for bb in range(b):
            for i in range(oh):
                gy = <real> fy[i]
                for j in range(ow):
                    gx = <real> fx[j]
                    w00 = (1 - gy) * (1 - gx)
                    w01 = (1 - gy) * gx
                    w10 = gy * (1 - gx)
                    w11 = gy * gx
                    for ch in range(c):
                        g = dout[bb, i, j, ch]
                        dx[bb, y0[i], x0[j], ch] += w00 * g
                        dx[bb, y0[i], x1[j], ch] += w01 * g
                        dx[bb, y1[i], x0[j], ch] += w10 * g
                        dx[bb, y1[i], x1[j], ch] += w11 * g
    return dx_arr
