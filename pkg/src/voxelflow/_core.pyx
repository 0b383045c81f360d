# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Signatures mirror ``voxelflow._fallback``."""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor

cnp.import_array()


cdef inline Py_ssize_t _clampi(Py_ssize_t v, Py_ssize_t hi) noexcept nogil:
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


def im2col(floating[:, :, :, ::1] x, int k, out=None):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t p = k // 2
    dtype = np.float32 if floating is float else np.float64
    if out is None:
        out = np.empty((C * k * k, B * H * W), dtype=dtype)
    cdef floating[:, ::1] o = out
    cdef Py_ssize_t b, c, i, j, di, dj, row, base, yy, jlo, jhi
    with nogil:
        for c in range(C):
            for di in range(k):
                for dj in range(k):
                    row = (c * k + di) * k + dj
                    jlo = p - dj
                    if jlo < 0:
                        jlo = 0
                    jhi = W + p - dj
                    if jhi > W:
                        jhi = W
                    for b in range(B):
                        for i in range(H):
                            base = (b * H + i) * W
                            yy = i + di - p
                            if yy < 0 or yy >= H:
                                for j in range(W):
                                    o[row, base + j] = 0
                                continue
                            for j in range(jlo):
                                o[row, base + j] = 0
                            for j in range(jlo, jhi):
                                o[row, base + j] = x[b, c, yy, j + dj - p]
                            for j in range(jhi, W):
                                o[row, base + j] = 0
    return out


def col2im(floating[:, ::1] cols, shape, int k):
    cdef Py_ssize_t B = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t p = k // 2
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, di, dj, row, base, yy, jlo, jhi
    with nogil:
        for c in range(C):
            for di in range(k):
                for dj in range(k):
                    row = (c * k + di) * k + dj
                    jlo = p - dj
                    if jlo < 0:
                        jlo = 0
                    jhi = W + p - dj
                    if jhi > W:
                        jhi = W
                    for b in range(B):
                        for i in range(H):
                            yy = i + di - p
                            if yy < 0 or yy >= H:
                                continue
                            base = (b * H + i) * W
                            for j in range(jlo, jhi):
                                out[b, c, yy, j + dj - p] += cols[row, base + j]
    return out_arr


def maxpool2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], h = x.shape[2] // 2, w = x.shape[3] // 2
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((B, C, h, w), dtype=dtype)
    arg_arr = np.empty((B, C, h, w), dtype=np.int8)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef signed char[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, c, i, j
    cdef floating best, v
    cdef signed char a
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(h):
                    for j in range(w):
                        best = x[b, c, 2 * i, 2 * j]
                        a = 0
                        v = x[b, c, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            a = 1
                        v = x[b, c, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            a = 2
                        v = x[b, c, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            a = 3
                        out[b, c, i, j] = best
                        arg[b, c, i, j] = a
    return out_arr, arg_arr


def maxpool2_backward(floating[:, :, :, ::1] dy, signed char[:, :, :, ::1] arg):
    cdef Py_ssize_t B = dy.shape[0], C = dy.shape[1], h = dy.shape[2], w = dy.shape[3]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((B, C, 2 * h, 2 * w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, c, i, j
    cdef signed char a
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(h):
                    for j in range(w):
                        a = arg[b, c, i, j]
                        dx[b, c, 2 * i + a // 2, 2 * j + a % 2] = dy[b, c, i, j]
    return dx_arr


def sample_forward(floating[:, :, :, ::1] video, floating[:, :, ::1] dx,
                   floating[:, :, ::1] dy, floating[:, :, ::1] dt):
    cdef Py_ssize_t B = video.shape[0], C = video.shape[1] // 2
    cdef Py_ssize_t H = video.shape[2], W = video.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, f, x0, x1, y0, y1, ch
    cdef floating t, wt, lx, ly, flx, fly, fx, fy, sign, top, bot
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    t = dt[b, i, j]
                    if t < 0:
                        t = 0
                    elif t > 1:
                        t = 1
                    for f in range(2):
                        if f == 0:
                            sign = -1
                            wt = 1 - t
                        else:
                            sign = 1
                            wt = t
                        lx = j + sign * dx[b, i, j]
                        ly = i + sign * dy[b, i, j]
                        flx = <floating>floor(lx)
                        fly = <floating>floor(ly)
                        fx = lx - flx
                        fy = ly - fly
                        x0 = _clampi(<Py_ssize_t>flx, W - 1)
                        x1 = _clampi(<Py_ssize_t>flx + 1, W - 1)
                        y0 = _clampi(<Py_ssize_t>fly, H - 1)
                        y1 = _clampi(<Py_ssize_t>fly + 1, H - 1)
                        for c in range(C):
                            ch = f * C + c
                            top = (1 - fx) * video[b, ch, y0, x0] + fx * video[b, ch, y0, x1]
                            bot = (1 - fx) * video[b, ch, y1, x0] + fx * video[b, ch, y1, x1]
                            out[b, c, i, j] += wt * ((1 - fy) * top + fy * bot)
    return out_arr


def sample_backward(floating[:, :, :, ::1] video, floating[:, :, ::1] dx,
                    floating[:, :, ::1] dy, floating[:, :, ::1] dt,
                    floating[:, :, :, ::1] grad_out, bint need_input=False):
    cdef Py_ssize_t B = video.shape[0], C = video.shape[1] // 2
    cdef Py_ssize_t H = video.shape[2], W = video.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gdx_arr = np.zeros((B, H, W), dtype=dtype)
    gdy_arr = np.zeros((B, H, W), dtype=dtype)
    gdt_arr = np.zeros((B, H, W), dtype=dtype)
    gvid_arr = np.zeros((B, 2 * C, H, W), dtype=dtype) if need_input else np.zeros((1, 1, 1, 1), dtype=dtype)
    cdef floating[:, :, ::1] gdx = gdx_arr
    cdef floating[:, :, ::1] gdy = gdy_arr
    cdef floating[:, :, ::1] gdt = gdt_arr
    cdef floating[:, :, :, ::1] gvid = gvid_arr
    cdef Py_ssize_t b, c, i, j, f, x0, x1, y0, y1, ch
    cdef floating t, wt, lx, ly, flx, fly, fx, fy, sign, g, gw
    cdef floating v00, v10, v01, v11, sx, sy, st, inside
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    t = dt[b, i, j]
                    inside = 1
                    if t < 0:
                        t = 0
                        inside = 0
                    elif t > 1:
                        t = 1
                        inside = 0
                    st = 0
                    for f in range(2):
                        if f == 0:
                            sign = -1
                            wt = 1 - t
                        else:
                            sign = 1
                            wt = t
                        lx = j + sign * dx[b, i, j]
                        ly = i + sign * dy[b, i, j]
                        flx = <floating>floor(lx)
                        fly = <floating>floor(ly)
                        fx = lx - flx
                        fy = ly - fly
                        x0 = _clampi(<Py_ssize_t>flx, W - 1)
                        x1 = _clampi(<Py_ssize_t>flx + 1, W - 1)
                        y0 = _clampi(<Py_ssize_t>fly, H - 1)
                        y1 = _clampi(<Py_ssize_t>fly + 1, H - 1)
                        sx = 0
                        sy = 0
                        for c in range(C):
                            ch = f * C + c
                            g = grad_out[b, c, i, j]
                            v00 = video[b, ch, y0, x0]
                            v10 = video[b, ch, y0, x1]
                            v01 = video[b, ch, y1, x0]
                            v11 = video[b, ch, y1, x1]
                            sx += g * wt * ((1 - fy) * (v10 - v00) + fy * (v11 - v01))
                            sy += g * wt * ((1 - fx) * (v01 - v00) + fx * (v11 - v10))
                            if f == 0:
                                st -= g * ((1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11))
                            else:
                                st += g * ((1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11))
                            if need_input:
                                gw = g * wt
                                gvid[b, ch, y0, x0] += gw * (1 - fx) * (1 - fy)
                                gvid[b, ch, y0, x1] += gw * fx * (1 - fy)
                                gvid[b, ch, y1, x0] += gw * (1 - fx) * fy
                                gvid[b, ch, y1, x1] += gw * fx * fy
                        gdx[b, i, j] += sign * sx
                        gdy[b, i, j] += sign * sy
                    gdt[b, i, j] = st * inside
    return gdx_arr, gdy_arr, gdt_arr, (gvid_arr if need_input else None)
