# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled zero-skipping convolution loops.

The stream position is the outer loop and every output it feeds is updated
in the inner loop, so each output still accumulates its operands in stream
order (tap-major, channel-minor) in float32. Skipped operands leave the
partial sum untouched through a masked add (see _rowops.h). ``block`` splits
the stream into capacity-sized iterations; partial sums live in the output
between blocks, so the result is bitwise independent of the block size.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _lo(Py_ssize_t tap, Py_ssize_t stride, Py_ssize_t pad):
    # first output index whose input position o*stride + tap - pad is >= 0
    cdef Py_ssize_t d = pad - tap
    if d <= 0:
        return 0
    return (d + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t n_out, Py_ssize_t tap, Py_ssize_t stride,
                           Py_ssize_t pad, Py_ssize_t extent):
    # one past the last output index whose input position is < extent
    cdef Py_ssize_t top = extent - 1 + pad - tap
    if top < 0:
        return 0
    return min(n_out, top // stride + 1)


cdef extern from "_rowops.h" nogil:
    void _axpy "row_axpy"(float* y, Py_ssize_t ys, const float* x, Py_ssize_t xs, float a,
                          Py_ssize_t n)
    void _axpy_sel "row_axpy_sel"(float* y, Py_ssize_t ys, const float* x, Py_ssize_t xs,
                                  float a, const cnp.uint8_t* f, Py_ssize_t fs, Py_ssize_t n)


def _blocks(total, block):
    step = total if block is None else int(block)
    if step < 1:
        raise ValueError("block must be >= 1")
    return [(k0, min(k0 + step, total)) for k0 in range(0, total, step)]


def conv_forward(float[:, :, ::1] x, cnp.uint8_t[:, :, ::1] xnz, float[:, :, :, ::1] w,
                 int stride, int pad, block=None):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t M = w.shape[0], R = w.shape[2], S = w.shape[3]
    cdef Py_ssize_t U = (H + 2 * pad - R) // stride + 1
    cdef Py_ssize_t V = (W + 2 * pad - S) // stride + 1
    cdef bint indexed = xnz is not None
    y_arr = np.zeros((M, U, V), dtype=np.float32)
    if y_arr.size == 0 or x.size == 0:
        return y_arr, 0
    cdef float[:, :, ::1] y = y_arr
    cdef float* yp = &y[0, 0, 0]
    cdef const float* xp = &x[0, 0, 0]
    cdef const cnp.uint8_t* nzp = &xnz[0, 0, 0] if indexed else NULL
    cdef Py_ssize_t k0, k1, k, m, u, v, c, rs, i, j, u0, u1, v0, v1, n
    cdef long long performed = 0, live
    cdef float wv
    cdef float* yrow
    cdef const float* xrow
    cdef const cnp.uint8_t* nrow
    for k0, k1 in _blocks(C * R * S, block):
        for k in range(k0, k1):
            rs = k // C
            c = k - rs * C
            i = rs // S
            j = rs - i * S
            u0, u1 = _lo(i, stride, pad), _hi(U, i, stride, pad, H)
            v0, v1 = _lo(j, stride, pad), _hi(V, j, stride, pad, W)
            if u0 >= u1 or v0 >= v1:
                continue
            live = 0
            if indexed:
                for u in range(u0, u1):
                    nrow = nzp + (c * H + u * stride + i - pad) * W + j - pad
                    for v in range(v0, v1):
                        live += nrow[v * stride] != 0
            else:
                live = (u1 - u0) * (v1 - v0)
            performed += M * live
            for m in range(M):
                wv = w[m, c, i, j]
                for u in range(u0, u1):
                    n = (c * H + u * stride + i - pad) * W + j - pad
                    xrow = xp + n
                    yrow = yp + (m * U + u) * V
                    if indexed:
                        _axpy_sel(yrow + v0, 1, xrow + v0 * stride, stride, wv,
                                  nzp + n + v0 * stride, stride, v1 - v0)
                    else:
                        _axpy(yrow + v0, 1, xrow + v0 * stride, stride, wv, v1 - v0)
    return y_arr, int(performed)


def conv_backward_data(float[:, :, ::1] dy, cnp.uint8_t[:, :, ::1] dynz, float[:, :, :, ::1] w,
                       cnp.uint8_t[:, :, ::1] out_mask, int stride, int pad, out_hw, block=None):
    cdef Py_ssize_t M = dy.shape[0], U = dy.shape[1], V = dy.shape[2]
    cdef Py_ssize_t C = w.shape[1], R = w.shape[2], S = w.shape[3]
    cdef Py_ssize_t H = out_hw[0], W = out_hw[1]
    cdef bint indexed = dynz is not None
    cdef bint masked = out_mask is not None
    dx_arr = np.zeros((C, H, W), dtype=np.float32)
    if dx_arr.size == 0 or dy.size == 0:
        return dx_arr, 0
    cdef float[:, :, ::1] dx = dx_arr
    cdef float* dxp = &dx[0, 0, 0]
    cdef const float* dyp = &dy[0, 0, 0]
    cdef const cnp.uint8_t* nzp = &dynz[0, 0, 0] if indexed else NULL
    cdef const cnp.uint8_t* mkp = &out_mask[0, 0, 0] if masked else NULL
    cdef Py_ssize_t k0, k1, k, m, u, v, c, rs, i, j, u0, u1, v0, v1, n
    cdef long long performed = 0
    cdef float wv
    cdef float* drow
    cdef const float* grow
    cdef const cnp.uint8_t* nrow
    cdef const long long* prow
    cdef long long[:, ::1] per_pos
    cdef const long long* pp = NULL
    if masked:
        # unmasked channels at each output position
        per_pos = np.asarray(out_mask, dtype=bool).sum(axis=0, dtype=np.int64)
        pp = &per_pos[0, 0]
    for k0, k1 in _blocks(M * R * S, block):
        for k in range(k0, k1):
            rs = k // M
            m = k - rs * M
            i = rs // S
            j = rs - i * S
            # outputs h = u*stride + i - pad fed by this tap
            u0, u1 = _lo(i, stride, pad), _hi(U, i, stride, pad, H)
            v0, v1 = _lo(j, stride, pad), _hi(V, j, stride, pad, W)
            if u0 >= u1 or v0 >= v1:
                continue
            if masked:
                # a pair executes when the operand is live and its output unmasked
                for u in range(u0, u1):
                    prow = pp + (u * stride + i - pad) * W + j - pad
                    nrow = nzp + (m * U + u) * V if indexed else NULL
                    for v in range(v0, v1):
                        performed += prow[v * stride] * (not indexed or nrow[v] != 0)
            elif indexed:
                for u in range(u0, u1):
                    nrow = nzp + (m * U + u) * V
                    for v in range(v0, v1):
                        performed += C * (nrow[v] != 0)
            else:
                performed += C * (u1 - u0) * (v1 - v0)
            for c in range(C):
                wv = w[m, c, i, j]
                for u in range(u0, u1):
                    grow = dyp + (m * U + u) * V
                    drow = dxp + (c * H + u * stride + i - pad) * W + j - pad
                    if indexed:
                        _axpy_sel(drow + v0 * stride, stride, grow + v0, 1, wv,
                                  nzp + (m * U + u) * V + v0, 1, v1 - v0)
                    else:
                        _axpy(drow + v0 * stride, stride, grow + v0, 1, wv, v1 - v0)
    if masked:
        # masked outputs are dropped; only their live pairs were counted above
        dx_arr[np.asarray(out_mask) == 0] = 0
    return dx_arr, int(performed)


def weight_grad(float[:, :, ::1] x, cnp.uint8_t[:, :, ::1] xnz, float[:, :, ::1] dy,
                cnp.uint8_t[:, :, ::1] dynz, int R, int S, int stride, int pad, block=None):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t M = dy.shape[0], U = dy.shape[1], V = dy.shape[2]
    cdef Py_ssize_t CRS = C * R * S
    cdef bint x_indexed = xnz is not None
    cdef bint dy_indexed = dynz is not None
    dw_arr = np.zeros((M, C, R, S), dtype=np.float32)
    if dw_arr.size == 0 or dy.size == 0 or x.size == 0:
        return dw_arr, 0
    cdef float[:, :, :, ::1] dw = dw_arr
    cdef float* dwp = &dw[0, 0, 0, 0]
    # the input window under each output, gathered contiguously with its skip flags
    win_arr = np.zeros(CRS, dtype=np.float32)
    flag_arr = np.zeros(CRS, dtype=np.uint8)
    cdef float[::1] win = win_arr
    cdef cnp.uint8_t[::1] flag = flag_arr
    cdef Py_ssize_t k0, k1, k, m, u, v, c, i, j, hh, ww, n
    cdef long long performed = 0, n_x, n_m
    cdef float g
    cdef float* drow
    for k0, k1 in _blocks(U * V, block):
        for k in range(k0, k1):
            u = k // V
            v = k - u * V
            n_x = 0
            n = 0
            for c in range(C):
                for i in range(R):
                    hh = u * stride + i - pad
                    for j in range(S):
                        ww = v * stride + j - pad
                        if 0 <= hh < H and 0 <= ww < W:
                            win[n] = x[c, hh, ww]
                            flag[n] = xnz[c, hh, ww] != 0 if x_indexed else 1
                        else:
                            win[n] = 0
                            flag[n] = 0
                        n_x += flag[n]
                        n += 1
            n_m = 0
            for m in range(M):
                if dy_indexed and not dynz[m, u, v]:
                    continue
                n_m += 1
                g = dy[m, u, v]
                drow = dwp + m * CRS
                _axpy_sel(drow, 1, &win[0], 1, g, &flag[0], 1, CRS)
            performed += n_m * n_x
    return dw_arr, int(performed)
