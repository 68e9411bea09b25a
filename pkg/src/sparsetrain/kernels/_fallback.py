"""Pure numpy kernels.

Every output accumulates its operand stream sequentially in float32, in
channel-first order, vectorised across outputs. Skipped operands contribute
nothing, so the result is bitwise the same as the compiled loops, which skip
them explicitly. Blocking only changes loop order there, so it is a no-op here.
"""

import numpy as np

F32 = np.float32


def _pad(a, p):
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (p, p), (p, p)))


def _in_range(n_out, stride, pad, tap, extent):
    pos = np.arange(n_out) * stride + tap - pad
    return (pos >= 0) & (pos < extent)


def conv_forward(x, xnz, w, stride, pad, block=None):
    c, h, wd = x.shape
    m, _, r, s = w.shape
    u = (h + 2 * pad - r) // stride + 1
    v = (wd + 2 * pad - s) // stride + 1
    xp = _pad(x, pad)
    nzp = None if xnz is None else _pad(xnz, pad)
    y = np.zeros((m, u, v), dtype=F32)
    performed = 0
    for i in range(r):
        rows = _in_range(u, stride, pad, i, h)
        for j in range(s):
            inr = rows[:, None] & _in_range(v, stride, pad, j, wd)[None, :]
            xs = xp[:, i:i + stride * u:stride, j:j + stride * v:stride]
            if nzp is None:
                performed += m * c * int(inr.sum())
            else:
                nzs = nzp[:, i:i + stride * u:stride, j:j + stride * v:stride]
                performed += m * int(nzs.sum())
            wij = w[:, :, i, j]
            for ch in range(c):
                y += wij[:, ch, None, None] * xs[ch][None]
    return y, performed


def _tap_index(n_in, n_out, stride, pad, tap):
    t = np.arange(n_in) + pad - tap
    valid = (t >= 0) & (t % stride == 0) & (t // stride < n_out)
    return np.where(valid, t // stride, 0), valid


def conv_backward_data(dy, dynz, w, out_mask, stride, pad, out_hw, block=None):
    m, u, v = dy.shape
    _, c, r, s = w.shape
    h, wd = out_hw
    dx = np.zeros((c, h, wd), dtype=F32)
    per_pos = np.full((h, wd), c, dtype=np.int64) if out_mask is None else out_mask.sum(axis=0)
    performed = 0
    for i in range(r):
        uidx, hval = _tap_index(h, u, stride, pad, i)
        for j in range(s):
            vidx, wval = _tap_index(wd, v, stride, pad, j)
            tap = hval[:, None] & wval[None, :]
            g_all = dy[:, uidx][:, :, vidx]
            if dynz is None:
                executed = np.broadcast_to(tap, (m, h, wd))
            else:
                executed = tap[None] & dynz[:, uidx][:, :, vidx]
            performed += int((executed * per_pos[None]).sum())
            for mi in range(m):
                g = np.where(tap, g_all[mi], F32(0))
                dx += w[mi, :, i, j][:, None, None] * g[None]
    if out_mask is not None:
        dx[~out_mask] = 0
    return dx, performed


def weight_grad(x, xnz, dy, dynz, r, s, stride, pad, block=None):
    c, h, wd = x.shape
    m, u, v = dy.shape
    xp = _pad(x, pad)
    nzp = None if xnz is None else _pad(xnz, pad)
    dw = np.zeros((m, c, r, s), dtype=F32)
    rows_ok = np.stack([_in_range(u, stride, pad, i, h) for i in range(r)], axis=1)
    cols_ok = np.stack([_in_range(v, stride, pad, j, wd) for j in range(s)], axis=1)
    performed = 0
    for ui in range(u):
        for vi in range(v):
            h0, w0 = ui * stride, vi * stride
            xwin = xp[:, h0:h0 + r, w0:w0 + s]
            inr = rows_ok[ui][:, None] & cols_ok[vi][None, :]
            n_m = m if dynz is None else int(dynz[:, ui, vi].sum())
            if nzp is None:
                n_x = c * int(inr.sum())
            else:
                n_x = int(nzp[:, h0:h0 + r, w0:w0 + s].sum())
            performed += n_m * n_x
            dw += dy[:, ui, vi][:, None, None, None] * xwin[None]
    return dw, performed
