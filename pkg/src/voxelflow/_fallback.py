"""Pure-numpy implementations of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_core`` extension. Results agree to float rounding.
"""
import numpy as np


def im2col(x, k, out=None):
    """(B, C, H, W) -> (C*k*k, B*H*W) patch matrix with zero "same" padding.

    Row ``(c*k + di)*k + dj`` holds channel ``c`` shifted by ``(di-p, dj-p)``.
    ``out`` may be a preallocated buffer of that shape.
    """
    B, C, H, W = x.shape
    p = k // 2
    if out is None:
        out = np.empty((C * k * k, B * H * W), dtype=x.dtype)
    xp = np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (p, p), (p, p)))
    o = out.reshape(C, k, k, B, H, W)
    for di in range(k):
        for dj in range(k):
            o[:, di, dj] = xp[:, :, di:di + H, dj:dj + W]
    return out


def col2im(cols, shape, k):
    """Adjoint of :func:`im2col`: scatter-add patch rows back to (B, C, H, W)."""
    B, C, H, W = shape
    p = k // 2
    c6 = cols.reshape(C, k, k, B, H, W)
    acc = np.zeros((C, B, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            acc[:, :, di:di + H, dj:dj + W] += c6[:, di, dj]
    return np.ascontiguousarray(acc[:, :, p:p + H, p:p + W].transpose(1, 0, 2, 3))


def maxpool2_forward(x):
    B, C, H, W = x.shape
    win = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // 2, W // 2, 4)
    # np.argmax keeps the first maximum, i.e. scan order (0,0) (0,1) (1,0) (1,1)
    arg = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(dy, arg):
    B, C, h, w = dy.shape
    dwin = np.zeros((B, C, h, w, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, arg[..., None].astype(np.intp), dy[..., None], axis=-1)
    dx = dwin.reshape(B, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx.reshape(B, C, 2 * h, 2 * w))


def _corners(dx, dy, sign, H, W):
    dtype = dx.dtype
    ys = np.arange(H, dtype=dtype)[None, :, None]
    xs = np.arange(W, dtype=dtype)[None, None, :]
    lx = xs + sign * dx
    ly = ys + sign * dy
    fx0 = np.floor(lx)
    fy0 = np.floor(ly)
    fx = lx - fx0
    fy = ly - fy0
    x0 = np.clip(fx0, 0, W - 1).astype(np.intp)
    x1 = np.clip(fx0 + 1, 0, W - 1).astype(np.intp)
    y0 = np.clip(fy0, 0, H - 1).astype(np.intp)
    y1 = np.clip(fy0 + 1, 0, H - 1).astype(np.intp)
    B = dx.shape[0]
    flat = [(yy * W + xx).reshape(B, 1, H * W) for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]
    return fx, fy, flat


def _gather(img, idx, shape):
    return np.take_along_axis(img, idx, axis=2).reshape(shape)


def sample_forward(video, dx, dy, dt):
    """Trilinear volume sampling of a 2-frame video (B, 2C, H, W)."""
    B, C2, H, W = video.shape
    C = C2 // 2
    t = np.clip(dt, 0, 1)[:, None]
    out = np.zeros((B, C, H, W), dtype=video.dtype)
    for frame, sign, wt in ((0, -1, 1 - t), (1, 1, t)):
        fx, fy, (i00, i10, i01, i11) = _corners(dx, dy, sign, H, W)
        img = video[:, frame * C:(frame + 1) * C].reshape(B, C, H * W)
        shape = (B, C, H, W)
        v00, v10 = _gather(img, i00, shape), _gather(img, i10, shape)
        v01, v11 = _gather(img, i01, shape), _gather(img, i11, shape)
        fx, fy = fx[:, None], fy[:, None]
        top = (1 - fx) * v00 + fx * v10
        bot = (1 - fx) * v01 + fx * v11
        out += wt * ((1 - fy) * top + fy * bot)
    return out


def sample_backward(video, dx, dy, dt, grad_out, need_input=False):
    """Gradients of trilinear sampling w.r.t. (dx, dy, dt) and optionally the video."""
    B, C2, H, W = video.shape
    C = C2 // 2
    inside = ((dt >= 0) & (dt <= 1)).astype(video.dtype)
    t = np.clip(dt, 0, 1)[:, None]
    g = grad_out
    gdx = np.zeros_like(dx)
    gdy = np.zeros_like(dy)
    gdt = np.zeros_like(dt)
    gvid = np.zeros_like(video) if need_input else None
    for frame, sign, wt in ((0, -1, 1 - t), (1, 1, t)):
        fx, fy, idx = _corners(dx, dy, sign, H, W)
        i00, i10, i01, i11 = idx
        img = video[:, frame * C:(frame + 1) * C].reshape(B, C, H * W)
        shape = (B, C, H, W)
        v00, v10 = _gather(img, i00, shape), _gather(img, i10, shape)
        v01, v11 = _gather(img, i01, shape), _gather(img, i11, shape)
        fx, fy = fx[:, None], fy[:, None]
        # derivative of the bilinear sample w.r.t. the sample location
        d_lx = (1 - fy) * (v10 - v00) + fy * (v11 - v01)
        d_ly = (1 - fx) * (v01 - v00) + fx * (v11 - v10)
        bil = (1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11)
        gdx += sign * (g * wt * d_lx).sum(axis=1)
        gdy += sign * (g * wt * d_ly).sum(axis=1)
        gdt += (2 * frame - 1) * (g * bil).sum(axis=1)
        if need_input:
            gw = g * wt
            acc = np.zeros((B, C, H * W), dtype=video.dtype)
            for idx_k, w_k in zip(idx, ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)):
                contrib = (gw * w_k).reshape(B, C, H * W)
                for b in range(B):
                    for c in range(C):
                        acc[b, c] += np.bincount(idx_k[b, 0], weights=contrib[b, c], minlength=H * W).astype(video.dtype)
            gvid[:, frame * C:(frame + 1) * C] = acc.reshape(B, C, H, W)
    gdt *= inside
    return gdx, gdy, gdt, gvid
