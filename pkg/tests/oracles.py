"""Independent scalar reference implementations used as test oracles.

Nothing here imports the package; each function is a direct loop over the
defining formula so it can be checked by eye.
"""
import math


def clamp(v, lo, hi):
    return lo if v < lo else hi if v > hi else v


def pixel(frame, x, y):
    """frame[y][x] with out-of-range indices clamped to the border."""
    H, W = len(frame), len(frame[0])
    return frame[clamp(y, 0, H - 1)][clamp(x, 0, W - 1)]


def bilinear(frame, x, y):
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * pixel(frame, x0, y0) + fx * (1 - fy) * pixel(frame, x0 + 1, y0)
            + (1 - fx) * fy * pixel(frame, x0, y0 + 1) + fx * fy * pixel(frame, x0 + 1, y0 + 1))


def trilinear_sample(frame0, frame1, dx, dy, dt):
    """Brute-force voxel-flow synthesis of one channel.

    ``frame0``/``frame1`` are nested lists [y][x]; ``dx``, ``dy``, ``dt`` are
    nested lists of per-pixel flow. Loops over all eight corners explicitly.
    """
    H, W = len(frame0), len(frame0[0])
    out = [[0.0] * W for _ in range(H)]
    for y in range(H):
        for x in range(W):
            t = clamp(dt[y][x], 0.0, 1.0)
            total = 0.0
            for k, (frame, sign) in enumerate(((frame0, -1), (frame1, 1))):
                lx, ly = x + sign * dx[y][x], y + sign * dy[y][x]
                x0, y0 = math.floor(lx), math.floor(ly)
                for j in (0, 1):
                    for i in (0, 1):
                        wx = (lx - x0) if i else (1 - (lx - x0))
                        wy = (ly - y0) if j else (1 - (ly - y0))
                        wt = t if k else 1 - t
                        total += wx * wy * wt * pixel(frame, x0 + i, y0 + j)
            out[y][x] = total
    return out


def direct_conv2d(x, w, b):
    """'same' zero-padded convolution of nested lists x[c][y][x], w[o][c][i][j]."""
    C, H, W = len(x), len(x[0]), len(x[0][0])
    O, k = len(w), len(w[0][0])
    r = k // 2
    out = [[[b[o]] * W for _ in range(H)] for o in range(O)]
    for o in range(O):
        for yy in range(H):
            for xx in range(W):
                s = b[o]
                for c in range(C):
                    for i in range(k):
                        for j in range(k):
                            sy, sx = yy + i - r, xx + j - r
                            if 0 <= sy < H and 0 <= sx < W:
                                s += w[o][c][i][j] * x[c][sy][sx]
                out[o][yy][xx] = s
    return out


def mse_two_loops(a, b):
    """Mean squared error of two nested [y][x] lists."""
    H, W = len(a), len(a[0])
    s = 0.0
    for y in range(H):
        for x in range(W):
            d = a[y][x] - b[y][x]
            s += d * d
    return s / (H * W)


def psnr_from_mse(mse, peak=1.0):
    return 10 * math.log10(peak * peak / mse)


def epe_loop(pu, pv, gu, gv):
    """Mean endpoint error over nested [y][x] flow components."""
    H, W = len(pu), len(pu[0])
    s = 0.0
    for y in range(H):
        for x in range(W):
            s += math.sqrt((pu[y][x] - gu[y][x]) ** 2 + (pv[y][x] - gv[y][x]) ** 2)
    return s / (H * W)


def align_corners_row(row, n_out):
    """Align-corners linear resampling of a 1-D list to ``n_out`` entries."""
    n_in = len(row)
    out = []
    for i in range(n_out):
        pos = i * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        lo = min(int(math.floor(pos)), max(n_in - 2, 0))
        f = pos - lo
        hi = min(lo + 1, n_in - 1)
        out.append((1 - f) * row[lo] + f * row[hi])
    return out


def central_difference(f, x, h):
    """Scalar central difference of callable ``f`` at float ``x``."""
    return (f(x + h) - f(x - h)) / (2 * h)
