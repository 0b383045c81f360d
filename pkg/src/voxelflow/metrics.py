"""Image-fidelity and flow metrics: PSNR, SSIM, motion masks, endpoint error.

Images passed to :func:`psnr` and :func:`ssim` are in [0, 1] with layout
(C, H, W) or (H, W). Masks are boolean (H, W) and select pixels across all
channels.
"""
from dataclasses import dataclass

import numpy as np

from .nn import ShapeError

PSNR_CAP = 99.0
MOTION_TAU = 0.05
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    epe: float = None
    region: str = "full"

    def as_record(self, prefix=""):
        parts = [f"{prefix}psnr={self.psnr_db:.4f}", f"{prefix}ssim={self.ssim:.5f}"]
        if self.epe is not None:
            parts.append(f"{prefix}epe={self.epe:.4f}")
        return " ".join(parts)


def _as_chw(a):
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == 2 else a


def _mask_for(mask, shape):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.shape != shape[-2:]:
        raise ShapeError(f"mask shape {m.shape} does not match image extents {shape[-2:]}")
    if not m.any():
        raise ValueError("mask selects no pixels")
    return m


def psnr_from_mse(mse, peak=1.0):
    """10·log10(peak² / mse) in dB, capped at 99 dB (also for mse = 0)."""
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(peak * peak / mse)))


def psnr(a, b, mask=None):
    """Peak signal-to-noise ratio in dB with peak 1.0, capped at 99 dB."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    m = _mask_for(mask, a.shape)
    err = (a - b) ** 2
    mse = err.mean() if m is None else err[:, m].mean()
    return psnr_from_mse(mse)


def _gauss_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - size // 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter(img, g):
    """Separable 'same' Gaussian filtering with symmetric edge reflection."""
    p = len(g) // 2
    x = np.pad(img, ((p, p), (0, 0)), mode="symmetric")
    x = sum(g[i] * x[i:i + img.shape[0]] for i in range(len(g)))
    x = np.pad(x, ((0, 0), (p, p)), mode="symmetric")
    return sum(g[i] * x[:, i:i + img.shape[1]] for i in range(len(g)))


def ssim_map(a, b):
    """Local SSIM per pixel for 2-D images in [0, 1]."""
    g = _gauss_kernel()
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    saa = _filter(a * a, g) - mu_a ** 2
    sbb = _filter(b * b, g) - mu_b ** 2
    sab = _filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    return num / den


def ssim(a, b, mask=None):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs extents >= {SSIM_WINDOW}, got {a.shape[-2:]}")
    m = _mask_for(mask, a.shape)
    maps = np.stack([ssim_map(x, y) for x, y in zip(a, b)])
    return float(maps.mean() if m is None else maps[:, m].mean())


def _dilate(mask):
    out = mask.copy()
    H, W = mask.shape
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out[max(dy, 0):H + min(dy, 0), max(dx, 0):W + min(dx, 0)] |= \
                mask[max(-dy, 0):H + min(-dy, 0), max(-dx, 0):W + min(-dx, 0)]
    return out


def motion_mask(frame0, frame1, tau=MOTION_TAU):
    """Pixels whose value changes by more than ``tau`` (in [-1, 1] units), dilated by one."""
    f0, f1 = _as_chw(frame0), _as_chw(frame1)
    if f0.shape != f1.shape:
        raise ShapeError(f"frame shapes differ: {f0.shape} vs {f1.shape}")
    return _dilate(np.abs(f1 - f0).max(axis=0) > tau)


def endpoint_error(pred_flow, gt_flow, mask=None):
    """Mean Euclidean distance between two (2, H, W) flow fields over ``mask``."""
    p = np.asarray(pred_flow, dtype=np.float64)
    g = np.asarray(gt_flow, dtype=np.float64)
    if p.shape != g.shape or p.shape[0] != 2:
        raise ShapeError(f"flow fields must both be (2, H, W), got {p.shape} and {g.shape}")
    m = _mask_for(mask, p.shape)
    d = np.sqrt(((p - g) ** 2).sum(axis=0))
    return float(d.mean() if m is None else d[m].mean())


def format_table(rows, columns):
    """Plain-text aggregate table; ``rows`` are dicts keyed by ``columns``."""
    widths = [max(len(c), *(len(_fmt(r.get(c))) for r in rows)) for c in columns]
    line = "  ".join(c.rjust(w) for c, w in zip(columns, widths))
    out = [line, "-" * len(line)]
    for r in rows:
        out.append("  ".join(_fmt(r.get(c)).rjust(w) for c, w in zip(columns, widths)))
    return "\n".join(out)


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
