"""Charbonnier reconstruction loss and total-variation regularizers."""
from dataclasses import dataclass, field

import numpy as np

from .nn import ShapeError


@dataclass
class LossConfig:
    lambda1: float = 0.01
    lambda2: float = 0.005
    eps_charb: float = 0.001

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.eps_charb <= 0:
            raise ValueError("lambda1, lambda2 must be >= 0 and eps_charb > 0")


@dataclass
class LossReport:
    total: float
    recon: float
    tv_motion: float
    tv_mask: float
    per_scale: tuple = field(default_factory=tuple)

    def as_record(self, step=None):
        parts = [] if step is None else [f"step={step}"]
        parts += [f"total={self.total:.8g}", f"recon={self.recon:.8g}",
                  f"tv_motion={self.tv_motion:.8g}", f"tv_mask={self.tv_mask:.8g}"]
        parts += [f"recon_s{i}={v:.8g}" for i, v in enumerate(self.per_scale)]
        return " ".join(parts)


def charbonnier(x, eps):
    """Smooth L1 surrogate ``sqrt(x^2 + eps^2)``."""
    return np.sqrt(x * x + eps * eps)


def charbonnier_grad(x, eps):
    return x / charbonnier(x, eps)


def reconstruction_loss(pred, target, cfg):
    """Mean Charbonnier penalty of ``pred - target`` and its gradient."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    phi = charbonnier(diff, cfg.eps_charb)
    return float(phi.mean(dtype=np.float64)), (diff / phi / diff.size).astype(pred.dtype)


def tv_regularizer(field, cfg):
    """Summed Charbonnier penalty on forward differences of each 2-D channel.

    ``field`` has shape (..., H, W). Pairs that would leave the grid are
    dropped. Returns ``(value, gradient)``.
    """
    if field.shape[-1] < 2 or field.shape[-2] < 2:
        raise ShapeError(f"total variation needs spatial extents >= 2, got {field.shape[-2:]}")
    eps = cfg.eps_charb
    gx = field[..., :, 1:] - field[..., :, :-1]
    gy = field[..., 1:, :] - field[..., :-1, :]
    value = float(charbonnier(gx, eps).sum(dtype=np.float64) + charbonnier(gy, eps).sum(dtype=np.float64))
    dgx = charbonnier_grad(gx, eps)
    dgy = charbonnier_grad(gy, eps)
    grad = np.zeros_like(field)
    grad[..., :, 1:] += dgx
    grad[..., :, :-1] -= dgx
    grad[..., 1:, :] += dgy
    grad[..., :-1, :] -= dgy
    return value, grad


def total_loss(pred, target, flow, cfg):
    """Reconstruction plus weighted TV on the motion and mask components.

    TV sums are divided by the pixel count ``batch*H*W`` so the weights do
    not depend on image size. The reconstruction gradient stops at ``pred``;
    chaining it through the sampler is the caller's job.

    Returns ``(report, d_pred, (d_dx, d_dy, d_dt))``.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if flow.dx.shape != (pred.shape[0],) + pred.shape[2:]:
        raise ShapeError(f"flow extents {flow.dx.shape} do not match prediction {pred.shape}")
    recon, d_pred = reconstruction_loss(pred, target, cfg)
    npix = flow.dx.size
    motion = np.stack([flow.dx, flow.dy], axis=0)
    tv_m, g_m = tv_regularizer(motion, cfg)
    tv_t, g_t = tv_regularizer(flow.dt, cfg)
    tv_m /= npix
    tv_t /= npix
    total = recon + cfg.lambda1 * tv_m + cfg.lambda2 * tv_t
    s1 = cfg.lambda1 / npix
    s2 = cfg.lambda2 / npix
    grads = ((s1 * g_m[0]).astype(pred.dtype), (s1 * g_m[1]).astype(pred.dtype), (s2 * g_t).astype(pred.dtype))
    return LossReport(total, recon, tv_m, tv_t), d_pred, grads
