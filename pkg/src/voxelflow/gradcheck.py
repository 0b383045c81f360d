"""Finite-difference verification of every hand-written backward pass.

Each check returns the worst relative error it saw. Relative error of an
analytic gradient ``a`` against a numeric one ``n`` is
``max|a - n| / max(max|a|, max|n|)``.
"""
from dataclasses import dataclass

import numpy as np

from . import losses, nn, sampler
from .model import NetworkConfig, build_network


@dataclass
class CheckResult:
    component: str
    worst: float
    tol: float
    note: str = ""

    @property
    def passed(self):
        return bool(np.isfinite(self.worst) and self.worst < self.tol)

    def as_record(self):
        status = "PASS" if self.passed else "FAIL"
        line = f"{status} component={self.component} worst_rel_err={self.worst:.3e} tol={self.tol:.0e}"
        return f"{line} {self.note}" if self.note else line


def rel_error(a, n, floor=0.0):
    """``floor`` bounds the denominator below, for tensors whose true gradient is ~0."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0), np.abs(n).max(initial=0), floor)
    if scale == 0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (modified in place)."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


# -- kernels -------------------------------------------------------------------

def check_conv2d(rng):
    worst = 0.0
    for k in (1, 3, 5):
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((2, 3, k, k))
        b = rng.standard_normal(2)
        R = rng.standard_normal((2, 2, 6, 6))
        f = lambda: float((nn.conv2d_forward(x, w, b)[0] * R).sum())
        _, cache = nn.conv2d_forward(x, w, b)
        dx, dw, db = nn.conv2d_backward(R, cache)
        worst = max(worst, rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, w)),
                    rel_error(db, numeric_grad(f, b)))
    return worst


def well_separated(rng, shape, gap=0.05):
    """Random values whose pairwise gaps all exceed ``gap`` (unique pooling argmax)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(0, gap / 10, n)).reshape(shape) - n * gap / 2


def check_maxpool2(rng):
    x = well_separated(rng, (1, 2, 6, 6))
    R = rng.standard_normal((1, 2, 3, 3))
    f = lambda: float((nn.maxpool2_forward(x)[0] * R).sum())
    _, arg = nn.maxpool2_forward(x)
    return rel_error(nn.maxpool2_backward(R, arg), numeric_grad(f, x))


def check_upsample(rng):
    """Adjoint identity <Ax, y> = <x, A^T y>, plus finite differences."""
    x = rng.standard_normal((2, 2, 3, 5))
    y = rng.standard_normal((2, 2, 6, 10))
    Ax, cache = nn.upsample_bilinear2x_forward(x)
    ATy = nn.upsample_bilinear2x_backward(y, cache)
    lhs, rhs = float((Ax * y).sum()), float((x * ATy).sum())
    adjoint = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12)
    f = lambda: float((nn.upsample_bilinear2x_forward(x)[0] * y).sum())
    return max(adjoint, rel_error(ATy, numeric_grad(f, x)))


def check_activation(rng):
    worst = 0.0
    for kind in ("relu", "tanh"):
        x = rng.standard_normal((2, 3, 4, 4))
        x[np.abs(x) < 0.01] = 0.5  # keep relu away from its kink
        R = rng.standard_normal(x.shape)
        f = lambda: float((nn.activation_forward(x, kind)[0] * R).sum())
        _, cache = nn.activation_forward(x, kind)
        worst = max(worst, rel_error(nn.activation_backward(R, cache, kind), numeric_grad(f, x)))
    return worst


def check_concat(rng):
    a = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal((2, 3, 3, 3))
    y, n = nn.concat_channels(a, b)
    da, db = nn.split_channels(y, n)
    return max(rel_error(da, a), rel_error(db, b))


def check_batchnorm(rng):
    x = rng.standard_normal((3, 2, 4, 4)) * 2 + 1
    gamma = rng.standard_normal(2)
    beta = rng.standard_normal(2)
    R = rng.standard_normal(x.shape)

    def f():
        rm, rv = np.zeros(2), np.ones(2)
        return float((nn.batchnorm_forward(x, gamma, beta, rm, rv, True)[0] * R).sum())

    _, cache = nn.batchnorm_forward(x, gamma, beta, np.zeros(2), np.ones(2), True)
    dx, dg, db = nn.batchnorm_backward(R, cache)
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dg, numeric_grad(f, gamma)),
               rel_error(db, numeric_grad(f, beta)))


def check_adam(rng):
    """First Adam step moves every parameter by -lr * sign(g) (bias correction)."""
    p = nn.Param(rng.standard_normal(10))
    g = rng.standard_normal(10)
    p.grad[...] = g
    start = p.value.copy()
    st = nn.AdamState(lr=1e-3)
    nn.adam_step([p], st)
    want = -1e-3 * g / (np.abs(g) + 1e-8)
    return rel_error(p.value - start, want)


# -- sampler -------------------------------------------------------------------

def off_lattice_flow(rng, B, H, W, spread=3.0, margin=0.01):
    """Random flow whose sample coordinates all stay ``margin`` away from integers."""
    def frac_safe(v):
        f = v - np.floor(v)
        bad = (f < margin) | (f > 1 - margin)
        return np.where(bad, v + 0.5, v)

    dx = frac_safe(rng.uniform(-spread, spread, (B, H, W)))
    dy = frac_safe(rng.uniform(-spread, spread, (B, H, W)))
    # x +/- dx shares dx's fractional part up to reflection, so both samples are safe
    dt = rng.uniform(0.05, 0.95, (B, H, W))
    return sampler.VoxelFlowField(dx, dy, dt)


def check_sampler(rng, h=1e-3, B=4, H=16, W=16):
    """Flow and input gradients at B*H*W off-lattice points (1024 by default)."""
    C = 2
    video = rng.standard_normal((B, 2 * C, H, W))
    flow = off_lattice_flow(rng, B, H, W)
    R = rng.standard_normal((B, C, H, W))
    f = lambda: float((sampler.sample_forward(video, flow) * R).sum())
    g = sampler.sample_backward(video, flow, R, need_input=True)
    worst = 0.0
    for name in ("dx", "dy", "dt"):
        worst = max(worst, rel_error(getattr(g, f"d_{name}"), numeric_grad(f, getattr(flow, name), h)))
    return max(worst, rel_error(g.d_input, numeric_grad(f, video, h)))


# -- losses --------------------------------------------------------------------

def check_losses(rng):
    cfg = losses.LossConfig(0.01, 0.005, 0.001)
    pred = rng.standard_normal((2, 1, 5, 5)) * 0.1
    target = rng.standard_normal((2, 1, 5, 5)) * 0.1
    f = lambda: losses.reconstruction_loss(pred, target, cfg)[0]
    worst = rel_error(losses.reconstruction_loss(pred, target, cfg)[1], numeric_grad(f, pred, 1e-5))
    field = rng.standard_normal((2, 5, 5)) * 0.1
    f = lambda: losses.tv_regularizer(field, cfg)[0]
    worst = max(worst, rel_error(losses.tv_regularizer(field, cfg)[1], numeric_grad(f, field, 1e-5)))
    x = rng.standard_normal(20) * 0.01
    f_vec = lambda: float(losses.charbonnier(x, cfg.eps_charb).sum())
    worst = max(worst, rel_error(losses.charbonnier_grad(x, cfg.eps_charb), numeric_grad(f_vec, x, 1e-6)))
    flow = sampler.VoxelFlowField(*(rng.standard_normal((2, 5, 5)) * 0.1 for _ in range(3)))
    f = lambda: losses.total_loss(pred, target, flow, cfg)[0].total
    _, dp, (gx, gy, gt) = losses.total_loss(pred, target, flow, cfg)
    worst = max(worst, rel_error(dp, numeric_grad(f, pred, 1e-5)))
    for a, name in ((gx, "dx"), (gy, "dy"), (gt, "dt")):
        worst = max(worst, rel_error(a, numeric_grad(f, getattr(flow, name), 1e-5)))
    return worst


# -- full pipeline -------------------------------------------------------------

def tiny_network(dtype=np.float64, seed=0, scales=(1,), steps=1):
    cfg = NetworkConfig(channels=1, widths=(2, 2, 2), bottleneck=2, flow_range=2.0, init_std=0.5,
                        steps=steps, scales=scales, fusion_width=2)
    net = build_network(cfg, seed, dtype)
    # zero biases put every sample of a dead-relu region exactly on the
    # lattice, where the sampler is only one-sided differentiable
    rng = np.random.default_rng([seed, 7])
    for name, p in net.params().items():
        if name.endswith("bias"):
            p.value[...] = rng.uniform(-0.3, 0.3, p.value.shape)
    return net


def smooth_frames(rng, batch, channels, size):
    """Low-frequency plane waves; keeps the sampler's slope jumps at lattice crossings small."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    kx = rng.uniform(0.3, 1.0, (batch, channels, 1, 1))
    ky = rng.uniform(-0.5, 0.5, (batch, channels, 1, 1))
    ph = rng.uniform(0, 2 * np.pi, (batch, channels, 1, 1))
    return 0.5 * np.sin(2 * np.pi * (kx * xx + ky * yy) + ph)


def _loss_fn(net, X, Y, cfg):
    from .trainer import forward_backward

    def f():
        net.zero_grad()
        return forward_backward(net, X, Y, cfg).total
    return f


MAX_KINK_FRACTION = 0.15


def check_full(rng, dtype=np.float64, h=None, batch=8, size=8):
    """Total-loss gradient w.r.t. every network parameter vs central differences.

    With a large step (needed for 32-bit round-off) some entries have a relu,
    pooling or lattice kink within +/-h. Those are found from the loss alone,
    by comparing 64-bit differences at h and h/4, and left out; the check
    fails if more than ``MAX_KINK_FRACTION`` of entries had to be left out.
    """
    from .trainer import TrainConfig

    if h is None:
        h = 1e-2 if dtype == np.float32 else 1e-6
    seed = int(rng.integers(1 << 30))
    net = tiny_network(dtype, seed)
    cfg = TrainConfig(batch=batch, D=1)
    X = smooth_frames(rng, batch, 2, size)
    Y = 0.5 * (X[:, :1] + X[:, 1:]) + 0.1 * smooth_frames(rng, batch, 1, size)
    f = _loss_fn(net, X.astype(dtype), Y.astype(dtype), cfg)
    params = net.params()
    f()
    analytic = {k: p.grad.astype(np.float64).copy() for k, p in params.items()}
    scale = max(np.abs(g).max() for g in analytic.values())

    ref = ref_f = None
    if h > 1e-4:
        ref = tiny_network(np.float64, seed)
        for k, p in ref.params().items():
            p.value[...] = params[k].value
        ref_f = _loss_fn(ref, X, Y, cfg)

    worst, total, skipped = 0.0, 0, 0
    for name, p in params.items():
        num = numeric_grad(f, p.value, h)
        keep = np.ones(num.shape, dtype=bool)
        if ref is not None:
            q = ref.params()[name].value
            keep = np.abs(numeric_grad(ref_f, q, h) - numeric_grad(ref_f, q, h / 4)) <= 1e-3 * scale
        total += keep.size
        skipped += int((~keep).sum())
        if keep.any():
            # biases feeding batch norm have zero true gradient; judge every
            # tensor against the network-wide gradient scale
            worst = max(worst, float(np.abs(analytic[name] - num)[keep].max() / scale))
    note = f"checked={total - skipped}/{total}"
    if skipped > MAX_KINK_FRACTION * total:
        return float("inf"), note
    return worst, note


KERNEL_CHECKS = {
    "conv2d": (check_conv2d, 1e-4),
    "maxpool2": (check_maxpool2, 1e-4),
    "upsample_bilinear2x": (check_upsample, 1e-5),
    "concat_channels": (check_concat, 1e-12),
    "activation": (check_activation, 1e-4),
    "batchnorm": (check_batchnorm, 1e-3),
    "adam": (check_adam, 1e-6),
}

SCOPES = {
    "kernels": KERNEL_CHECKS,
    "sampler": {"sampler": (check_sampler, 1e-4)},
    "losses": {"losses": (check_losses, 1e-4)},
    "full": {"full_float64": (check_full, 1e-4),
             "full_float32": (lambda rng: check_full(rng, np.float32), 1e-2)},
}


def run(scope="all", seed=0):
    """Run the checks in ``scope`` (kernels | sampler | losses | full | all)."""
    names = list(SCOPES) if scope == "all" else [scope]
    out = []
    for s in names:
        if s not in SCOPES:
            raise ValueError(f"unknown gradcheck scope {s!r}; choose from {', '.join(SCOPES)} or all")
        for comp, (fn, tol) in SCOPES[s].items():
            res = fn(np.random.default_rng([seed, len(out)]))
            worst, note = res if isinstance(res, tuple) else (res, "")
            out.append(CheckResult(comp, worst, tol, note))
    return out
