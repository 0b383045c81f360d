"""Fully-convolutional encoder-decoder producing voxel flow fields.

Single-scale network::

    x -> [conv5 bn relu] -> pool -> [conv5 bn relu] -> pool -> [conv3 bn relu] -> pool
      -> [conv3 bn relu]                                           (bottleneck)
      -> up ++ e3 -> [conv3 bn relu] -> up ++ e2 -> [conv5 bn relu]
      -> up ++ e1 -> [conv5 bn relu] -> conv1x1 -> 3*D raw channels

``++`` is channel concatenation with the encoder activation of the same
resolution. Raw channels go through tanh; spatial offsets are scaled to
``[-flow_range, flow_range]`` pixels and the blend channel to ``[0, 1]``.

The multi-scale variant runs one such network per resolution. Spatial flow
from each coarse network is upsampled to the finest grid, rescaled to fine
pixel units, convolved to ``fusion_width`` channels and concatenated with
the finest network's last decoder activation before the fused head.
"""
from dataclasses import dataclass, fields, asdict

import numpy as np

from . import nn
from .nn import ShapeError
from .sampler import VoxelFlowField


@dataclass
class NetworkConfig:
    input_frames: int = 2
    channels: int = 1
    enc_kernels: tuple = (5, 5, 3)
    dec_kernels: tuple = (3, 5, 5)
    widths: tuple = (32, 64, 128)
    bottleneck: int = 256
    bottleneck_kernel: int = 3
    flow_range: float = 4.0
    use_batchnorm: bool = True
    activation: str = "relu"
    steps: int = 1  # D, number of target frames
    init_std: float = 0.01
    scales: tuple = (1,)  # downsampling factors, finest first
    fusion_width: int = 32

    def __post_init__(self):
        self.enc_kernels = tuple(int(k) for k in self.enc_kernels)
        self.dec_kernels = tuple(int(k) for k in self.dec_kernels)
        self.widths = tuple(int(w) for w in self.widths)
        self.scales = tuple(int(s) for s in self.scales)
        for k in self.enc_kernels + self.dec_kernels + (self.bottleneck_kernel,):
            if k % 2 == 0 or k < 1:
                raise ValueError(f"kernel sizes must be odd, got {k}")
        if len(self.enc_kernels) != 3 or len(self.dec_kernels) != 3 or len(self.widths) != 3:
            raise ValueError("the encoder and decoder have exactly three stages")
        if self.steps < 1:
            raise ValueError("steps (D) must be >= 1")
        if self.flow_range <= 0:
            raise ValueError("flow_range must be positive")
        if self.scales[0] != 1 or any(b != 2 * a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be 1, 2, 4, ... (each coarser level halves resolution), got {self.scales}")

    @property
    def in_channels(self):
        return self.input_frames * self.channels

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def default_flow_range(height, width):
    return max(height, width) / 8


def check_extents(height, width, multiple=8):
    if height % multiple or width % multiple:
        raise ShapeError(f"input extents {height}x{width} must be divisible by {multiple} "
                         "(three 2x pooling stages per scale)")


# -- head activation mapping ---------------------------------------------------

def flows_from_raw(raw, flow_range):
    """Map raw head output (B, 3*D, H, W) to D voxel flow fields."""
    if raw.shape[1] % 3:
        raise ShapeError(f"head output has {raw.shape[1]} channels, not a multiple of 3")
    th = np.tanh(raw)
    out = []
    for d in range(raw.shape[1] // 3):
        a = th[:, 3 * d:3 * d + 3]
        out.append(VoxelFlowField(np.ascontiguousarray(flow_range * a[:, 0]),
                                  np.ascontiguousarray(flow_range * a[:, 1]),
                                  np.ascontiguousarray((a[:, 2] + 1) / 2)))
    return out, th


def raw_grad_from_flows(grads, th, flow_range):
    """Backward of :func:`flows_from_raw`; ``grads`` is a list of (d_dx, d_dy, d_dt)."""
    draw = np.empty_like(th)
    sech2 = 1 - th * th
    for d, (gx, gy, gt) in enumerate(grads):
        draw[:, 3 * d] = flow_range * gx * sech2[:, 3 * d]
        draw[:, 3 * d + 1] = flow_range * gy * sech2[:, 3 * d + 1]
        draw[:, 3 * d + 2] = 0.5 * gt * sech2[:, 3 * d + 2]
    return draw


# -- building blocks -------------------------------------------------------------

class ConvUnit:
    """conv -> (batchnorm) -> activation."""

    def __init__(self, cin, cout, k, rng, cfg, dtype):
        self.conv = nn.Conv2d(cin, cout, k, rng, cfg.init_std, dtype)
        self.bn = nn.BatchNorm2d(cout, dtype) if cfg.use_batchnorm else None
        self.kind = cfg.activation
        self._act = None

    def params(self):
        p = {f"conv.{k}": v for k, v in self.conv.params().items()}
        if self.bn is not None:
            p.update({f"bn.{k}": v for k, v in self.bn.params().items()})
        return p

    def buffers(self):
        return {} if self.bn is None else {f"bn.{k}": v for k, v in self.bn.buffers().items()}

    def forward(self, x, train):
        y = self.conv.forward(x)
        if self.bn is not None:
            y = self.bn.forward(y, train)
        y, self._act = nn.activation_forward(y, self.kind)
        return y

    def backward(self, dy):
        dy = nn.activation_backward(dy, self._act, self.kind)
        if self.bn is not None:
            dy = self.bn.backward(dy)
        return self.conv.backward(dy)


class VoxelFlowNet:
    """Single-scale encoder-decoder."""

    def __init__(self, cfg, rng, dtype=np.float32, head=True):
        self.cfg = cfg
        w1, w2, w3 = cfg.widths
        k1, k2, k3 = cfg.enc_kernels
        d3, d2, d1 = cfg.dec_kernels
        self.enc = [ConvUnit(cfg.in_channels, w1, k1, rng, cfg, dtype),
                    ConvUnit(w1, w2, k2, rng, cfg, dtype),
                    ConvUnit(w2, w3, k3, rng, cfg, dtype)]
        self.mid = ConvUnit(w3, cfg.bottleneck, cfg.bottleneck_kernel, rng, cfg, dtype)
        self.dec = [ConvUnit(cfg.bottleneck + w3, w3, d3, rng, cfg, dtype),
                    ConvUnit(w3 + w2, w2, d2, rng, cfg, dtype),
                    ConvUnit(w2 + w1, w1, d1, rng, cfg, dtype)]
        self.head = nn.Conv2d(w1, 3 * cfg.steps, 1, rng, cfg.init_std, dtype) if head else None
        self._cache = None

    def _units(self):
        units = [(f"enc{i}", u) for i, u in enumerate(self.enc)] + [("mid", self.mid)]
        return units + [(f"dec{i}", u) for i, u in enumerate(self.dec)]

    def params(self):
        p = {}
        for name, u in self._units():
            p.update({f"{name}.{k}": v for k, v in u.params().items()})
        if self.head is not None:
            p.update({f"head.{k}": v for k, v in self.head.params().items()})
        return p

    def buffers(self):
        b = {}
        for name, u in self._units():
            b.update({f"{name}.{k}": v for k, v in u.buffers().items()})
        return b

    def features(self, x, train=True):
        """Encoder-decoder trunk; returns the last decoder activation."""
        skips, pools, ups, cats = [], [], [], []
        h = x
        for u in self.enc:
            h = u.forward(h, train)
            skips.append(h)
            h, arg = nn.maxpool2_forward(h)
            pools.append(arg)
        h = self.mid.forward(h, train)
        for u, skip in zip(self.dec, reversed(skips)):
            h, up = nn.upsample_bilinear2x_forward(h)
            h, n = nn.concat_channels(h, skip)
            ups.append(up)
            cats.append(n)
            h = u.forward(h, train)
        self._cache = (pools, ups, cats)
        return h

    def features_backward(self, dh):
        pools, ups, cats = self._cache
        dskips = []
        for u, up, n in zip(reversed(self.dec), reversed(ups), reversed(cats)):
            dh = u.backward(dh)
            dh, dskip = nn.split_channels(dh, n)
            dskips.append(dskip)
            dh = nn.upsample_bilinear2x_backward(dh, up)
        dh = self.mid.backward(dh)
        # dskips runs finest-first; the encoder is walked deepest-first
        for u, arg, dskip in zip(reversed(self.enc), reversed(pools), reversed(dskips)):
            dh = nn.maxpool2_backward(dh, arg) + dskip
            dh = u.backward(dh)
        return dh

    def forward(self, x, train=True):
        """Raw head output (B, 3*D, H, W)."""
        check_extents(*x.shape[2:])
        return self.head.forward(self.features(x, train))

    def backward(self, draw):
        return self.features_backward(self.head.backward(draw))


class MultiScaleNet:
    """Coarse-to-fine pyramid of :class:`VoxelFlowNet` with flow fusion.

    With a single scale this is exactly a :class:`VoxelFlowNet` built from the
    same seed.
    """

    def __init__(self, cfg, seed, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        n = len(cfg.scales)
        fused = n > 1
        self.nets = [VoxelFlowNet(cfg, np.random.default_rng(seed), dtype, head=not fused)]
        for k in range(1, n):
            self.nets.append(VoxelFlowNet(cfg, np.random.default_rng([seed, k]), dtype))
        self.fuse_in = []
        self.fuse = []
        if fused:
            rng = np.random.default_rng([seed, 1000])
            fw = cfg.fusion_width
            sd = cfg.init_std
            for _ in range(1, n):
                self.fuse_in.append(nn.Conv2d(2 * cfg.steps, fw, 3, rng, sd, dtype))
            self.fuse = [nn.Conv2d(cfg.widths[0] + fw * (n - 1), fw, 3, rng, sd, dtype),
                         nn.Conv2d(fw, 3 * cfg.steps, 1, rng, sd, dtype)]
        self._cache = None

    @property
    def n_scales(self):
        return len(self.nets)

    @property
    def fused_channels(self):
        """Channel count of the concatenated fusion layer."""
        if self.n_scales == 1:
            return 3 * self.cfg.steps
        return self.cfg.widths[0] + self.cfg.fusion_width * (self.n_scales - 1)

    def params(self):
        p = {}
        for k, net in enumerate(self.nets):
            p.update({f"s{k}.{name}": v for name, v in net.params().items()})
        for i, c in enumerate(self.fuse_in):
            p.update({f"fuse_in{i + 1}.{name}": v for name, v in c.params().items()})
        for i, c in enumerate(self.fuse):
            p.update({f"fuse{i}.{name}": v for name, v in c.params().items()})
        return p

    def buffers(self):
        b = {}
        for k, net in enumerate(self.nets):
            b.update({f"s{k}.{name}": v for name, v in net.buffers().items()})
        return b

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()

    def range_at(self, k):
        return self.cfg.flow_range / self.cfg.scales[k]

    def forward(self, video, train=True):
        """Returns ``(flows, coarse)``.

        ``flows`` is the list of D finest-scale fields; ``coarse[k-1]`` holds
        ``(video_k, flows_k)`` for every coarse level k, with flows in that
        level's own pixel units.
        """
        H, W = video.shape[2:]
        check_extents(H, W, 8 * self.cfg.scales[-1])
        if video.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"video has {video.shape[1]} channels, network expects {self.cfg.in_channels}")
        if self.n_scales == 1:
            raw = self.nets[0].forward(video, train)
            flows, th = flows_from_raw(raw, self.cfg.flow_range)
            self._cache = (th, None)
            return flows, []
        pyramid = [video]
        for _ in range(1, self.n_scales):
            pyramid.append(nn.avgpool2(pyramid[-1]))
        coarse, coarse_th, up_caches, branch = [], [], [], []
        for k in range(1, self.n_scales):
            raw_k = self.nets[k].forward(pyramid[k], train)
            flows_k, th_k = flows_from_raw(raw_k, self.range_at(k))
            coarse.append((pyramid[k], flows_k))
            coarse_th.append(th_k)
            spatial = np.concatenate([np.stack([f.dx, f.dy], axis=1) for f in flows_k], axis=1)
            ups = []
            for _ in range(k):
                spatial, c = nn.upsample_bilinear2x_forward(spatial)
                ups.append(c)
            spatial = spatial * self.cfg.scales[k]
            up_caches.append(ups)
            h, a = nn.relu_forward(self.fuse_in[k - 1].forward(spatial))
            branch.append((h, a))
        feat = self.nets[0].features(video, train)
        cat = np.concatenate([feat] + [h for h, _ in branch], axis=1)
        h, a0 = nn.relu_forward(self.fuse[0].forward(cat))
        raw = self.fuse[1].forward(h)
        flows, th = flows_from_raw(raw, self.cfg.flow_range)
        self._cache = (th, (coarse_th, up_caches, [a for _, a in branch], a0, feat.shape[1]))
        return flows, coarse

    def backward(self, flow_grads, coarse_grads=()):
        """Accumulate parameter gradients.

        ``flow_grads`` holds (d_dx, d_dy, d_dt) per finest field;
        ``coarse_grads[k-1]`` the same for level k (may be empty).
        """
        th, extra = self._cache
        draw = raw_grad_from_flows(flow_grads, th, self.cfg.flow_range)
        if extra is None:
            self.nets[0].backward(draw)
            return
        coarse_th, up_caches, acts, a0, nfeat = extra
        dh = self.fuse[1].backward(draw)
        dcat = self.fuse[0].backward(nn.relu_backward(dh, a0))
        self.nets[0].features_backward(np.ascontiguousarray(dcat[:, :nfeat]))
        fw = self.cfg.fusion_width
        D = self.cfg.steps
        for k in range(1, self.n_scales):
            sl = dcat[:, nfeat + (k - 1) * fw:nfeat + k * fw]
            ds = self.fuse_in[k - 1].backward(nn.relu_backward(np.ascontiguousarray(sl), acts[k - 1]))
            ds = ds * self.cfg.scales[k]
            for c in reversed(up_caches[k - 1]):
                ds = nn.upsample_bilinear2x_backward(ds, c)
            given = coarse_grads[k - 1] if len(coarse_grads) >= k else None
            grads = []
            for d in range(D):
                gx, gy = ds[:, 2 * d], ds[:, 2 * d + 1]
                if given is not None:
                    gx = gx + given[d][0]
                    gy = gy + given[d][1]
                    gt = given[d][2]
                else:
                    gt = np.zeros_like(gx)
                grads.append((gx, gy, gt))
            self.nets[k].backward(raw_grad_from_flows(grads, coarse_th[k - 1], self.range_at(k)))


def build_network(cfg, seed, dtype=np.float32):
    """Gaussian-initialized network (single- or multi-scale per ``cfg.scales``)."""
    return MultiScaleNet(cfg, seed, dtype)


def build_single_scale(cfg, seed, dtype=np.float32):
    if len(cfg.scales) != 1:
        cfg = NetworkConfig.from_dict({**cfg.to_dict(), "scales": (1,)})
    return MultiScaleNet(cfg, seed, dtype)


def build_multiscale(cfg, scales, seed, dtype=np.float32):
    """Pyramid for resolutions ``scales`` given coarse-to-fine or fine-to-coarse.

    ``scales`` are edge lengths such as ``(16, 32, 64)``; each must be half the
    next finer one.
    """
    sizes = sorted(int(s) for s in scales)[::-1]
    if any(a != 2 * b for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"scale resolutions must halve successively, got {tuple(scales)}")
    factors = tuple(sizes[0] // s for s in sizes)
    return MultiScaleNet(NetworkConfig.from_dict({**cfg.to_dict(), "scales": factors}), seed, dtype)


def forward_flow(net, video, train=False):
    """First (or only) finest-scale voxel flow field for ``video``."""
    return net.forward(video, train)[0][0]


def forward_multistep(net, video, train=False):
    """All D finest-scale flow fields."""
    return net.forward(video, train)[0]


def forward_multiscale(net, video, train=False):
    """``(finest flows, [flows at each coarser level])``."""
    flows, coarse = net.forward(video, train)
    return flows, [f for _, f in coarse]
