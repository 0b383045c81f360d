"""Training and evaluation loops: network -> sampler -> loss -> Adam."""
from dataclasses import dataclass, field, fields, asdict
import logging
import math
import os

import numpy as np

from . import data, formats, losses, metrics, nn
from .model import NetworkConfig, build_network, default_flow_range
from .sampler import VoxelFlowField, sample_backward, sample_forward

log = logging.getLogger(__name__)

LR_SINGLE = 1e-4
LR_MULTISTEP = 5e-5
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_LAG = 100


class TrainingError(RuntimeError):
    """Numeric failure during training (non-finite loss or divergence)."""


@dataclass
class TrainConfig:
    lr: float = None  # None: 1e-4, or 5e-5 when D > 1
    beta1: float = 0.9
    beta2: float = 0.999
    batch: int = 8
    lambda1: float = 0.01
    lambda2: float = 0.005
    eps_charb: float = 0.001
    init_std: float = 0.01
    steps: int = 2000
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    scales: tuple = (1,)  # pyramid downsampling factors, finest first
    scale_weights: tuple = None  # reconstruction weight per scale; None: all 1
    D: int = 1
    mode: str = "interp"
    widths: tuple = (32, 64, 128)
    bottleneck: int = 256
    flow_range: float = None  # None: max(H, W) / 8 of the training frames
    batchnorm: bool = True
    channels: int = 1

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        self.widths = tuple(int(w) for w in self.widths)
        if self.scale_weights is None:
            self.scale_weights = (1.0,) * len(self.scales)
        self.scale_weights = tuple(float(w) for w in self.scale_weights)
        if len(self.scale_weights) != len(self.scales):
            raise ValueError(f"{len(self.scale_weights)} scale_weights for {len(self.scales)} scales")
        if any(w < 0 for w in self.scale_weights):
            raise ValueError("scale_weights must be non-negative")
        if self.lr is None:
            self.lr = LR_MULTISTEP if self.D > 1 else LR_SINGLE
        if self.mode not in ("interp", "extrap"):
            raise ValueError(f"mode must be interp or extrap, got {self.mode!r}")
        for name in ("lr", "eps_charb", "batch", "D"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0 or self.init_std < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("steps, init_std, lambda1 and lambda2 must be non-negative")
        if self.batchnorm and self.batch < 2:
            raise ValueError("batch normalization needs batch >= 2")

    def loss_config(self):
        return losses.LossConfig(self.lambda1, self.lambda2, self.eps_charb)

    def network_config(self, height=None, width=None):
        fr = self.flow_range
        if fr is None:
            fr = default_flow_range(height, width) if height else 4.0
        return NetworkConfig(channels=self.channels, widths=self.widths, bottleneck=self.bottleneck,
                             flow_range=fr, use_batchnorm=self.batchnorm, steps=self.D,
                             init_std=self.init_std, scales=self.scales)

    # key=value round trip ---------------------------------------------------
    def to_text(self):
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            out[k] = v
        return formats.format_key_values(out)

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string values; unknown keys raise ``KeyError``."""
        types = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in mapping.items():
            if key not in types:
                raise KeyError(key)
            kw[key] = _coerce(key, raw, cls.__dataclass_fields__[key].default)
        return cls(**kw)


_INT_KEYS = {"batch", "steps", "seed", "eval_every", "checkpoint_every", "D", "bottleneck", "channels"}
_FLOAT_KEYS = {"lr", "beta1", "beta2", "lambda1", "lambda2", "eps_charb", "init_std", "flow_range"}


def _coerce(key, raw, default):
    if not isinstance(raw, str):
        return raw
    if raw in ("None", ""):
        return None
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in ("scales", "widths"):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if key == "scale_weights":
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if key == "batchnorm":
        if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"batchnorm expects a boolean, got {raw!r}")
        return raw.lower() in ("1", "true", "yes")
    return raw


# -- checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    cfg: TrainConfig
    net: object
    adam: nn.AdamState
    step: int = 0
    loss_history: list = field(default_factory=list)

    @property
    def net_cfg(self):
        return self.net.cfg

    def tensors(self):
        out = {}
        for name, p in self.net.params().items():
            out[f"param/{name}"] = p.value
            out[f"adam_m/{name}"] = p.m
            out[f"adam_v/{name}"] = p.v
        for name, b in self.net.buffers().items():
            out[f"buffer/{name}"] = b
        out["meta/step"] = np.array([self.step], dtype=np.float32)
        out["meta/adam_step"] = np.array([self.adam.step_count], dtype=np.float32)
        hist = np.array(self.loss_history[-DIVERGENCE_LAG - 1:], dtype=np.float32)
        out["meta/loss_history"] = hist if hist.size else np.zeros(1, dtype=np.float32)
        out["meta/loss_history_len"] = np.array([hist.size], dtype=np.float32)
        return out

    def save(self, path):
        formats.write_checkpoint_tensors(path, self.tensors())
        with open(sidecar_path(path), "w") as f:
            f.write(self.cfg.to_text())
            f.write(formats.format_key_values({"net_flow_range": repr(float(self.net.cfg.flow_range))}))

    @classmethod
    def load(cls, path):
        try:
            with open(sidecar_path(path)) as f:
                kv = formats.parse_key_values(f.read())
        except FileNotFoundError:
            raise FileNotFoundError(f"checkpoint config sidecar missing: {sidecar_path(path)}") from None
        flow_range = float(kv.pop("net_flow_range"))
        cfg = TrainConfig.from_mapping(kv)
        tensors = formats.read_checkpoint_tensors(path)
        net_cfg = cfg.network_config()
        net_cfg.flow_range = flow_range
        net = build_network(net_cfg, cfg.seed)
        for name, p in net.params().items():
            for prefix, attr in (("param", "value"), ("adam_m", "m"), ("adam_v", "v")):
                key = f"{prefix}/{name}"
                if key not in tensors:
                    raise formats.FormatError(f"checkpoint lacks tensor {key!r}", 0)
                getattr(p, attr)[...] = tensors[key].reshape(p.value.shape)
        for name, b in net.buffers().items():
            b[...] = tensors[f"buffer/{name}"].reshape(b.shape)
        adam = nn.AdamState(cfg.lr, cfg.beta1, cfg.beta2, step_count=int(tensors["meta/adam_step"][0]))
        n = int(tensors["meta/loss_history_len"][0])
        hist = [float(v) for v in tensors["meta/loss_history"][:n]]
        return cls(cfg, net, adam, int(tensors["meta/step"][0]), hist)


def sidecar_path(path):
    return os.fspath(path) + ".cfg"


def init_checkpoint(cfg, height, width):
    net = build_network(cfg.network_config(height, width), cfg.seed)
    return Checkpoint(cfg, net, nn.AdamState(cfg.lr, cfg.beta1, cfg.beta2))


# -- one optimisation step ---------------------------------------------------------

def _stack_flows(flows):
    return VoxelFlowField(*(np.concatenate([getattr(f, a) for f in flows], axis=0) for a in ("dx", "dy", "dt")))


def _targets_by_step(Y, D):
    """(B, D*C, H, W) -> (D*B, C, H, W), step-major."""
    B, DC, H, W = Y.shape
    return np.ascontiguousarray(Y.reshape(B, D, DC // D, H, W).transpose(1, 0, 2, 3, 4)).reshape(D * B, DC // D, H, W)


def _downsample(x, times):
    for _ in range(times):
        x = nn.avgpool2(x)
    return x


def _finite(name, value):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss term {name}={value}")


def forward_backward(net, X, Y, cfg):
    """Loss and accumulated parameter gradients for one batch (no update)."""
    D = cfg.D
    lcfg = cfg.loss_config()
    B = X.shape[0]
    flows, coarse = net.forward(X, train=True)
    preds = np.concatenate([sample_forward(X, f) for f in flows], axis=0)
    report, d_pred, tv_grads = losses.total_loss(preds, _targets_by_step(Y, D), _stack_flows(flows), lcfg)
    _finite("recon", report.recon)
    _finite("tv_motion", report.tv_motion)
    _finite("tv_mask", report.tv_mask)
    w = cfg.scale_weights
    flow_grads = []
    for d, f in enumerate(flows):
        sl = slice(d * B, (d + 1) * B)
        g = sample_backward(X, f, w[0] * d_pred[sl] if w[0] != 1 else d_pred[sl])
        flow_grads.append((g.d_dx + tv_grads[0][sl], g.d_dy + tv_grads[1][sl], g.d_dt + tv_grads[2][sl]))
    per_scale = [report.recon]
    coarse_grads = []
    for k, (Xk, flows_k) in enumerate(coarse, start=1):
        Yk = _targets_by_step(_downsample(Y, k), D)
        pk = np.concatenate([sample_forward(Xk, f) for f in flows_k], axis=0)
        rk, dpk = losses.reconstruction_loss(pk, Yk, lcfg)
        _finite(f"recon_s{k}", rk)
        per_scale.append(rk)
        gk = []
        for d, f in enumerate(flows_k):
            g = sample_backward(Xk, f, w[k] * dpk[d * B:(d + 1) * B])
            gk.append((g.d_dx, g.d_dy, g.d_dt))
        coarse_grads.append(gk)
    net.backward(flow_grads, coarse_grads)
    if len(per_scale) > 1 or w[0] != 1:
        recon = float(sum(wk * r for wk, r in zip(w, per_scale)))
        total = recon + lcfg.lambda1 * report.tv_motion + lcfg.lambda2 * report.tv_mask
        report = losses.LossReport(total, recon, report.tv_motion, report.tv_mask, tuple(per_scale))
    _finite("total", report.total)
    return report


def train_step(ckpt, X, Y):
    """One Adam step on batch ``(X, Y)``; returns the :class:`LossReport`."""
    net = ckpt.net
    params = list(net.params().values())
    for p in params:
        p.zero_grad()
    report = forward_backward(net, X, Y, ckpt.cfg)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError("non-finite gradient")
    nn.adam_step(params, ckpt.adam)
    ckpt.step += 1
    return report


def batch_indices(cfg, step, n):
    rng = np.random.default_rng([cfg.seed, step])
    return rng.choice(n, size=cfg.batch, replace=n < cfg.batch)


def train(cfg, samples, ckpt=None, on_step=None, on_eval=None, eval_samples=None,
          checkpoint_path=None):
    """Run ``cfg.steps`` total optimisation steps (resuming from ``ckpt``).

    ``on_step(step, report)`` is called after every step. Batches depend only
    on ``(cfg.seed, step)``, so a resumed run replays the same sequence.
    """
    if not samples:
        raise ValueError("training set is empty")
    H, W = samples[0].input.shape[1:]
    if ckpt is None:
        ckpt = init_checkpoint(cfg, H, W)
    X_all, Y_all = data.stack(samples)
    while ckpt.step < cfg.steps:
        idx = batch_indices(cfg, ckpt.step, len(samples))
        report = train_step(ckpt, X_all[idx], Y_all[idx])
        total = float(np.float32(report.total))
        hist = ckpt.loss_history
        if len(hist) >= DIVERGENCE_LAG and total > DIVERGENCE_FACTOR * hist[-DIVERGENCE_LAG]:
            raise TrainingError(f"loss diverged at step {ckpt.step}: {total:.6g} > "
                                f"{DIVERGENCE_FACTOR:g} x {hist[-DIVERGENCE_LAG]:.6g} ({DIVERGENCE_LAG} steps earlier)")
        hist.append(total)
        del hist[:-DIVERGENCE_LAG - 1]
        if on_step is not None:
            on_step(ckpt.step, report)
        if cfg.eval_every and eval_samples and ckpt.step % cfg.eval_every == 0 and on_eval is not None:
            on_eval(ckpt.step, evaluate(ckpt.net, cfg, eval_samples))
        if checkpoint_path and cfg.checkpoint_every and ckpt.step % cfg.checkpoint_every == 0:
            ckpt.save(checkpoint_path)
    return ckpt


# -- evaluation ------------------------------------------------------------------------

def predict(net, X, batch=32):
    """Synthesized frames (B, D*C, H, W) and finest flows for inputs ``X`` (eval mode)."""
    preds, flows = [], []
    for i in range(0, X.shape[0], batch):
        xb = X[i:i + batch]
        fl, _ = net.forward(xb, train=False)
        preds.append(np.concatenate([sample_forward(xb, f) for f in fl], axis=1))
        flows.append([f.as_tensor() for f in fl])
    D = len(flows[0])
    flow_t = [np.concatenate([chunk[d] for chunk in flows], axis=0) for d in range(D)]
    return np.concatenate(preds, axis=0), flow_t


@dataclass
class EvalRow:
    step: int
    psnr: float
    ssim: float
    psnr_motion: float = None
    ssim_motion: float = None
    epe: float = None
    baselines: dict = field(default_factory=dict)

    def as_record(self):
        parts = [f"step={self.step}", f"psnr={self.psnr:.4f}", f"ssim={self.ssim:.5f}"]
        if self.psnr_motion is not None:
            parts += [f"psnr_motion={self.psnr_motion:.4f}", f"ssim_motion={self.ssim_motion:.5f}"]
        if self.epe is not None:
            parts.append(f"epe={self.epe:.4f}")
        parts += [f"{k}={v:.4f}" for k, v in sorted(self.baselines.items())]
        return " ".join(parts)


def sample_motion_mask(sample):
    """Union of motion masks over every pair of frames in the sample."""
    C = sample.input.shape[0] // 2
    frames = [sample.input[:C], sample.input[C:]]
    frames += [sample.target[i:i + C] for i in range(0, sample.target.shape[0], C)]
    mask = np.zeros(frames[0].shape[1:], dtype=bool)
    for i in range(len(frames)):
        for j in range(i + 1, len(frames)):
            mask |= metrics.motion_mask(frames[i], frames[j])
    return mask


def _baselines(sample, mode):
    C = sample.input.shape[0] // 2
    first, last = sample.input[:C], sample.input[C:]
    out = {"copy_last": last}
    if mode == "interp":
        out["average"] = (first + last) / 2
        out["copy_first"] = first
    return out


def score(preds, samples, mode, flows=None, predictor_name=None):
    """Per-step :class:`EvalRow` list for predictions (N, D*C, H, W) in [-1, 1]."""
    C = samples[0].input.shape[0] // 2
    D = samples[0].target.shape[0] // C
    rows = []
    for d in range(D):
        acc = {"psnr": [], "ssim": [], "psnr_motion": [], "ssim_motion": [], "epe": []}
        base = {}
        for n, s in enumerate(samples):
            tgt = data.to_unit(s.target[d * C:(d + 1) * C])
            out = data.to_unit(preds[n, d * C:(d + 1) * C])
            acc["psnr"].append(metrics.psnr(out, tgt))
            acc["ssim"].append(metrics.ssim(out, tgt))
            mask = sample_motion_mask(s)
            if mask.any():
                acc["psnr_motion"].append(metrics.psnr(out, tgt, mask))
                acc["ssim_motion"].append(metrics.ssim(out, tgt, mask))
                for name, b in _baselines(s, mode).items():
                    base.setdefault(f"{name}_psnr_motion", []).append(metrics.psnr(data.to_unit(b), tgt, mask))
            for name, b in _baselines(s, mode).items():
                base.setdefault(f"{name}_psnr", []).append(metrics.psnr(data.to_unit(b), tgt))
            if flows is not None and s.gt_flow is not None and s.gt_mask is not None and s.gt_mask.any():
                pred_disp = 2 * flows[d][n, :2]
                acc["epe"].append(metrics.endpoint_error(pred_disp, s.gt_flow, s.gt_mask))
        mean = lambda v: float(np.mean(v)) if v else None
        rows.append(EvalRow(d + 1, mean(acc["psnr"]), mean(acc["ssim"]), mean(acc["psnr_motion"]),
                            mean(acc["ssim_motion"]), mean(acc["epe"]),
                            {k: float(np.mean(v)) for k, v in base.items()}))
    return rows


def evaluate(net, cfg, samples):
    """Synthesize every sample and score it; one :class:`EvalRow` per target step."""
    X, _ = data.stack(samples)
    preds, flows = predict(net, X)
    return score(preds, samples, cfg.mode, flows)
