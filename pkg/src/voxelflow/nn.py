"""Layer kernels with hand-written backward passes, plus Adam.

Arrays are numpy ``(batch, channels, height, width)`` in row-major order.
Each ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache. Kernels keep the input dtype,
so the same code runs in float32 for training and float64 for gradient
checks.
"""
from dataclasses import dataclass

import numpy as np

from ._backend import kernels as _k


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent with an operation."""


@dataclass
class Param:
    """A learnable tensor with its gradient and Adam moment buffers."""

    value: np.ndarray
    grad: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        return Param(self.value.astype(dtype), self.grad.astype(dtype), self.m.astype(dtype), self.v.astype(dtype))


# -- convolution --------------------------------------------------------------

def _check_conv(x, w):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input, got shape {x.shape}")
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd side, got {k}x{k2}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels but weights expect {cin} (weights {w.shape})")


def conv2d_forward(x, w, b, workspace=None):
    """Stride-1 convolution with zero "same" padding; ``w`` is (Cout, Cin, k, k).

    ``workspace`` optionally supplies the (Cin*k*k, B*H*W) patch buffer, which
    is then owned by the returned cache until the backward pass.
    """
    _check_conv(x, w)
    cout, cin, k, _ = w.shape
    B, _, H, W = x.shape
    x = np.ascontiguousarray(x)
    if k == 1:
        cols = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(cin, B * H * W)
    else:
        cols = _k.im2col(x, k, workspace)
    y = cols.T @ w.reshape(cout, -1).T
    y += b
    y = np.ascontiguousarray(y.reshape(B, H, W, cout).transpose(0, 3, 1, 2))
    return y, (cols, x.shape, w)


def conv2d_backward(dy, cache, workspace=None):
    """Returns ``(dx, dw, db)``."""
    cols, shape, w = cache
    cout, cin, k, _ = w.shape
    B, _, H, W = shape
    dmat = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(cout, B * H * W)
    dw = (dmat @ cols.T).reshape(w.shape)
    db = dmat.sum(axis=1)
    dcols = np.matmul(w.reshape(cout, -1).T, dmat, out=workspace)
    if k == 1:
        dx = np.ascontiguousarray(dcols.reshape(cin, B, H, W).transpose(1, 0, 2, 3))
    else:
        dx = _k.col2im(dcols, shape, k)
    return dx, dw, db


# -- pooling / resampling -----------------------------------------------------

def maxpool2_forward(x):
    """2x2 max pooling, stride 2. Ties go to the first cell in scan order."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {x.shape[2]}x{x.shape[3]}")
    out, arg = _k.maxpool2_forward(np.ascontiguousarray(x))
    return out, arg


def maxpool2_backward(dy, cache):
    return _k.maxpool2_backward(np.ascontiguousarray(dy), cache)


def _interp_matrix(n_in, dtype):
    """Align-corners linear interpolation matrix of shape (2*n_in, n_in)."""
    n_out = 2 * n_in
    A = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        A[:, 0] = 1.0
        return A.astype(dtype)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    A[np.arange(n_out), lo] = 1 - frac
    A[np.arange(n_out), lo + 1] = frac
    return A.astype(dtype)


def upsample_bilinear2x_forward(x):
    """Doubles both spatial extents with align-corners bilinear interpolation."""
    Ah = _interp_matrix(x.shape[2], x.dtype)
    Aw = _interp_matrix(x.shape[3], x.dtype)
    y = np.matmul(np.matmul(Ah, x), Aw.T)
    return np.ascontiguousarray(y), (Ah, Aw)


def upsample_bilinear2x_backward(dy, cache):
    Ah, Aw = cache
    return np.ascontiguousarray(np.matmul(np.matmul(Ah.T, dy), Aw))


def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1), a.shape[1]


def split_channels(dy, n_first):
    """Backward of :func:`concat_channels`."""
    return dy[:, :n_first], dy[:, n_first:]


def avgpool2(x):
    """2x2 mean pooling; used to build image pyramids."""
    B, C, H, W = x.shape
    return x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


# -- activations --------------------------------------------------------------

def relu_forward(x):
    y = np.maximum(x, 0)
    return y, y > 0


def relu_backward(dy, cache):
    return dy * cache


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dy, cache):
    return dy * (1 - cache * cache)


ACTIVATIONS = {
    "relu": (relu_forward, relu_backward),
    "tanh": (tanh_forward, tanh_backward),
}


def activation_forward(x, kind):
    return ACTIVATIONS[kind][0](x)


def activation_backward(dy, cache, kind):
    return ACTIVATIONS[kind][1](dy, cache)


# -- batch normalization ------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train=True,
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization over (batch, height, width).

    In train mode the running statistics are updated in place.
    """
    if train:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1 / np.sqrt(var + eps)
        xhat = xc * inv[None, :, None, None]
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var * (n / max(n - 1, 1))
    else:
        inv = 1 / np.sqrt(running_var + eps)
        xhat = (x - running_mean[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y.astype(x.dtype, copy=False), (xhat, inv, gamma, train)


def batchnorm_backward(dy, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv, gamma, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if not train:
        return dxhat * inv[None, :, None, None], dgamma, dbeta
    m1 = dxhat.mean(axis=(0, 2, 3))[None, :, None, None]
    m2 = (dxhat * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
    dx = (dxhat - m1 - xhat * m2) * inv[None, :, None, None]
    return dx, dgamma, dbeta


# -- layers -------------------------------------------------------------------

def gaussian_init(shape, std, rng, dtype=np.float32):
    """Draw weights from N(0, std^2) using ``rng`` (a numpy Generator)."""
    if std == 0:
        return np.zeros(shape, dtype=dtype)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d:
    def __init__(self, cin, cout, k, rng, std=0.01, dtype=np.float32):
        self.weight = Param(gaussian_init((cout, cin, k, k), std, rng, dtype))
        self.bias = Param(np.zeros(cout, dtype=dtype))
        self._cache = None
        self._ws = {}  # reused patch buffers; large fresh allocations dominate otherwise

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def _buffer(self, slot, shape, dtype):
        buf = self._ws.get(slot)
        if buf is None or buf.shape != shape or buf.dtype != dtype:
            buf = self._ws[slot] = np.empty(shape, dtype=dtype)
        return buf

    def forward(self, x):
        cout, cin, k, _ = self.weight.value.shape
        B, _, H, W = x.shape
        ws = self._buffer("cols", (cin * k * k, B * H * W), x.dtype) if k > 1 else None
        y, self._cache = conv2d_forward(x, self.weight.value, self.bias.value, ws)
        return y

    def backward(self, dy):
        cols = self._cache[0]
        ws = self._buffer("dcols", cols.shape, cols.dtype)
        dx, dw, db = conv2d_backward(dy, self._cache, ws)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class BatchNorm2d:
    def __init__(self, channels, dtype=np.float32):
        self.gamma = Param(np.ones(channels, dtype=dtype))
        self.beta = Param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=True):
        y, self._cache = batchnorm_forward(x, self.gamma.value, self.beta.value,
                                           self.running_mean, self.running_var, train)
        return y

    def backward(self, dy):
        dx, dg, db = batchnorm_backward(dy, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("Adam lr and eps must be positive")


def adam_step(params, state):
    """Bias-corrected Adam update over an iterable of :class:`Param`.

    Increments ``state.step_count`` and zeroes every gradient.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p in params:
        g = p.grad
        p.m *= b1
        p.m += (1 - b1) * g
        p.v *= b2
        p.v += (1 - b2) * (g * g)
        mhat = p.m / c1
        vhat = p.v / c2
        p.value -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.value.dtype)
        g[...] = 0
    return state
