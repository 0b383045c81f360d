"""Voxel flow fields and differentiable trilinear volume sampling.

A voxel flow assigns every target pixel ``(x, y)`` an offset ``(dx, dy)``
and a temporal blend ``dt``. The target colour is read from ``(x - dx,
y - dy)`` in the first input frame and ``(x + dx, y + dy)`` in the second,
bilinearly in each, and the two reads are mixed with weights ``1 - dt`` and
``dt``. Together that is a trilinear read from the eight corners of a
"virtual voxel" spanning both frames.
"""
from dataclasses import dataclass
import math

import numpy as np

from ._backend import kernels as _k
from .nn import ShapeError


@dataclass
class VoxelFlowField:
    """Per-pixel ``(dx, dy, dt)``; each array has shape (batch, H, W)."""

    dx: np.ndarray
    dy: np.ndarray
    dt: np.ndarray

    @property
    def shape(self):
        return self.dx.shape

    def as_tensor(self):
        """Stack into a (batch, 3, H, W) array in channel order (dx, dy, dt)."""
        return np.stack([self.dx, self.dy, self.dt], axis=1)

    @classmethod
    def from_tensor(cls, t):
        if t.ndim != 4 or t.shape[1] != 3:
            raise ShapeError(f"flow tensor must be (batch, 3, H, W), got {t.shape}")
        return cls(np.ascontiguousarray(t[:, 0]), np.ascontiguousarray(t[:, 1]), np.ascontiguousarray(t[:, 2]))

    @classmethod
    def constant(cls, batch, height, width, dx=0.0, dy=0.0, dt=0.5, dtype=np.float32):
        full = lambda v: np.full((batch, height, width), v, dtype=dtype)
        return cls(full(dx), full(dy), full(dt))


@dataclass
class VirtualVoxel:
    """Eight clamped lattice corners ``(x, y, t)`` with trilinear weights.

    Corners and weights are keyed by the index string ``"ijk"``: ``i`` picks
    the x neighbour, ``j`` the y neighbour and ``k`` the frame.
    """

    corners: dict
    weights: dict
    source0: tuple
    source1: tuple


def build_virtual_voxel(x, y, flow, extents):
    """Corners and weights for target pixel ``(x, y)``.

    ``flow`` is ``(dx, dy, dt)`` for that pixel and ``extents`` is ``(H, W)``.
    Out-of-frame corners are clamped to the border; weights are unchanged.
    """
    dx, dy, dt = flow
    H, W = extents
    dt = min(max(dt, 0.0), 1.0)
    sources = ((x - dx, y - dy), (x + dx, y + dy))
    corners, weights = {}, {}
    for k, (lx, ly) in enumerate(sources):
        fx0, fy0 = math.floor(lx), math.floor(ly)
        fx, fy = lx - fx0, ly - fy0
        wt = dt if k else 1.0 - dt
        for j in (0, 1):
            for i in (0, 1):
                cx = min(max(fx0 + i, 0), W - 1)
                cy = min(max(fy0 + j, 0), H - 1)
                key = f"{i}{j}{k}"
                corners[key] = (cx, cy, k)
                weights[key] = (fx if i else 1 - fx) * (fy if j else 1 - fy) * wt
    return VirtualVoxel(corners, weights, sources[0], sources[1])


def _check(video, flow):
    if video.ndim != 4 or video.shape[1] % 2:
        raise ShapeError(f"video must be (batch, 2*C, H, W), got {video.shape}")
    want = (video.shape[0],) + video.shape[2:]
    for name in ("dx", "dy", "dt"):
        if getattr(flow, name).shape != want:
            raise ShapeError(f"flow.{name} has shape {getattr(flow, name).shape}, expected {want}")


def _c(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def sample_forward(video, flow):
    """Synthesize one frame (batch, C, H, W) from a 2-frame video (batch, 2C, H, W)."""
    _check(video, flow)
    dt = video.dtype
    return _k.sample_forward(_c(video, dt), _c(flow.dx, dt), _c(flow.dy, dt), _c(flow.dt, dt))


@dataclass
class SamplerGrad:
    d_dx: np.ndarray
    d_dy: np.ndarray
    d_dt: np.ndarray
    d_input: np.ndarray = None


def sample_backward(video, flow, upstream, need_input=False):
    """Gradient of the loss w.r.t. the flow (and optionally the video).

    At exact lattice coordinates the one-sided derivative toward the upper
    neighbour is returned.
    """
    _check(video, flow)
    C = video.shape[1] // 2
    if upstream.shape != (video.shape[0], C) + video.shape[2:]:
        raise ShapeError(f"upstream gradient shape {upstream.shape} does not match sampler output")
    dt = video.dtype
    gx, gy, gt, gv = _k.sample_backward(_c(video, dt), _c(flow.dx, dt), _c(flow.dy, dt), _c(flow.dt, dt),
                                        _c(upstream, dt), need_input)
    return SamplerGrad(gx, gy, gt, gv)


def project_flow(flow):
    """Split a voxel flow into its motion field and selection mask.

    Returns ``(motion, mask, displacement)`` where motion is (batch, 2, H, W),
    mask is (batch, 1, H, W) and displacement is the implied first-to-second
    frame motion ``2 * motion``.
    """
    motion = np.stack([flow.dx, flow.dy], axis=1)
    mask = flow.dt[:, None]
    return motion, mask, 2 * motion


def assemble_flow(motion, mask):
    """Inverse of :func:`project_flow`."""
    return VoxelFlowField(np.ascontiguousarray(motion[:, 0]), np.ascontiguousarray(motion[:, 1]),
                          np.ascontiguousarray(mask[:, 0]))
