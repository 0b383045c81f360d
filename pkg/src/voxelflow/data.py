"""Synthetic moving-sprite videos with exact ground-truth motion, and triplets.

Frames are float32 in [-1, 1] with layout (L, C, H, W). Sprites are
premultiplied colour/alpha patches placed at sub-pixel positions by
bilinear resampling, so a velocity ``(vx, vy)`` moves every sprite pixel by
exactly that amount per frame.
"""
from dataclasses import dataclass, field
import os
import queue
import threading

import numpy as np

from . import formats
from .nn import ShapeError

MOTION_THRESHOLD = 0.02


@dataclass
class Sprite:
    shape: str = "square"  # square | disk | textured
    size: int = 8
    x: float = 0.0  # top-left corner at frame 0, pixels
    y: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    intensity: float = 1.0  # in [0, 1]


@dataclass
class SceneSpec:
    height: int = 32
    width: int = 32
    frames: int = 3
    background: str = "flat"  # flat | gradient | checker
    background_level: float = 0.2
    sprites: list = field(default_factory=list)
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.frames < 3:
            raise ValueError(f"a scene needs at least 3 frames, got {self.frames}")
        for s in self.sprites:
            if not all(np.isfinite([s.x, s.y, s.vx, s.vy])):
                raise ValueError("sprite positions and velocities must be finite")


@dataclass
class RenderedScene:
    video: np.ndarray    # (L, C, H, W) in [-1, 1]
    flow: np.ndarray     # (L, 2, H, W) per-frame sprite velocity, 0 on background
    support: np.ndarray  # (L, H, W) bool, topmost sprite alpha >= 0.5


@dataclass
class TripletSample:
    input: np.ndarray    # (2*C, H, W)
    target: np.ndarray   # (D*C, H, W)
    mode: str
    gt_flow: np.ndarray = None  # (2, H, W) displacement first -> second input, at target pixels
    gt_mask: np.ndarray = None  # (H, W) bool, where gt_flow is defined


def _background(spec):
    H, W = spec.height, spec.width
    lvl = spec.background_level
    if spec.background == "flat":
        return np.full((H, W), lvl)
    if spec.background == "gradient":
        return lvl * (0.5 + np.add.outer(np.arange(H) / H, np.arange(W) / W) / 2)
    if spec.background == "checker":
        yy, xx = np.mgrid[0:H, 0:W]
        return np.where(((yy // 4) + (xx // 4)) % 2 == 0, lvl, lvl * 0.5)
    raise ValueError(f"unknown background {spec.background!r}")


def _patch(sprite, rng):
    """Colour and alpha patch on the integer grid, with a one-pixel empty border."""
    s = sprite.size
    alpha = np.zeros((s + 2, s + 2))
    if sprite.shape == "disk":
        sub = 4
        off = (np.arange(sub) + 0.5) / sub
        yy = (np.arange(s)[:, None, None, None] + off[None, None, :, None])
        xx = (np.arange(s)[None, :, None, None] + off[None, None, None, :])
        r = s / 2
        inside = ((xx - r) ** 2 + (yy - r) ** 2) <= r * r
        alpha[1:-1, 1:-1] = inside.mean(axis=(2, 3))
    elif sprite.shape in ("square", "textured"):
        alpha[1:-1, 1:-1] = 1.0
    else:
        raise ValueError(f"unknown sprite shape {sprite.shape!r}")
    color = np.full_like(alpha, sprite.intensity)
    if sprite.shape == "textured":
        tex = rng.uniform(-0.25, 0.25, (s + 2, s + 2))
        color = np.clip(color + tex, 0, 1)
    return color * alpha, alpha


def _place(patch, x, y, H, W):
    """Shift ``patch`` bilinearly so its interior's top-left corner lands at (x, y)."""
    ph, pw = patch.shape
    # patch cell (i, j) lands at canvas (y - 1 + i, x - 1 + j)
    iy, ix = int(np.floor(y - 1)), int(np.floor(x - 1))
    fy, fx = (y - 1) - iy, (x - 1) - ix
    shifted = np.zeros((ph + 1, pw + 1))
    shifted[:ph, :pw] += (1 - fy) * (1 - fx) * patch
    shifted[1:, :pw] += fy * (1 - fx) * patch
    shifted[:ph, 1:] += (1 - fy) * fx * patch
    shifted[1:, 1:] += fy * fx * patch
    pad = ph + pw + 2
    canvas = np.zeros((H + 2 * pad, W + 2 * pad))
    r0, c0 = iy + pad, ix + pad
    if r0 < 0 or c0 < 0 or r0 + ph + 1 > canvas.shape[0] or c0 + pw + 1 > canvas.shape[1]:
        return np.zeros((H, W))
    canvas[r0:r0 + ph + 1, c0:c0 + pw + 1] = shifted
    return canvas[pad:pad + H, pad:pad + W]


def render_scene(spec):
    """Render every frame of ``spec`` with per-pixel ground-truth motion."""
    H, W, L = spec.height, spec.width, spec.frames
    rng = np.random.default_rng(spec.seed)
    bg = _background(spec)
    patches = [_patch(s, rng) for s in spec.sprites]
    video = np.empty((L, spec.channels, H, W), dtype=np.float32)
    flow = np.zeros((L, 2, H, W), dtype=np.float32)
    support = np.zeros((L, H, W), dtype=bool)
    for t in range(L):
        img = bg.copy()
        for s, (pm, pa) in zip(spec.sprites, patches):
            x, y = s.x + s.vx * t, s.y + s.vy * t
            c = _place(pm, x, y, H, W)
            a = _place(pa, x, y, H, W)
            img = img * (1 - a) + c
            top = a >= 0.5
            support[t] |= top
            flow[t, 0][top] = s.vx
            flow[t, 1][top] = s.vy
        video[t] = (2 * np.clip(img, 0, 1) - 1)[None]
    return RenderedScene(video, flow, support)


def random_scene(rng, height=32, width=32, frames=3, speed=(1.0, 3.0), n_sprites=1,
                 shapes=("square",), backgrounds=("flat", "gradient", "checker"),
                 size=(6, 10), seed=None):
    """Draw a scene whose sprites stay inside the canvas for all frames."""
    sprites = []
    for _ in range(n_sprites):
        s = int(rng.integers(size[0], size[1] + 1))
        mag = rng.uniform(*speed)
        ang = rng.uniform(0, 2 * np.pi)
        vx, vy = mag * np.cos(ang), mag * np.sin(ang)
        span_x = abs(vx) * (frames - 1)
        span_y = abs(vy) * (frames - 1)
        lo_x = 1 + (span_x if vx < 0 else 0)
        hi_x = width - 1 - s - (span_x if vx > 0 else 0)
        lo_y = 1 + (span_y if vy < 0 else 0)
        hi_y = height - 1 - s - (span_y if vy > 0 else 0)
        x = rng.uniform(lo_x, max(lo_x, hi_x))
        y = rng.uniform(lo_y, max(lo_y, hi_y))
        sprites.append(Sprite(str(rng.choice(shapes)), s, x, y, vx, vy, float(rng.uniform(0.6, 1.0))))
    return SceneSpec(height, width, frames, str(rng.choice(backgrounds)), float(rng.uniform(0.05, 0.35)),
                     sprites, 1, int(rng.integers(2**31)) if seed is None else seed)


def make_triplet(video, index, mode="interp", steps=1, flow=None, support=None):
    """Cut a training sample out of a (L, C, H, W) video.

    Interpolation uses frames ``index`` and ``index + steps + 1`` as inputs and
    the frames between them as targets. Extrapolation uses ``index`` and
    ``index + 1`` and targets the next ``steps`` frames. When per-frame
    ``flow``/``support`` are given and ``mode`` is single-step interpolation,
    the sample carries the input-to-input displacement at target pixels.
    """
    L = video.shape[0]
    if mode == "interp":
        inputs, targets = (index, index + steps + 1), list(range(index + 1, index + steps + 1))
    elif mode == "extrap":
        inputs, targets = (index, index + 1), list(range(index + 2, index + 2 + steps))
    else:
        raise ValueError(f"mode must be 'interp' or 'extrap', got {mode!r}")
    last = max(inputs + tuple(targets))
    if index < 0 or last >= L:
        raise IndexError(f"triplet at index {index} ({mode}, steps={steps}) needs frame {last}, video has {L}")
    C, H, W = video.shape[1:]
    x = video[list(inputs)].reshape(2 * C, H, W)
    y = video[targets].reshape(steps * C, H, W)
    gt, mask = None, None
    if flow is not None and mode == "interp" and steps == 1:
        t = targets[0]
        gt = (2 * flow[t]).astype(np.float32)
        mask = support[t].copy()
    return TripletSample(np.ascontiguousarray(x), np.ascontiguousarray(y), mode, gt, mask)


def has_motion(sample, threshold=MOTION_THRESHOLD):
    """Mean absolute difference between the two inputs exceeds ``threshold``."""
    C = sample.input.shape[0] // 2
    return float(np.abs(sample.input[C:] - sample.input[:C]).mean()) >= threshold


def triplets_from_scene(scene, mode="interp", steps=1, filter_motion=True):
    L = scene.video.shape[0]
    span = steps + 2
    out = []
    for i in range(L - span + 1):
        s = make_triplet(scene.video, i, mode, steps, scene.flow, scene.support)
        if not filter_motion or has_motion(s):
            out.append(s)
    return out


@dataclass
class Dataset:
    train: list
    test: list


def synthetic_dataset(n_scenes, seed=0, mode="interp", steps=1, frames=None, holdout_every=10,
                      filter_motion=True, **scene_kw):
    """Render ``n_scenes`` random scenes and split them 90/10 by scene index.

    Scene ``i`` uses seed ``[seed, i]``; scenes with ``i % holdout_every ==
    holdout_every - 1`` go to the test split.
    """
    frames = frames or steps + 2
    train, test = [], []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        scene = render_scene(random_scene(rng, frames=frames, **scene_kw))
        samples = triplets_from_scene(scene, mode, steps, filter_motion)
        (test if i % holdout_every == holdout_every - 1 else train).extend(samples)
    return Dataset(train, test)


def stack(samples):
    """Batch arrays ``(X, Y)`` of shape (B, 2C, H, W) and (B, D*C, H, W)."""
    if not samples:
        raise ShapeError("cannot stack an empty sample list")
    return (np.stack([s.input for s in samples]).astype(np.float32),
            np.stack([s.target for s in samples]).astype(np.float32))


def prefetch(iterable, size=1):
    """Produce items of ``iterable`` on a worker thread through a bounded queue.

    Order is preserved, so a seeded producer yields the same sequence as
    consuming it directly.
    """
    q = queue.Queue(maxsize=max(1, size))
    done = object()

    def work():
        try:
            for item in iterable:
                q.put(item)
        finally:
            q.put(done)

    threading.Thread(target=work, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        yield item


# -- value conversion ---------------------------------------------------------

def normalize(frames):
    """uint8 values -> float32 in [-1, 1]."""
    return (np.asarray(frames, dtype=np.float32) / np.float32(127.5) - 1).astype(np.float32)


def denormalize(values):
    """[-1, 1] floats -> uint8, clamped, rounding half up."""
    v = (np.asarray(values, dtype=np.float64) + 1) * 127.5
    return np.floor(np.clip(v, 0, 255) + 0.5).astype(np.uint8)


def to_unit(values):
    """[-1, 1] -> [0, 1] floats for metrics."""
    return (np.asarray(values, dtype=np.float64) + 1) / 2


# -- on-disk datasets ----------------------------------------------------------

MANIFESTS = {"train": "train.txt", "test": "test.txt"}
DATASET_CFG = "dataset.cfg"


def _side_files(video):
    stem = video[:-len(".dvfv")] if video.endswith(".dvfv") else video
    return f"{stem}_flow.dvft", f"{stem}_support.dvft"


def write_dataset(path, n_scenes, seed=0, frames=5, holdout_every=10, **scene_kw):
    """Render scenes into directory ``path`` as DVFV videos plus DVFT flow/support.

    ``train.txt`` and ``test.txt`` list video paths relative to ``path``, one
    per line. Ground truth for ``x.dvfv`` lives in ``x_flow.dvft`` and
    ``x_support.dvft``. Output bytes depend only on the arguments.
    """
    os.makedirs(path, exist_ok=True)
    meta = {"scenes": n_scenes, "seed": seed, "frames": frames, "holdout_every": holdout_every}
    for k, v in sorted(scene_kw.items()):
        meta[k] = ",".join(str(x) for x in v) if isinstance(v, (tuple, list)) else v
    lists = {"train": [], "test": []}
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        scene = render_scene(random_scene(rng, frames=frames, **scene_kw))
        video = f"scene_{i:05d}.dvfv"
        flow, support = _side_files(video)
        formats.write_video(os.path.join(path, video), scene.video)
        formats.write_tensor(os.path.join(path, flow), scene.flow)
        formats.write_tensor(os.path.join(path, support), scene.support.astype(np.float32))
        lists["test" if i % holdout_every == holdout_every - 1 else "train"].append(video)
    with open(os.path.join(path, DATASET_CFG), "w") as f:
        f.write(formats.format_key_values(meta))
    for split, names in lists.items():
        with open(os.path.join(path, MANIFESTS[split]), "w") as f:
            f.write("".join(n + "\n" for n in names))
    return lists


def read_dataset(path):
    """Scenes of a dataset directory as ``[(split, RenderedScene), ...]``.

    Flow and support files are optional; without them a scene carries zero
    flow and empty support, so EPE is skipped for it.
    """
    present = [s for s, m in MANIFESTS.items() if os.path.isfile(os.path.join(path, m))]
    if not present:
        raise FileNotFoundError(f"no dataset manifest ({' or '.join(MANIFESTS.values())}) in {path}")
    out = []
    for split in present:
        with open(os.path.join(path, MANIFESTS[split])) as f:
            names = [line.strip() for line in f if line.strip()]
        for video in names:
            v = formats.read_video(os.path.join(path, video))
            L, _, H, W = v.shape
            flow, support = (os.path.join(path, n) for n in _side_files(video))
            if os.path.isfile(flow) and os.path.isfile(support):
                fl = formats.read_tensor(flow)
                sp = formats.read_tensor(support) >= 0.5
                if fl.shape != (L, 2, H, W) or sp.shape != (L, H, W):
                    raise ShapeError(f"{video}: flow/support shapes do not match video {v.shape}")
            else:
                fl, sp = np.zeros((L, 2, H, W), np.float32), np.zeros((L, H, W), bool)
            out.append((split, RenderedScene(v, fl, sp)))
    return out


def dataset_samples(path, mode="interp", steps=1, filter_motion=True):
    """Triplets from a dataset directory, split as recorded in its manifest."""
    train, test = [], []
    for split, scene in read_dataset(path):
        (test if split == "test" else train).extend(triplets_from_scene(scene, mode, steps, filter_motion))
    return Dataset(train, test)
