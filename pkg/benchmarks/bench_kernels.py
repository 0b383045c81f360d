"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the median time of each backend and the
speed-up. Also times one full training step with each backend.
"""
import argparse
import statistics
import time

import numpy as np

from voxelflow import _backend, data, nn, sampler, trainer


def median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def kernel_cases(rng):
    video = rng.uniform(-1, 1, (8, 2, 64, 64)).astype(np.float32)
    dx, dy = (rng.uniform(-3, 3, (8, 64, 64)).astype(np.float32) for _ in range(2))
    dt = rng.uniform(0, 1, (8, 64, 64)).astype(np.float32)
    up = rng.standard_normal((8, 1, 64, 64)).astype(np.float32)
    x = rng.standard_normal((8, 16, 32, 32)).astype(np.float32)
    cols_shape = x.shape
    return {
        "sample_forward": lambda k: k.sample_forward(video, dx, dy, dt),
        "sample_backward": lambda k: k.sample_backward(video, dx, dy, dt, up, True),
        "im2col_5x5": lambda k: k.im2col(x, 5),
        "col2im_5x5": lambda k, c=_backend.get("python").im2col(x, 5): k.col2im(c, cols_shape, 5),
        "maxpool2": lambda k: k.maxpool2_forward(x),
    }


def train_step_time(name, repeat):
    k = _backend.get(name)
    old = nn._k, sampler._k
    nn._k = sampler._k = k
    try:
        ds = data.synthetic_dataset(4, seed=0)
        cfg = trainer.TrainConfig(batch=8)
        ckpt = trainer.init_checkpoint(cfg, 32, 32)
        X, Y = data.stack((ds.train * 8)[:8])
        return median_time(lambda: trainer.train_step(ckpt, X, Y), repeat)
    finally:
        nn._k, sampler._k = old


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=10)
    args = p.parse_args()
    names = _backend.available()
    if "cython" not in names:
        print("compiled core not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    rows = [(label, {n: median_time(lambda: fn(_backend.get(n)), args.repeat) for n in names})
            for label, fn in kernel_cases(rng).items()]
    rows.append(("train_step", {n: train_step_time(n, max(3, args.repeat // 3)) for n in names}))
    for label, t in rows:
        line = f"{label:<18}" + "".join(f"{t[n] * 1e3:>10.2f}ms" for n in names)
        if len(names) > 1:
            line += f"{t['python'] / t['cython']:>11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
