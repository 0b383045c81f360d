"""``voxelflow`` command: datagen, train, synth, eval, gradcheck.

Exit status is 0 on success, 1 for invalid input (bad flags, malformed
files, missing paths) and 2 for numeric or runtime failures.
"""
import argparse
from dataclasses import fields
import logging
import os
import sys

import numpy as np

from . import _backend, data, formats, gradcheck, metrics, trainer
from .model import check_extents
from .nn import ShapeError

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt_value(v):
    if isinstance(v, float):
        return np.format_float_positional(v, trim="-")
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


# -- datagen -------------------------------------------------------------------

def cmd_datagen(args):
    if args.frames < 3:
        raise ValueError(f"--frames must be >= 3 (a triplet needs three frames), got {args.frames}")
    if args.scenes < 1:
        raise ValueError("--scenes must be >= 1")
    if args.speed_min > args.speed_max:
        raise ValueError("--speed-min exceeds --speed-max")
    try:
        data.write_dataset(args.out, args.scenes, seed=args.seed, frames=args.frames,
                           holdout_every=args.holdout_every, height=args.height, width=args.width,
                           speed=(args.speed_min, args.speed_max), n_sprites=args.sprites,
                           shapes=tuple(args.shapes.split(",")),
                           backgrounds=tuple(args.backgrounds.split(",")))
    except OSError as e:
        raise ValueError(f"cannot write dataset to {args.out}: {e.strerror or e}") from None
    print(f"wrote {args.scenes} scenes to {args.out}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def _train_config(args):
    mapping = {}
    if args.config:
        if not os.path.isfile(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        with open(args.config) as f:
            mapping = formats.parse_key_values(f.read())
    for f in fields(trainer.TrainConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            mapping[f.name] = v
    try:
        return trainer.TrainConfig.from_mapping(mapping)
    except KeyError as e:
        raise ValueError(f"unknown config key {e.args[0]!r}") from None


def cmd_train(args):
    cfg = _train_config(args)
    if not os.path.isdir(args.dataset):
        raise FileNotFoundError(f"dataset directory not found: {args.dataset}")
    ds = data.dataset_samples(args.dataset, cfg.mode, cfg.D)
    if not ds.train:
        raise ValueError(f"dataset {args.dataset} has no training samples for mode={cfg.mode} D={cfg.D}")
    H, W = ds.train[0].input.shape[1:]
    check_extents(H, W)
    if args.resume:
        ckpt = trainer.Checkpoint.load(args.resume)
        ckpt.cfg = cfg
    else:
        ckpt = trainer.init_checkpoint(cfg, H, W)
    header = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    header["flow_range"] = ckpt.net.cfg.flow_range
    print("# " + " ".join(f"{k}={_fmt_value(v)}" for k, v in header.items()) + f" backend={_backend.NAME}")
    print(f"# train_samples={len(ds.train)} test_samples={len(ds.test)} extents={H}x{W}", flush=True)

    def on_step(step, report):
        if step % args.log_every == 0 or step == cfg.steps:
            print(report.as_record(step), flush=True)

    def on_eval(step, rows):
        for r in rows:
            print(f"eval at={step} {r.as_record()}", flush=True)

    trainer.train(cfg, ds.train, ckpt, on_step=on_step, on_eval=on_eval, eval_samples=ds.test,
                  checkpoint_path=args.out)
    try:
        ckpt.save(args.out)
    except OSError as e:
        raise ValueError(f"cannot write checkpoint {args.out}: {e.strerror or e}") from None
    print(f"saved checkpoint {args.out} at step {ckpt.step}")
    return EXIT_OK


# -- synth ---------------------------------------------------------------------

def _load_frames(paths):
    """Frames (L, C, H, W) in [-1, 1] from one DVFV file or several PGM/PPM files."""
    for p in paths:
        if not os.path.isfile(p):
            raise FileNotFoundError(f"input not found: {p}")
    if len(paths) == 1 and paths[0].endswith(".dvfv"):
        return formats.read_video(paths[0])
    imgs = [formats.read_pnm(p) for p in paths]
    if len({im.shape for im in imgs}) != 1:
        raise ShapeError(f"input frames differ in shape: {[im.shape for im in imgs]}")
    arr = np.stack([im[None] if im.ndim == 2 else im.transpose(2, 0, 1) for im in imgs])
    return data.normalize(arr)


def _image(chw):
    """(C, H, W) in [-1, 1] -> uint8 array for a PGM (C=1) or PPM (C=3)."""
    u8 = data.denormalize(chw)
    if u8.shape[0] == 1:
        return u8[0]
    if u8.shape[0] == 3:
        return u8.transpose(1, 2, 0)
    raise ShapeError(f"cannot write {u8.shape[0]}-channel image")


def flow_to_rgb(dx, dy, scale=None):
    """Colour-wheel rendering: hue is direction, saturation is magnitude."""
    mag = np.hypot(dx, dy)
    scale = scale or max(float(mag.max()), 1e-6)
    hue = (np.arctan2(dy, dx) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / scale, 0, 1)
    h6 = hue * 6
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p, q, t = 1 - sat, 1 - sat * f, 1 - sat * (1 - f)
    v = np.ones_like(sat)
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros(dx.shape + (3,))
    for k, chans in enumerate(table):
        sel = i == k
        for c in range(3):
            rgb[..., c][sel] = chans[c][sel]
    return np.floor(rgb * 255 + 0.5).astype(np.uint8)


def cmd_synth(args):
    if not os.path.isfile(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    ckpt = trainer.Checkpoint.load(args.checkpoint)
    cfg = ckpt.cfg
    mode = args.mode or cfg.mode
    D = args.D or cfg.D
    if D != cfg.D:
        raise ValueError(f"checkpoint predicts D={cfg.D} steps, --D {D} requested")
    video = _load_frames(args.inputs)
    L, C, H, W = video.shape
    if C != cfg.channels:
        raise ShapeError(f"checkpoint expects {cfg.channels} channel(s), input has {C}")
    check_extents(H, W)
    i = args.index
    second = i + D + 1 if mode == "interp" and L > 2 else i + 1
    if not 0 <= i < second < L:
        raise ValueError(f"input has {L} frame(s); frames {i} and {second} are needed")
    X = np.concatenate([video[i], video[second]])[None]
    preds, flows = trainer.predict(ckpt.net, X)
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as e:
        raise ValueError(f"cannot create output directory {args.out}: {e.strerror or e}") from None
    if mode == "interp":
        targets = list(range(i + 1, second)) if L > 2 else []
    else:
        targets = list(range(i + 2, i + 2 + D))
    for d in range(D):
        frame = preds[0, d * C:(d + 1) * C]
        ext = "pgm" if C == 1 else "ppm"
        formats.write_pnm(os.path.join(args.out, f"frame_{d + 1}.{ext}"), _image(frame))
        flow = flows[d][0]
        formats.write_tensor(os.path.join(args.out, f"flow_{d + 1}.dvft"), flow)
        formats.write_pnm(os.path.join(args.out, f"motion_{d + 1}.ppm"), flow_to_rgb(flow[0], flow[1]))
        formats.write_pnm(os.path.join(args.out, f"mask_{d + 1}.pgm"),
                          np.floor(np.clip(flow[2], 0, 1) * 255 + 0.5).astype(np.uint8))
        line = f"step={d + 1} frame=frame_{d + 1}.{ext}"
        if d < len(targets) and targets[d] < L:
            truth = data.to_unit(video[targets[d]])
            base = video[second] if mode == "extrap" else (video[i] + video[second]) / 2
            line += (f" psnr={metrics.psnr(data.to_unit(frame), truth):.4f}"
                     f" baseline_psnr={metrics.psnr(data.to_unit(base), truth):.4f}")
        print(line)
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

def cmd_eval(args):
    if not os.path.isfile(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    if not os.path.isdir(args.dataset):
        raise FileNotFoundError(f"dataset directory not found: {args.dataset}")
    ckpt = trainer.Checkpoint.load(args.checkpoint)
    cfg = ckpt.cfg
    ds = data.dataset_samples(args.dataset, cfg.mode, cfg.D)
    samples = ds.test if args.split == "test" else ds.train
    if not samples:
        raise ValueError(f"split {args.split!r} of {args.dataset} is empty")
    rows = trainer.evaluate(ckpt.net, cfg, samples)
    table = []
    for r in rows:
        table.append({"step": r.step, "predictor": "model", "psnr": r.psnr, "ssim": r.ssim,
                      "psnr_motion": r.psnr_motion, "ssim_motion": r.ssim_motion, "epe": r.epe})
        for key, v in sorted(r.baselines.items()):
            if key.endswith("_psnr"):
                name = key[:-len("_psnr")]
                table.append({"step": r.step, "predictor": name, "psnr": v,
                              "psnr_motion": r.baselines.get(f"{name}_psnr_motion")})
    print(f"# samples={len(samples)} split={args.split} mode={cfg.mode} D={cfg.D}")
    print(metrics.format_table(table, ["step", "predictor", "psnr", "ssim", "psnr_motion", "ssim_motion", "epe"]))
    return EXIT_OK


# -- gradcheck -----------------------------------------------------------------

def cmd_gradcheck(args):
    results = gradcheck.run(args.scope, seed=args.seed)
    for r in results:
        print(r.as_record())
    failed = [r.component for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="voxelflow", description=__doc__.splitlines()[0], allow_abbrev=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("datagen", help="render a synthetic sprite dataset", allow_abbrev=False)
    g.add_argument("out")
    g.add_argument("--scenes", type=int, default=100)
    g.add_argument("--frames", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--speed-min", type=float, default=1.0)
    g.add_argument("--speed-max", type=float, default=3.0)
    g.add_argument("--sprites", type=int, default=1)
    g.add_argument("--shapes", default="square")
    g.add_argument("--backgrounds", default="flat,gradient,checker")
    g.add_argument("--holdout-every", type=int, default=10)
    g.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", help="train a network on a dataset directory", allow_abbrev=False)
    t.add_argument("dataset")
    t.add_argument("out", help="checkpoint path to write")
    t.add_argument("--config", help="key=value config file; flags override it")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log-every", type=int, default=50)
    for f in fields(trainer.TrainConfig):
        t.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="VALUE")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="synthesize frames from a checkpoint", allow_abbrev=False)
    s.add_argument("checkpoint")
    s.add_argument("inputs", nargs="+", help="one .dvfv video or two or more PGM/PPM frames")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("interp", "extrap"))
    s.add_argument("--D", type=int)
    s.add_argument("--index", type=int, default=0, help="first input frame")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="score a checkpoint against baselines", allow_abbrev=False)
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification", allow_abbrev=False)
    c.add_argument("--scope", choices=tuple(gradcheck.SCOPES) + ("all",), default="all")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


INVALID = (UsageError, ValueError, FileNotFoundError, NotADirectoryError, IsADirectoryError,
           PermissionError, KeyError)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except trainer.TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED
    except INVALID as e:
        msg = e.args[0] if isinstance(e, KeyError) else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except (FloatingPointError, ArithmeticError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
