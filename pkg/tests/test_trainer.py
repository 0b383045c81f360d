import numpy as np
import pytest

from voxelflow import data, losses, trainer
from voxelflow.trainer import Checkpoint, TrainConfig, TrainingError

SMALL = dict(widths=(4, 4, 8), bottleneck=8, batch=4)


@pytest.fixture(scope="module")
def samples():
    return data.synthetic_dataset(20, seed=1)


def _records(cfg, samples, ckpt=None):
    out = []
    trainer.train(cfg, samples, ckpt, on_step=lambda s, r: out.append(r.as_record(s)))
    return out


def test_learning_rate_defaults():
    assert TrainConfig().lr == 1e-4
    assert TrainConfig(D=3, mode="extrap").lr == 5e-5
    assert TrainConfig(D=3, lr=1e-3).lr == 1e-3


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="both")
    with pytest.raises(ValueError):
        TrainConfig(batch=1)
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)


def test_config_text_round_trip():
    from voxelflow import formats
    cfg = TrainConfig(scales=(1, 2, 4), D=2, mode="extrap", flow_range=6.0, batchnorm=False)
    back = TrainConfig.from_mapping(formats.parse_key_values(cfg.to_text()))
    assert back == cfg
    with pytest.raises(KeyError):
        TrainConfig.from_mapping({"learning_rate": "1"})


def test_zero_head_constant_video_hits_loss_floor():
    cfg = TrainConfig(init_std=0.0, batch=2)
    ckpt = trainer.init_checkpoint(cfg, 16, 16)
    X = np.full((2, 2, 16, 16), 0.3, np.float32)
    Y = np.full((2, 1, 16, 16), 0.3, np.float32)
    report = trainer.forward_backward(ckpt.net, X, Y, cfg)
    B, H, W = 2, 16, 16
    pairs = B * (H * (W - 1) + (H - 1) * W)
    floor = cfg.eps_charb + (2 * cfg.lambda1 + cfg.lambda2) * pairs * cfg.eps_charb / (B * H * W)
    assert report.total == pytest.approx(floor, rel=1e-5)


def test_same_seed_same_loss_sequence(samples):
    cfg = TrainConfig(steps=6, **SMALL)
    assert _records(cfg, samples.train) == _records(cfg, samples.train)


def test_zero_steps_returns_initialization(samples):
    cfg = TrainConfig(steps=0, **SMALL)
    ckpt = trainer.train(cfg, samples.train)
    fresh = trainer.init_checkpoint(cfg, 32, 32)
    assert ckpt.step == 0
    for k, p in ckpt.net.params().items():
        assert p.value.tobytes() == fresh.net.params()[k].value.tobytes()


def test_checkpoint_reload_replays_loss_sequence(samples, tmp_path):
    cfg = TrainConfig(steps=8, **SMALL)
    full = _records(cfg, samples.train)
    half = TrainConfig(steps=4, **SMALL)
    ckpt = trainer.train(half, samples.train)
    path = tmp_path / "mid.dvfw"
    ckpt.save(path)
    resumed = Checkpoint.load(path)
    resumed.cfg = cfg
    assert full[:4] + _records(cfg, samples.train, resumed) == full


def test_checkpoints_are_bit_identical(samples, tmp_path):
    cfg = TrainConfig(steps=3, **SMALL)
    for name in ("a", "b"):
        trainer.train(cfg, samples.train).save(tmp_path / f"{name}.dvfw")
    assert (tmp_path / "a.dvfw").read_bytes() == (tmp_path / "b.dvfw").read_bytes()
    assert (tmp_path / "a.dvfw.cfg").read_text() == (tmp_path / "b.dvfw.cfg").read_text()


def test_missing_sidecar_is_reported(samples, tmp_path):
    cfg = TrainConfig(steps=0, **SMALL)
    ckpt = trainer.train(cfg, samples.train)
    ckpt.save(tmp_path / "c.dvfw")
    (tmp_path / "c.dvfw.cfg").unlink()
    with pytest.raises(FileNotFoundError, match="sidecar"):
        Checkpoint.load(tmp_path / "c.dvfw")


def test_divergence_guard(samples, monkeypatch):
    cfg = TrainConfig(steps=200, **SMALL)
    calls = {"n": 0}

    def fake_step(ckpt, X, Y):
        calls["n"] += 1
        ckpt.step += 1
        v = 1.0 if ckpt.step <= 120 else 50.0
        return losses.LossReport(v, v, 0.0, 0.0)

    monkeypatch.setattr(trainer, "train_step", fake_step)
    with pytest.raises(TrainingError, match="diverged at step 121"):
        trainer.train(cfg, samples.train)


def test_non_finite_loss_raises(samples):
    cfg = TrainConfig(steps=1, **SMALL)
    ckpt = trainer.init_checkpoint(cfg, 32, 32)
    X, Y = data.stack(samples.train[:4])
    X[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        trainer.train_step(ckpt, X, Y)


def test_multistep_extrapolation_trains(samples):
    ds = data.synthetic_dataset(10, seed=3, mode="extrap", steps=3)
    cfg = TrainConfig(steps=2, mode="extrap", D=3, **SMALL)
    ckpt = trainer.train(cfg, ds.train)
    assert ckpt.adam.lr == 5e-5
    rows = trainer.evaluate(ckpt.net, cfg, ds.test)
    assert [r.step for r in rows] == [1, 2, 3]
    assert all(set(r.baselines) == {"copy_last_psnr", "copy_last_psnr_motion"} for r in rows)


def test_multiscale_training_reports_per_scale_losses(samples):
    cfg = TrainConfig(steps=1, scales=(1, 2), **SMALL)
    seen = []
    trainer.train(cfg, samples.train, on_step=lambda s, r: seen.append(r))
    assert len(seen[0].per_scale) == 2
    assert seen[0].recon == pytest.approx(sum(seen[0].per_scale))


def test_perfect_predictor_and_static_baseline():
    ds = data.synthetic_dataset(10, seed=5, speed=(0, 0), filter_motion=False)
    s = ds.test
    preds = np.stack([x.target for x in s])
    row = trainer.score(preds, s, "interp")[0]
    assert row.psnr == 99.0 and row.ssim == 1.0
    assert row.baselines["copy_first_psnr"] == 99.0


def test_single_sample_overfit():
    """500 steps on one triplet drive the reconstruction error below 0.01."""
    ds = data.synthetic_dataset(1, seed=0)
    cfg = TrainConfig(steps=500, batch=2)
    last = []
    trainer.train(cfg, ds.train[:1], on_step=lambda s, r: last.append(r.recon))
    assert last[-1] < 0.01


def test_scale_weights_default_and_validation():
    assert TrainConfig(scales=(1, 2, 4)).scale_weights == (1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        TrainConfig(scales=(1, 2), scale_weights=(1.0,))
    with pytest.raises(ValueError):
        TrainConfig(scales=(1, 2), scale_weights=(1.0, -1.0))


def test_scale_weights_combine_per_scale_losses(samples):
    X, Y = data.stack(samples.train[:4])
    reports = {}
    for w in ((1.0, 1.0), (1.0, 0.0), (2.0, 0.5)):
        cfg = TrainConfig(scales=(1, 2), scale_weights=w, **SMALL)
        ckpt = trainer.init_checkpoint(cfg, 32, 32)
        reports[w] = trainer.forward_backward(ckpt.net, X, Y, cfg)
    fine, coarse = reports[(1.0, 1.0)].per_scale
    assert reports[(1.0, 0.0)].recon == pytest.approx(fine)
    assert reports[(2.0, 0.5)].recon == pytest.approx(2 * fine + 0.5 * coarse)
