import numpy as np
import pytest

from voxelflow import gradcheck, model
from voxelflow.model import NetworkConfig
from voxelflow.nn import ShapeError
from voxelflow.trainer import TrainConfig, forward_backward

SMALL = dict(widths=(4, 4, 8), bottleneck=8)


def _zero_head(net):
    head = net.fuse[-1] if net.fuse else net.nets[0].head
    head.weight.value[...] = 0
    head.bias.value[...] = 0


def test_channel_counts_follow_inputs_and_steps():
    net = model.build_network(NetworkConfig(channels=3, **SMALL), 0)
    assert net.nets[0].enc[0].conv.weight.value.shape[1] == 6
    assert net.nets[0].head.weight.value.shape[0] == 3
    net = model.build_network(NetworkConfig(steps=3, **SMALL), 0)
    assert net.nets[0].head.weight.value.shape[0] == 9


def test_same_seed_same_parameters():
    a = model.build_network(NetworkConfig(**SMALL), 5).params()
    b = model.build_network(NetworkConfig(**SMALL), 5).params()
    assert all(a[k].value.tobytes() == b[k].value.tobytes() for k in a)


def test_default_initialization_std():
    net = model.build_network(NetworkConfig(), 0)
    w = np.concatenate([p.value.ravel() for k, p in net.params().items() if k.endswith("conv.weight")])
    assert abs(w.std() - 0.01) < 0.0005


def test_zero_head_gives_identity_blend(rng):
    net = model.build_network(NetworkConfig(**SMALL), 0)
    _zero_head(net)
    f = model.forward_flow(net, rng.standard_normal((2, 2, 16, 16)).astype(np.float32))
    assert not f.dx.any() and not f.dy.any()
    np.testing.assert_array_equal(f.dt, 0.5)


def test_flow_ranges_hold_for_any_input(rng):
    cfg = NetworkConfig(flow_range=2.5, init_std=2.0, **SMALL)
    net = model.build_network(cfg, 1)
    f = model.forward_flow(net, (rng.standard_normal((2, 2, 32, 32)) * 50).astype(np.float32))
    assert f.dx.shape == (2, 32, 32)
    assert np.abs(f.dx).max() <= 2.5 and np.abs(f.dy).max() <= 2.5
    assert f.dt.min() >= 0 and f.dt.max() <= 1


def test_extents_must_divide_by_eight(rng):
    net = model.build_network(NetworkConfig(**SMALL), 0)
    with pytest.raises(ShapeError, match="divisible by 8"):
        net.forward(np.zeros((1, 2, 12, 16), dtype=np.float32), train=False)
    f = model.forward_flow(net, rng.standard_normal((1, 2, 40, 40)).astype(np.float32))
    assert f.dx.shape == (1, 40, 40)


def test_fused_channels_for_three_scales():
    net = model.build_network(NetworkConfig(scales=(1, 2, 4)), 0)
    assert net.fused_channels == 96
    assert net.fuse[0].weight.value.shape[1] == 96


def test_single_scale_pyramid_is_plain_network(rng):
    cfg = NetworkConfig(**SMALL)
    a = model.build_single_scale(NetworkConfig(scales=(1, 2), **SMALL), 3)
    b = model.build_network(cfg, 3)
    x = rng.standard_normal((2, 2, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(model.forward_flow(a, x).dx, model.forward_flow(b, x).dx)


def test_zero_pyramid_and_extents(rng):
    net = model.build_multiscale(NetworkConfig(**SMALL), (64, 128, 256), 0)
    assert net.cfg.scales == (1, 2, 4)
    _zero_head(net)
    x = rng.standard_normal((1, 2, 256, 256)).astype(np.float32)
    flows, coarse = model.forward_multiscale(net, x)
    assert [c[0].dx.shape[1:] for c in coarse] == [(128, 128), (64, 64)]
    assert flows[0].dx.shape[1:] == (256, 256)
    assert not flows[0].dx.any()
    np.testing.assert_array_equal(flows[0].dt, 0.5)


def test_coarse_flow_is_scaled_to_finest_pixels(rng):
    """A uniform shift of k pixels at half resolution must reach the fusion layer as 2k."""
    cfg = NetworkConfig(scales=(1, 2), fusion_width=2, **SMALL)
    net = model.build_network(cfg, 0)
    coarse_head = net.nets[1].head
    coarse_head.weight.value[...] = 0
    k = 0.75
    coarse_head.bias.value[...] = [np.arctanh(k / net.range_at(1)), 0, 0]
    seen = {}
    orig = net.fuse_in[0].forward
    net.fuse_in[0].forward = lambda s: seen.setdefault("s", s.copy()) is not None and orig(s)
    net.forward(rng.standard_normal((2, 2, 16, 16)).astype(np.float32), train=False)
    np.testing.assert_allclose(seen["s"][:, 0], 2 * k, rtol=1e-5)
    np.testing.assert_allclose(seen["s"][:, 1], 0, atol=1e-6)


def test_multistep_fields(rng):
    net = model.build_network(NetworkConfig(steps=3, **SMALL), 0)
    fields = model.forward_multistep(net, rng.standard_normal((1, 2, 16, 16)).astype(np.float32))
    assert len(fields) == 3
    R = net.cfg.flow_range
    for f in fields:
        assert np.abs(f.dx).max() <= R and 0 <= f.dt.min() and f.dt.max() <= 1
    _zero_head(net)
    for f in model.forward_multistep(net, rng.standard_normal((1, 2, 16, 16)).astype(np.float32))[:2]:
        assert not f.dx.any() and np.all(f.dt == 0.5)


def test_single_step_multistep_equals_forward_flow(rng):
    net = model.build_network(NetworkConfig(**SMALL), 0)
    x = rng.standard_normal((1, 2, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(model.forward_multistep(net, x)[0].dx, model.forward_flow(net, x).dx)


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(scales=(1, 3))
    with pytest.raises(ValueError):
        NetworkConfig(enc_kernels=(4, 5, 3))
    with pytest.raises(ValueError):
        NetworkConfig(steps=0)
    with pytest.raises(ValueError):
        model.build_multiscale(NetworkConfig(), (16, 64), 0)


def test_config_round_trip():
    cfg = NetworkConfig(channels=3, scales=(1, 2), steps=2)
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def _check_entries(net, f, analytic, h, per_tensor, rng):
    scale = max(np.abs(g).max() for g in analytic.values())
    worst = 0.0
    for name, p in net.params().items():
        flat = p.value.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            worst = max(worst, abs((fp - fm) / (2 * h) - analytic[name].reshape(-1)[i]) / scale)
    return worst


@pytest.mark.parametrize("scales, D, weights", [((1,), 2, None), ((1, 2, 4), 1, None), ((1, 2), 2, None),
                                                ((1, 2), 1, (0.5, 2.0))])
def test_end_to_end_gradient_multiscale_and_multistep(scales, D, weights):
    rng = np.random.default_rng(8)
    cfg = NetworkConfig(channels=1, widths=(2, 2, 2), bottleneck=2, flow_range=2.0, init_std=0.5,
                        steps=D, scales=scales, fusion_width=2)
    net = model.build_network(cfg, 4, np.float64)
    for name, p in net.params().items():
        if name.endswith("bias"):
            p.value[...] = rng.uniform(-0.3, 0.3, p.value.shape)
    size = 8 * scales[-1]
    X = gradcheck.smooth_frames(rng, 4, 2, size)
    Y = gradcheck.smooth_frames(rng, 4, D, size)
    tcfg = TrainConfig(batch=4, D=D, scales=scales, scale_weights=weights)

    def f():
        net.zero_grad()
        return forward_backward(net, X, Y, tcfg).total

    f()
    analytic = {k: p.grad.copy() for k, p in net.params().items()}
    assert _check_entries(net, f, analytic, 1e-6, 4, rng) < 1e-4
