import numpy as np
import pytest
from hypothesis import given, strategies as st

from voxelflow import gradcheck, sampler
from voxelflow.nn import ShapeError
from voxelflow.sampler import VoxelFlowField


def _video(f0, f1):
    return np.stack([f0, f1])[None]


def test_virtual_voxel_integer_location():
    v = sampler.build_virtual_voxel(1, 1, (0.0, 0.0, 0.25), (4, 4))
    assert v.source0 == (1, 1) and v.source1 == (1, 1)
    nonzero = {k: w for k, w in v.weights.items() if w}
    assert nonzero == {"000": 0.75, "001": 0.25}
    assert v.corners["000"] == (1, 1, 0) and v.corners["001"] == (1, 1, 1)


def test_virtual_voxel_zero_dt_kills_second_frame():
    v = sampler.build_virtual_voxel(2, 2, (0.5, 0.0, 0.0), (4, 4))
    assert v.source0 == (1.5, 2)
    assert v.weights["000"] == 0.5 and v.weights["100"] == 0.5
    assert v.corners["000"][0] == 1 and v.corners["100"][0] == 2
    assert all(w == 0 for k, w in v.weights.items() if k[2] == "1")


def test_virtual_voxel_weights_match_formula(rng):
    for _ in range(50):
        dx, dy = rng.uniform(-2, 2, 2)
        dt = rng.uniform(0, 1)
        x, y = rng.integers(0, 4, 2)
        v = sampler.build_virtual_voxel(int(x), int(y), (dx, dy, dt), (4, 4))
        assert sum(v.weights.values()) == pytest.approx(1.0, abs=1e-12)
        for k, (lx, ly) in enumerate(((x - dx, y - dy), (x + dx, y + dy))):
            fx, fy = lx - np.floor(lx), ly - np.floor(ly)
            wt = dt if k else 1 - dt
            assert v.weights[f"00{k}"] == pytest.approx((1 - fx) * (1 - fy) * wt)
            assert v.weights[f"11{k}"] == pytest.approx(fx * fy * wt)


def test_constant_frames_blend(backend):
    video = _video(np.zeros((4, 4)), np.ones((4, 4)))
    out = sampler.sample_forward(video, VoxelFlowField.constant(1, 4, 4, dt=0.25, dtype=np.float64))
    np.testing.assert_allclose(out, 0.25)


def test_ramp_half_pixel_shift(backend):
    ramp = np.tile(np.arange(5.0), (5, 1))
    flow = VoxelFlowField.constant(1, 5, 5, dx=0.5, dt=0.0, dtype=np.float64)
    out = sampler.sample_forward(_video(ramp, ramp), flow)
    assert out[0, 0, 2, 2] == 1.5


def test_matches_frozen_bruteforce_loop(backend, frozen):
    for case in frozen["sampler"]:
        video = _video(np.array(case["frame0"]), np.array(case["frame1"])).astype(np.float32)
        flow = VoxelFlowField(*(np.array(case[k], dtype=np.float32)[None] for k in ("dx", "dy", "dt")))
        out = sampler.sample_forward(video, flow)
        assert np.abs(out[0, 0] - np.array(case["out"])).max() <= 1e-6


def test_multichannel_matches_per_channel(backend, rng):
    video = rng.standard_normal((2, 6, 8, 8)).astype(np.float32)
    flow = VoxelFlowField(*(rng.uniform(-2, 2, (2, 8, 8)).astype(np.float32) for _ in range(2)),
                          rng.uniform(0, 1, (2, 8, 8)).astype(np.float32))
    out = sampler.sample_forward(video, flow)
    for c in range(3):
        single = sampler.sample_forward(np.ascontiguousarray(video[:, [c, c + 3]]), flow)
        np.testing.assert_allclose(out[:, c], single[:, 0], atol=1e-6)


def test_blend_derivative_on_constant_frames(backend):
    video = _video(np.zeros((4, 4)), np.ones((4, 4)))
    flow = VoxelFlowField.constant(1, 4, 4, dt=0.4, dtype=np.float64)
    g = sampler.sample_backward(video, flow, np.ones((1, 1, 4, 4)))
    np.testing.assert_allclose(g.d_dt, 1.0)


def test_ramp_derivative_wrt_dx(backend):
    ramp = np.tile(np.arange(6.0), (6, 1))
    flow = VoxelFlowField.constant(1, 6, 6, dx=0.3, dt=0.0, dtype=np.float64)
    g = sampler.sample_backward(_video(ramp, ramp), flow, np.ones((1, 1, 6, 6)))
    np.testing.assert_allclose(g.d_dx[0, 2:4, 2:4], -1.0)


def test_gradient_finite_difference_off_lattice(backend):
    assert gradcheck.check_sampler(np.random.default_rng(11)) < 1e-4


def test_lattice_point_gradient_is_one_sided(backend):
    # at an integer sample position the upper neighbour's slope is used
    row = np.array([0.0, 0.0, 0.0, 4.0, 4.0, 4.0])
    img = np.tile(row, (6, 1))
    flow = VoxelFlowField.constant(1, 6, 6, dx=0.0, dt=0.0, dtype=np.float64)
    g = sampler.sample_backward(_video(img, img), flow, np.ones((1, 1, 6, 6)))
    # dY/d(dx) = -(I[x0 + 1] - I[x0]) at x = 2 -> -(4 - 0)
    assert g.d_dx[0, 0, 2] == -4.0
    assert g.d_dx[0, 0, 3] == 0.0


def test_dt_outside_unit_interval_is_clamped_with_zero_gradient(backend):
    video = _video(np.zeros((4, 4)), np.ones((4, 4)))
    flow = VoxelFlowField.constant(1, 4, 4, dt=1.5, dtype=np.float64)
    out = sampler.sample_forward(video, flow)
    np.testing.assert_allclose(out, 1.0)
    g = sampler.sample_backward(video, flow, np.ones((1, 1, 4, 4)))
    assert not g.d_dt.any()


def test_input_gradient_is_adjoint_of_forward(backend, rng):
    video = rng.standard_normal((2, 4, 6, 6))
    flow = gradcheck.off_lattice_flow(rng, 2, 6, 6)
    up = rng.standard_normal((2, 2, 6, 6))
    g = sampler.sample_backward(video, flow, up, need_input=True)
    other = rng.standard_normal(video.shape)
    # forward is linear in the video: <S(v), u> = <v, S^T u>
    assert float((sampler.sample_forward(other, flow) * up).sum()) == pytest.approx(float((other * g.d_input).sum()))


def test_shape_errors():
    video = np.zeros((1, 2, 4, 4))
    with pytest.raises(ShapeError):
        sampler.sample_forward(np.zeros((1, 3, 4, 4)), VoxelFlowField.constant(1, 4, 4))
    with pytest.raises(ShapeError):
        sampler.sample_forward(video, VoxelFlowField.constant(1, 4, 5))
    with pytest.raises(ShapeError):
        sampler.sample_backward(video, VoxelFlowField.constant(1, 4, 4), np.zeros((1, 2, 4, 4)))


def test_project_flow_definitions():
    motion, mask, disp = sampler.project_flow(VoxelFlowField.constant(1, 2, 2, dx=1, dy=-2, dt=0.5))
    np.testing.assert_array_equal(motion[0, 0], 1)
    np.testing.assert_array_equal(motion[0, 1], -2)
    np.testing.assert_array_equal(mask, 0.5)
    np.testing.assert_array_equal(disp[0, 0], 2)
    np.testing.assert_array_equal(disp[0, 1], -4)
    motion, mask, _ = sampler.project_flow(VoxelFlowField.constant(1, 2, 2, dt=0.0))
    assert not motion.any() and not mask.any()


def test_project_assemble_round_trip(rng):
    f = VoxelFlowField(*(rng.standard_normal((2, 3, 4)) for _ in range(3)))
    g = sampler.assemble_flow(*sampler.project_flow(f)[:2])
    for k in ("dx", "dy", "dt"):
        np.testing.assert_array_equal(getattr(f, k), getattr(g, k))


def test_tensor_round_trip(rng):
    t = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_array_equal(VoxelFlowField.from_tensor(t).as_tensor(), t)


@given(st.floats(-4, 4), st.floats(-4, 4), st.floats(0, 1), st.integers(0, 10_000))
def test_output_is_convex_combination(dx, dy, dt, seed):
    rng = np.random.default_rng(seed)
    video = rng.uniform(-1, 1, (1, 2, 6, 6))
    out = sampler.sample_forward(video, VoxelFlowField.constant(1, 6, 6, dx, dy, dt, dtype=np.float64))
    assert out.min() >= video.min() - 1e-12 and out.max() <= video.max() + 1e-12


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 1))
def test_constant_video_is_a_fixed_point(dx, dy, dt):
    video = np.full((1, 2, 5, 5), 0.3)
    out = sampler.sample_forward(video, VoxelFlowField.constant(1, 5, 5, dx, dy, dt, dtype=np.float64))
    np.testing.assert_allclose(out, 0.3, atol=1e-12)


@given(st.integers(0, 10_000))
def test_zero_flow_half_blend_is_frame_average(seed):
    rng = np.random.default_rng(seed)
    video = rng.standard_normal((2, 4, 8, 8))
    out = sampler.sample_forward(video, VoxelFlowField.constant(2, 8, 8, dtype=np.float64))
    np.testing.assert_allclose(out, (video[:, :2] + video[:, 2:]) / 2, atol=1e-12)


@given(st.integers(0, 10_000))
def test_swapping_frames_mirrors_flow(seed):
    # reading frame1 at x+d with weight dt equals reading it as frame0 at x-(-d) with weight 1-(1-dt)
    rng = np.random.default_rng(seed)
    video = rng.standard_normal((1, 2, 6, 6))
    f = VoxelFlowField(rng.uniform(-2, 2, (1, 6, 6)), rng.uniform(-2, 2, (1, 6, 6)), rng.uniform(0, 1, (1, 6, 6)))
    swapped = np.ascontiguousarray(video[:, ::-1])
    g = VoxelFlowField(-f.dx, -f.dy, 1 - f.dt)
    np.testing.assert_allclose(sampler.sample_forward(video, f), sampler.sample_forward(swapped, g), atol=1e-12)
