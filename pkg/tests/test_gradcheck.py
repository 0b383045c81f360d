import numpy as np
import pytest

from voxelflow import gradcheck, nn


def test_rel_error_scale_and_floor():
    assert gradcheck.rel_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert gradcheck.rel_error([0.0], [0.0]) == 0.0
    assert gradcheck.rel_error([1.0, 4.0], [1.0, 3.0]) == pytest.approx(0.25)
    assert gradcheck.rel_error([1e-9], [0.0], floor=1.0) == pytest.approx(1e-9)


def test_numeric_grad_restores_input():
    x = np.array([1.0, -2.0, 0.5])
    g = gradcheck.numeric_grad(lambda: float((x ** 3).sum()), x, 1e-4)
    np.testing.assert_allclose(g, 3 * x ** 2, rtol=1e-7)
    np.testing.assert_array_equal(x, [1.0, -2.0, 0.5])


def test_off_lattice_flow_stays_off_lattice(rng):
    f = gradcheck.off_lattice_flow(rng, 2, 8, 8, margin=0.01)
    xs = np.arange(8)[None, None, :]
    for v in (xs + f.dx, xs - f.dx):
        frac = v - np.floor(v)
        assert frac.min() >= 0.01 and frac.max() <= 0.99


@pytest.mark.parametrize("scope", ["kernels", "sampler", "losses"])
def test_scopes_pass(scope):
    results = gradcheck.run(scope)
    assert results and all(r.passed for r in results), [r.as_record() for r in results]


def test_full_network_both_precisions():
    results = {r.component: r for r in gradcheck.run("full")}
    assert results["full_float64"].passed and results["full_float64"].worst < 1e-6
    f32 = results["full_float32"]
    assert f32.passed
    checked, total = map(int, f32.note.split("=")[1].split("/"))
    assert checked >= (1 - gradcheck.MAX_KINK_FRACTION) * total


def test_broken_conv_gradient_is_named(monkeypatch):
    real = nn.conv2d_backward

    def broken(dy, cache):
        dx, dw, db = real(dy, cache)
        return dx, dw * 1.001, db

    monkeypatch.setattr(nn, "conv2d_backward", broken)
    failed = [r.component for r in gradcheck.run("kernels") if not r.passed]
    assert "conv2d" in failed


def test_unknown_scope():
    with pytest.raises(ValueError, match="unknown gradcheck scope"):
        gradcheck.run("everything")


def test_record_format():
    r = gradcheck.CheckResult("sampler", 2e-6, 1e-4, "checked=5/6")
    assert r.passed
    assert r.as_record() == "PASS component=sampler worst_rel_err=2.000e-06 tol=1e-04 checked=5/6"
    assert not gradcheck.CheckResult("x", float("inf"), 1e-2).passed
