import numpy as np
import pytest

from stereoguide.encoders import LinearHeadParams, apply_linear_head, linear_head_grads, mono_bev, pillarize
from stereoguide.errors import ShapeMismatch
from stereoguide.geometry import BevGridSpec, CameraIntrinsics, bev_to_camera

SPEC = BevGridSpec((0.0, 4.0), (-2.0, 2.0), (-3.0, 1.0), 1.0)


def cam_points(bev_xyz):
    return bev_to_camera(np.asarray(bev_xyz, dtype=np.float64))


def test_pillarize_examples():
    assert not pillarize(np.zeros((0, 3)), SPEC).any()
    out = pillarize(cam_points([[1.5, 0.5, 0.5]]), SPEC)
    np.testing.assert_allclose(out[:, 1, 2], [1, 1.5, 0.5, 0.5, 0.5, 1.0])
    assert np.count_nonzero(out[0]) == 1
    out = pillarize(cam_points([[2.2, -1.5, 0.0], [2.8, -1.5, 1.0 - 1e-9]]), SPEC)
    assert out[0, 2, 0] == 2
    assert out[3, 2, 0] == pytest.approx(0.5)
    assert out[4, 2, 0] == pytest.approx(1.0)


def test_pillarize_drops_out_of_range_and_reads_reflectance():
    pts = np.column_stack([cam_points([[1.5, 0.5, 0.0], [9.0, 0.0, 0.0], [1.5, 0.5, 2.0]]), [0.2, 0.9, 0.9]])
    out = pillarize(pts, SPEC)
    assert out[0].sum() == 1
    assert out[5, 1, 2] == pytest.approx(0.2)


def test_pillarize_permutation_invariant():
    rng = np.random.default_rng(0)
    pts = cam_points(np.column_stack([rng.uniform(0, 4, 500), rng.uniform(-2, 2, 500), rng.uniform(-3, 1, 500)]))
    a = pillarize(pts, SPEC)
    b = pillarize(pts[rng.permutation(500)], SPEC)
    np.testing.assert_array_equal(a[[0, 4]], b[[0, 4]])
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_linear_head_examples():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 4, 4))
    np.testing.assert_array_equal(apply_linear_head(x, LinearHeadParams.identity(6)), x)
    p = LinearHeadParams(np.zeros((3, 6)), np.array([1.0, -2.0, 0.5]))
    np.testing.assert_array_equal(apply_linear_head(x, p), np.broadcast_to([[[1.0]], [[-2.0]], [[0.5]]], (3, 4, 4)))
    g = linear_head_grads(x, p, np.ones((3, 4, 4)))
    np.testing.assert_array_equal(g["bias"], [16, 16, 16])
    with pytest.raises(ShapeMismatch):
        apply_linear_head(x[:5], p)


def test_linear_head_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 3, 5))
    p = LinearHeadParams(rng.normal(size=(2, 4)), rng.normal(size=2))
    r = rng.normal(size=(2, 3, 5))
    g = linear_head_grads(x, p, r)
    h = 1e-6
    for name, arr in (("weight", p.weight), ("bias", p.bias), ("input", x)):
        for idx in list(np.ndindex(arr.shape))[:6]:
            orig = arr[idx]
            arr[idx] = orig + h
            hi = (apply_linear_head(x, p) * r).sum()
            arr[idx] = orig - h
            lo = (apply_linear_head(x, p) * r).sum()
            arr[idx] = orig
            assert g[name][idx] == pytest.approx((hi - lo) / (2 * h), rel=1e-6, abs=1e-8)


MONO_CAM = CameraIntrinsics(2.0, 2.0, 1.5, 0.5)
MONO_SPEC = BevGridSpec((0.0, 12.0), (-6.0, 6.0), (-3.0, 3.0), 1.0)
EDGES = np.linspace(2.0, 10.0, 5)


def test_mono_bev_examples():
    rng = np.random.default_rng(3)
    params = LinearHeadParams(rng.normal(size=(4, 2)), np.zeros(4))
    feats = rng.normal(size=(2, 2, 4))
    out = mono_bev(feats, np.zeros((2, 4, 4)), MONO_CAM, MONO_SPEC, params, EDGES)
    # uniform logits split every pixel evenly across the bins
    from stereoguide.geometry import DepthDistribution, lift_frustum
    uniform = DepthDistribution(np.full((2, 4, 4), 0.25), EDGES)
    np.testing.assert_allclose(out, apply_linear_head(lift_frustum(feats, uniform, MONO_CAM, MONO_SPEC), params),
                               atol=1e-12)
    zero = mono_bev(np.zeros((2, 2, 4)), rng.normal(size=(2, 4, 4)), MONO_CAM, MONO_SPEC, params, EDGES)
    assert not zero.any()
    with pytest.raises(ShapeMismatch):
        mono_bev(feats, np.zeros((2, 3, 4)), MONO_CAM, MONO_SPEC, params, EDGES)


def test_mono_bev_shift_invariant_in_logits():
    rng = np.random.default_rng(4)
    params = LinearHeadParams(rng.normal(size=(3, 2)), rng.normal(size=3))
    feats, logits = rng.normal(size=(2, 2, 4)), rng.normal(size=(2, 4, 4))
    shift = rng.normal(size=(2, 4, 1)) * 10
    np.testing.assert_allclose(mono_bev(feats, logits + shift, MONO_CAM, MONO_SPEC, params, EDGES),
                               mono_bev(feats, logits, MONO_CAM, MONO_SPEC, params, EDGES), rtol=0, atol=1e-9)


def test_mono_bev_one_pixel_two_bin_gradient():
    cam = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
    edges = np.array([2.0, 5.0, 8.0])
    params = LinearHeadParams(np.array([[1.5]]), np.array([0.1]))
    feats = np.array([[[2.0]]])
    readout = np.random.default_rng(5).normal(size=(1,) + MONO_SPEC.shape)
    logits = np.array([[[0.3, -0.4]]])
    _, grads = mono_bev(feats, logits, cam, MONO_SPEC, params, edges, grad_output=readout)
    h = 1e-6
    for d in range(2):
        e = np.zeros_like(logits)
        e[0, 0, d] = h
        f = lambda z: (mono_bev(feats, z, cam, MONO_SPEC, params, edges) * readout).sum()  # noqa: E731
        fd = (f(logits + e) - f(logits - e)) / (2 * h)
        assert grads["depth_logits"][0, 0, d] == pytest.approx(fd, rel=1e-6)
