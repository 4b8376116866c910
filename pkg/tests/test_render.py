import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmfnet.autodiff import Tensor, check_gradients, probe_gradients
from xmfnet.errors import ConfigError, IngestionError
from xmfnet.render import (Camera, RenderConfig, RenderTarget, binarize, composite_splats, edge_mask, load_camera,
                           project, read_pgm, render_loss, render_silhouette, save_camera, write_pgm)


def axis_camera(H=32, W=32, f=100.0, cx=None, cy=None):
    cx = (W - 1) / 2 if cx is None else cx
    cy = (H - 1) / 2 if cy is None else cy
    return Camera(f, f, cx, cy, np.eye(3), np.zeros(3), H, W)


# -- camera -------------------------------------------------------------------

def test_camera_rejects_non_orthonormal():
    with pytest.raises(ConfigError):
        Camera(1, 1, 0, 0, 2 * np.eye(3), np.zeros(3), 4, 4)
    with pytest.raises(ConfigError):
        Camera(0, 1, 0, 0, np.eye(3), np.zeros(3), 4, 4)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 360), st.floats(-60, 60))
def test_on_sphere_orthonormal_and_facing_origin(az, el):
    cam = Camera.on_sphere(az, el, 2.5, 16, 16, 20.0)
    np.testing.assert_allclose(cam.R.T @ cam.R, np.eye(3), atol=1e-12)
    assert np.linalg.norm(cam.center) == pytest.approx(2.5)
    origin_cam = cam.R @ np.zeros(3) + cam.t
    np.testing.assert_allclose(origin_cam, [0, 0, 2.5], atol=1e-12)


def test_camera_json_roundtrip(tmp_path):
    cam = Camera.on_sphere(30, 15, 2.5, 64, 48, 40.0)
    save_camera(tmp_path / "c.json", cam)
    back = load_camera(tmp_path / "c.json")
    assert back.to_dict() == cam.to_dict()
    assert set(cam.to_dict()) == {"fx", "fy", "cx", "cy", "R", "t", "H", "W"}
    assert len(cam.to_dict()["R"]) == 9


def test_camera_bad_file(tmp_path):
    (tmp_path / "c.json").write_text("{\"fx\": 1}")
    with pytest.raises(IngestionError, match="c.json"):
        load_camera(tmp_path / "c.json")


# -- projection ---------------------------------------------------------------

def test_project_axis_point_to_principal_point():
    p = project(np.array([[0.0, 0.0, 2.0]]), axis_camera(cx=5.0, cy=7.0))
    np.testing.assert_allclose(p.uv.data, [[5.0, 7.0]])


def test_project_hand_value():
    p = project(np.array([[0.1, 0.0, 1.0]]), axis_camera(224, 224, 100.0, 112.0, 112.0))
    np.testing.assert_allclose(p.uv.data, [[122.0, 112.0]])


def test_project_doubling_depth_halves_offset():
    cam = axis_camera(cx=0.0, cy=0.0)
    a = project(np.array([[0.3, -0.2, 1.0]]), cam).uv.data
    b = project(np.array([[0.3, -0.2, 2.0]]), cam).uv.data
    np.testing.assert_allclose(b, a / 2)


def test_project_drops_points_behind(caplog):
    pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [0.0, 0.0, 0.0]])
    with caplog.at_level(logging.WARNING):
        p = project(pts, axis_camera())
    assert p.dropped == 2
    np.testing.assert_array_equal(p.keep, [0])
    assert "behind the camera" in caplog.text


def test_project_gradient_fd():
    pts = Tensor(np.random.default_rng(0).uniform(-0.5, 0.5, (6, 3)), requires_grad=True)
    cam = Camera.on_sphere(20, 10, 3.0, 32, 32, 30.0)
    w = Tensor(np.random.default_rng(1).normal(size=(6, 2)))
    assert check_gradients(lambda: (project(pts, cam).uv * w).sum(), [pts]) <= 1e-6


# -- splatting ----------------------------------------------------------------

def test_empty_region_is_zero():
    img = render_silhouette(np.array([[0.0, 0.0, 2.0]]), axis_camera(), rho=0.02).data
    assert img[0, 0] == 0.0 and img[-1, -1] == 0.0


def test_point_at_pixel_center_is_one():
    cam = axis_camera(cx=10.0, cy=12.0)
    img = render_silhouette(np.array([[0.0, 0.0, 2.0]]), cam, rho=0.05).data
    assert img[12, 10] == 1.0


def test_single_splat_profile():
    cam = axis_camera(H=21, W=21, f=100.0, cx=10.0, cy=10.0)
    img = render_silhouette(np.array([[0.0, 0.0, 1.0]]), cam, rho=0.04).data  # radius 4 px
    rows, cols = np.mgrid[0:21, 0:21]
    d2 = (cols - 10.0) ** 2 + (rows - 10.0) ** 2
    np.testing.assert_allclose(img, np.maximum(0.0, 1 - d2 / 16.0), atol=1e-12)


def test_composite_two_splats_product_form():
    uv = Tensor(np.array([[5.0, 5.0], [6.0, 5.0]]))
    r = Tensor(np.array([3.0, 3.0]))
    img = composite_splats(uv, r, np.array([1.0, 2.0]), 11, 11).data
    a1, a2 = 1 - 1 / 9, 1.0
    assert img[5, 6] == pytest.approx(1 - (1 - a1) * (1 - a2))
    assert img[5, 4] == pytest.approx(1 - (1 - (1 - 1 / 9)) * (1 - (1 - 4 / 9)))


def test_k_nearest_in_depth_only():
    uv = Tensor(np.tile([[5.0, 5.0]], (3, 1)) + np.array([[0.5, 0], [0, 0.5], [0.5, 0.5]]))
    r = Tensor(np.full(3, 2.0))
    depth = np.array([3.0, 1.0, 2.0])
    img = composite_splats(uv, r, depth, 11, 11, k_splat=2).data
    d2 = np.array([0.25, 0.25, 0.5])
    a = 1 - d2 / 4.0
    assert img[5, 5] == pytest.approx(1 - (1 - a[1]) * (1 - a[2]))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(1.5, 3.0)),
                min_size=1, max_size=8))
def test_soft_silhouette_bounded_and_monotone(points):
    cam = axis_camera(H=24, W=24, f=40.0)
    pts = np.array(points)
    full = render_silhouette(pts, cam, rho=0.1).data
    assert full.min() >= 0.0 and full.max() <= 1.0
    # with at most k_splat points no splat is ever evicted, so coverage only grows
    fewer = render_silhouette(pts[:-1], cam, rho=0.1).data if len(pts) > 1 else np.zeros_like(full)
    assert np.all(full >= fewer - 1e-15)


def test_translation_equivariance_orthographic_limit():
    cam = axis_camera(H=40, W=40, f=2000.0, cx=19.5, cy=19.5)
    pts = np.array([[0.0, 0.0, 100.0], [0.03, 0.01, 100.0]])
    shift = 5 * 100.0 / 2000.0  # five pixels
    a = render_silhouette(pts, cam, rho=0.1).data
    b = render_silhouette(pts + [shift, 0, 0], cam, rho=0.1).data
    np.testing.assert_allclose(b[:, 5:], a[:, :-5], atol=1e-9)


def test_render_rho_must_be_positive():
    with pytest.raises(ConfigError):
        render_silhouette(np.zeros((1, 3)) + [0, 0, 1], axis_camera(), rho=0.0)


def test_composite_gradient_fd():
    rng = np.random.default_rng(2)
    uv = Tensor(rng.uniform(4, 12, (12, 2)), requires_grad=True)
    r = Tensor(rng.uniform(1.5, 3.5, 12), requires_grad=True)
    depth = rng.uniform(1, 2, 12)
    w = Tensor(rng.normal(size=(16, 16)))
    assert check_gradients(lambda: (composite_splats(uv, r, depth, 16, 16, k_splat=4) * w).sum(), [uv, r]) <= 1e-5


# -- binarize & edge mask -----------------------------------------------------

def test_binarize_background_zero():
    assert binarize(np.zeros((5, 5, 3))).sum() == 0


def test_binarize_half_object():
    img = np.zeros((4, 6, 3))
    img[:, :3] = 0.8
    np.testing.assert_array_equal(binarize(img), np.hstack([np.ones((4, 3)), np.zeros((4, 3))]))


def test_binarize_idempotent():
    s = (np.random.default_rng(3).uniform(size=(8, 8)) > 0.5).astype(float)
    np.testing.assert_array_equal(binarize(binarize(s)), s)


def test_binarize_custom_background():
    img = np.full((3, 3), 1.0)
    img[1, 1] = 0.0
    np.testing.assert_array_equal(binarize(img, background=1.0), np.pad([[1.0]], 1))


def test_edge_mask_constant():
    np.testing.assert_array_equal(edge_mask(np.ones((10, 10))), 1.0)
    np.testing.assert_array_equal(edge_mask(np.zeros((10, 10))), 1.0)


def test_edge_mask_step_band():
    s = np.zeros((20, 20))
    s[:, 10:] = 1.0
    m = edge_mask(s, epsilon=0.4)
    assert set(np.unique(m)) == {0.4, 1.0}
    assert np.all(m[:, 7:13] == 0.4)
    assert np.all(m[:, :4] == 1.0) and np.all(m[:, -4:] == 1.0)


def test_edge_mask_eps_one():
    s = np.zeros((20, 20))
    s[5:15, 5:15] = 1
    np.testing.assert_array_equal(edge_mask(s, epsilon=1.0), 1.0)


# -- loss ---------------------------------------------------------------------

def test_render_loss_zero_when_matching():
    cam = axis_camera(H=16, W=16, f=100.0, cx=7.0, cy=7.0)
    pts = np.array([[0.0, 0.0, 1.0]])
    rendered = render_silhouette(pts, cam, rho=0.2).data
    target = RenderTarget(rendered, np.ones_like(rendered))
    assert render_loss(pts, target, cam, RenderConfig(rho=0.2)).item() == 0.0


def test_render_loss_single_splat_on_background():
    cam = axis_camera(H=16, W=16, f=100.0, cx=7.0, cy=7.0)
    # a tiny splat covers exactly one pixel fully
    pts = np.array([[0.0, 0.0, 1.0]])
    cfg = RenderConfig(rho=0.009)
    mask = np.full((16, 16), 0.4)
    loss = render_loss(pts, RenderTarget(np.zeros((16, 16)), mask), cam, cfg).item()
    assert loss == pytest.approx(0.4 / 256)


def test_render_loss_from_image_uses_mask():
    cam = axis_camera(H=16, W=16, f=100.0, cx=7.0, cy=7.0)
    img = np.zeros((16, 16, 3))
    img[4:12, 4:12] = 1.0
    tgt = RenderTarget.from_image(img)
    np.testing.assert_array_equal(tgt.silhouette, binarize(img))
    assert set(np.unique(tgt.mask)) <= {0.4, 1.0}
    loss_a = render_loss(np.array([[0.0, 0.0, 1.0]]), img, cam).item()
    loss_b = render_loss(np.array([[0.0, 0.0, 1.0]]), tgt, cam).item()
    assert loss_a == loss_b


def test_render_loss_gradient_fd_at_boundary():
    rng = np.random.default_rng(4)
    cam = Camera.on_sphere(30, 20, 2.5, 24, 24, 20.0)
    target_pts = rng.normal(size=(40, 3))
    target_pts /= np.linalg.norm(target_pts, axis=1, keepdims=True) * 1.5
    cfg = RenderConfig(rho=0.2)
    tgt = RenderTarget.from_image(render_silhouette(target_pts, cam, 0.15).data, cfg)
    pts = Tensor(target_pts * 1.2 + rng.normal(scale=0.05, size=(40, 3)), requires_grad=True)
    errors, skipped = probe_gradients(lambda: render_loss(pts, tgt, cam, cfg), pts, range(pts.size))
    assert len(errors) >= 100 and skipped < 20
    assert errors.max() <= 1e-3


# -- PGM ----------------------------------------------------------------------

def test_pgm_roundtrip_and_header(tmp_path):
    img = np.round(np.random.default_rng(5).uniform(size=(7, 9)) * 255) / 255
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n9 7\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_pgm_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[0.0, 1.0]])


def test_pgm_bad(tmp_path):
    (tmp_path / "b.pgm").write_bytes(b"P2\n2 1\n255\n0 255")
    with pytest.raises(IngestionError, match="b.pgm"):
        read_pgm(tmp_path / "b.pgm")
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(IngestionError):
        read_pgm(tmp_path / "t.pgm")
