import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uvsplat.errors import InvalidConfig, LevelMismatch
from uvsplat.geometry import TemplateMesh, build_scaffolds, rasterize_uv_geometry
from uvsplat.multiview import (Camera, CaptureSet, View, aggregate_rgb_map, bilinear_sample,
                               load_cameras, project, render_depth, save_cameras,
                               visibility_weights)
from uvsplat.synthetic import raycast, render_textured, ring_cameras, sphere_texture, uv_sphere

from oracles import bilinear_reference


def simple_camera(**kw):
    args = dict(fx=100.0, fy=100.0, cx=50.0, cy=50.0, R=np.eye(3), t=np.zeros(3), width=100,
                height=100)
    args.update(kw)
    return Camera(**args)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


# cameras and projection ---------------------------------------------------

def test_project_on_axis_and_offset():
    cam = simple_camera()
    pix, z, ok = project(cam, np.array([[0, 0, 1.0], [0.1, 0, 1.0]]))
    np.testing.assert_allclose(pix, [[50, 50], [60, 50]])
    np.testing.assert_allclose(z, [1, 1])
    assert ok.all()


def test_project_matches_homogeneous_pipeline():
    rng = np.random.default_rng(0)
    for _ in range(10):
        R = random_rotation(rng)
        t = rng.normal(size=3) + [0, 0, 5]
        cam = Camera(*rng.uniform(50, 200, 2), *rng.uniform(20, 80, 2), R, t, 100, 100)
        pts = rng.normal(size=(50, 3))
        K = np.array([[cam.fx, 0, cam.cx, 0], [0, cam.fy, cam.cy, 0], [0, 0, 1, 0]])
        E = np.eye(4)
        E[:3, :3], E[:3, 3] = R, t
        h = (K @ E @ np.c_[pts, np.ones(50)].T).T
        pix, z, _ = project(cam, pts)
        np.testing.assert_allclose(pix, h[:, :2] / h[:, 2:], atol=1e-9)
        np.testing.assert_allclose(z, h[:, 2], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(px=st.floats(0, 100), py=st.floats(0, 100), depth=st.floats(0.1, 50), seed=st.integers(0, 999))
def test_projection_round_trip(px, py, depth, seed):
    rng = np.random.default_rng(seed)
    cam = Camera(120, 110, 48, 52, random_rotation(rng), rng.normal(size=3), 100, 100)
    ray_cam = np.array([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0]) * depth
    world = cam.R.T @ (ray_cam - cam.t)
    pix, z, _ = project(cam, world[None])
    np.testing.assert_allclose(pix[0], [px, py], atol=1e-6)
    assert abs(z[0] - depth) < 1e-9


def test_behind_camera_flagged():
    pix, z, ok = project(simple_camera(), np.array([[0, 0, -1.0], [0, 0, 0.0], [0, 0, 2.0]]))
    assert ok.tolist() == [False, False, True]
    assert np.isnan(pix[:2]).all()


@pytest.mark.parametrize("bad", [dict(fx=0.0), dict(width=0), dict(R=np.diag([1.0, 1.0, -1.0])),
                                 dict(R=np.ones((3, 3)))])
def test_camera_validation(bad):
    with pytest.raises(InvalidConfig):
        simple_camera(**bad)


def test_camera_json_round_trip(tmp_path):
    cams = ring_cameras(3, 0.6, 80.0, 64)
    save_cameras(tmp_path / "c.json", cams)
    data = json.loads((tmp_path / "c.json").read_text())
    assert set(data[0]) == {"fx", "fy", "cx", "cy", "R", "t", "width", "height"}
    assert len(data[0]["R"]) == 9
    back = load_cameras(tmp_path / "c.json")
    for a, b in zip(cams, back):
        np.testing.assert_array_equal(a.R, b.R)
        np.testing.assert_array_equal(a.t, b.t)
        assert (a.fx, a.cy, a.width) == (b.fx, b.cy, b.width)


def test_look_at_centers_target():
    cam = ring_cameras(1, 2.0, 100.0, 64)[0]
    pix, z, _ = project(cam, np.zeros((1, 3)))
    np.testing.assert_allclose(pix[0], [32, 32], atol=1e-12)
    assert abs(z[0] - 2.0) < 1e-12


def test_view_shape_validation():
    cam = simple_camera(width=4, height=3)
    View(cam, np.zeros((3, 4, 3)), np.zeros((3, 4)))
    with pytest.raises(InvalidConfig):
        View(cam, np.zeros((4, 3, 3)), np.zeros((3, 4)))
    with pytest.raises(InvalidConfig):
        CaptureSet([])


# bilinear sampling --------------------------------------------------------

def test_bilinear_constant_and_midpoint():
    img = np.full((5, 7, 2), 0.3)
    out = bilinear_sample(img, np.array([[-3.0, 2.0], [6.9, 4.99], [3.3, 1.1]]))
    np.testing.assert_allclose(out, 0.3)
    two = np.array([[0.0, 1.0], [0.0, 1.0]])[..., None]
    np.testing.assert_allclose(bilinear_sample(two, np.array([[1.0, 1.0]])), [[0.5]])


def test_bilinear_matches_reference():
    rng = np.random.default_rng(2)
    img = rng.random((9, 13, 3))
    coords = rng.uniform(-2, 15, size=(200, 2))
    out = bilinear_sample(img, coords)
    ref = np.array([bilinear_reference(img, x, y) for x, y in coords])
    np.testing.assert_allclose(out, ref, atol=1e-12)


# depth and visibility -----------------------------------------------------

def test_render_depth_matches_raycast():
    mesh = uv_sphere(0.1, 12, 24)
    cam = ring_cameras(1, 0.5, 90.0, 48, elevation=0.3)[0]
    depth = render_depth(cam, mesh.vertices, mesh.faces)
    hit, _, t = raycast(cam, mesh.vertices, mesh.faces)
    both = (hit >= 0) & np.isfinite(depth)
    assert both.sum() > 0.9 * (hit >= 0).sum()
    assert np.abs(depth[both] - t[both]).max() < 1e-9
    assert np.isinf(depth[hit < 0]).mean() > 0.95


def plane_mesh(z=0.0):
    v = np.array([[-1, -1, z], [1, -1, z], [1, 1, z], [-1, 1, z]], float)
    f = np.array([[0, 1, 2], [0, 2, 3]])
    uv = (v[f][..., :2] + 1) / 2
    return TemplateMesh(v, f, uv)


def test_single_front_camera_gets_full_weight():
    sc = build_scaffolds(plane_mesh(), 0.01, 0)
    geo = rasterize_uv_geometry(sc, 8)
    # camera on +z looking down -z; the plane normal (0,0,1) faces it
    cam = Camera(50, 50, 25, 25, np.diag([1.0, -1.0, -1.0]), [0, 0, 3.0], 50, 50)
    w = visibility_weights(sc, geo, [cam], 0)
    np.testing.assert_allclose(w.weights[0][geo.uv_mask], 1.0)
    assert w.unobserved_count == 0


def test_back_facing_texel_unobserved():
    sc = build_scaffolds(plane_mesh(), 0.01, 0)
    geo = rasterize_uv_geometry(sc, 8)
    cam = Camera(50, 50, 25, 25, np.eye(3), [0, 0, 3.0], 50, 50)  # sits at z=-3 looking +z
    w = visibility_weights(sc, geo, [cam], 0)
    assert np.all(w.weights == 0)
    assert w.unobserved_count == geo.foreground_count


def test_mirror_cameras_split_evenly():
    one = Camera.look_at([1.0, 0.0, 2.0], [0, 0, 0], [0, 1, 0], 600, 600, 640, 640)
    two = Camera.look_at([-1.0, 0.0, 2.0], [0, 0, 0], [0, 1, 0], 600, 600, 640, 640)
    sc = build_scaffolds(plane_mesh(), 0.01, 0)
    geo = rasterize_uv_geometry(sc, 3)  # the center texel sits at the origin
    w = visibility_weights(sc, geo, [one, two], 0)
    np.testing.assert_allclose(w.weights[:, 1, 1], [0.5, 0.5], atol=1e-12)


def test_weights_sum_to_one_and_occlusion():
    sc = build_scaffolds(uv_sphere(0.1, 12, 24), 0.01, 2)
    geo = rasterize_uv_geometry(sc, 32)
    cams = ring_cameras(3, 0.6, 100.0, 64, elevation=0.2)
    for level in range(3):
        w = visibility_weights(sc, geo, cams, level)
        s = w.weights.sum(0)
        np.testing.assert_allclose(s[w.observed], 1.0, atol=1e-6)
        assert np.all(w.weights[:, ~w.observed] == 0)
    # a second sphere in front of camera 0 hides the texels it covers
    blocker = uv_sphere(0.1, 12, 24, center=cams[0].center * 0.5)
    v = np.concatenate([sc.template_vertices, blocker.vertices])
    f = np.concatenate([sc.faces, blocker.faces + len(sc.template_vertices)])
    depth = [render_depth(c, v, f) for c in cams]
    hidden = visibility_weights(sc, geo, cams, 0, depth_maps=depth)
    free = visibility_weights(sc, geo, cams, 0)
    assert (hidden.weights[0] > 0).sum() < (free.weights[0] > 0).sum()


def test_bias_monotone():
    sc = build_scaffolds(uv_sphere(0.1, 12, 24), 0.01, 3)
    geo = rasterize_uv_geometry(sc, 32)
    cams = ring_cameras(2, 0.6, 100.0, 64)
    for level in (0, 3):
        prev = None
        for bias in (0.0, 0.001, 0.005, 0.02, 0.1):
            vis = visibility_weights(sc, geo, cams, level, bias=bias).weights > 0
            if prev is not None:
                assert np.all(vis >= prev)
            prev = vis


# aggregation --------------------------------------------------------------

def test_single_camera_aggregation_is_bilinear_sample():
    sc = build_scaffolds(plane_mesh(), 0.01, 0)
    geo = rasterize_uv_geometry(sc, 16)
    cam = Camera(40, 40, 32, 32, np.diag([1.0, -1.0, -1.0]), [0, 0, 3.0], 64, 64)
    rng = np.random.default_rng(5)
    img = rng.random((64, 64, 3))
    cap = CaptureSet([View(cam, img, np.ones((64, 64)))])
    w = visibility_weights(sc, geo, cap.cameras, 0)
    out = aggregate_rgb_map(cap, geo, w, 0)
    pix, _, _ = project(cam, geo.position_maps[0][geo.uv_mask])
    np.testing.assert_allclose(out[geo.uv_mask], bilinear_sample(img, pix), atol=1e-12)


def test_constant_subject_convexity_and_level_check():
    sc = build_scaffolds(uv_sphere(0.1, 12, 24), 0.01, 1)
    geo = rasterize_uv_geometry(sc, 32)
    cams = ring_cameras(2, 0.6, 100.0, 64)
    color = np.array([0.2, 0.5, 0.7])
    views = [View(c, np.broadcast_to(color, (64, 64, 3)).copy(), np.ones((64, 64))) for c in cams]
    cap = CaptureSet(views)
    w = visibility_weights(sc, geo, cams, 1)
    out = aggregate_rgb_map(cap, geo, w, 1)
    np.testing.assert_allclose(out[geo.uv_mask], np.broadcast_to(color, out[geo.uv_mask].shape),
                               atol=1e-12)
    with pytest.raises(LevelMismatch):
        aggregate_rgb_map(cap, geo, w, 0)


def test_aggregation_recovers_texture_from_raycast_views():
    # 3 views of a textured sphere from an independent ray caster; the error is
    # dominated by grazing texels, so views are rendered finely enough that one
    # texel spans about one pixel
    mesh = uv_sphere(0.1, 24, 48)
    size = 640
    focal = 0.45 * size / (0.1 / 0.6)
    cams = ring_cameras(3, 0.6, focal, size, elevation=0.3)
    views = []
    for cam in cams:
        img, mask = render_textured(cam, mesh, lambda uv, _: sphere_texture(uv[:, 0], uv[:, 1]))
        views.append(View(cam, img, mask))
    cap = CaptureSet(views)
    sc = build_scaffolds(mesh, 0.01, 0)
    geo = rasterize_uv_geometry(sc, 512)
    w = visibility_weights(sc, geo, cams, 0)
    out = aggregate_rgb_map(cap, geo, w, 0, fill_unobserved=False)
    rows, cols = np.mgrid[0:512, 0:512]
    truth = sphere_texture((cols + 0.5) / 512, 1 - (rows + 0.5) / 512)
    seen = w.observed
    assert np.abs(out - truth)[seen].mean() < 2 / 255


def test_more_cameras_never_increase_unobserved():
    sc = build_scaffolds(uv_sphere(0.1, 12, 24), 0.01, 2)
    geo = rasterize_uv_geometry(sc, 32)
    cams = ring_cameras(4, 0.6, 100.0, 64, elevation=0.3)
    for level in (0, 2):
        counts = [visibility_weights(sc, geo, cams[:k], level).unobserved_count
                  for k in range(1, 5)]
        assert counts == sorted(counts, reverse=True)


def test_level_out_of_range():
    sc = build_scaffolds(plane_mesh(), 0.01, 1)
    geo = rasterize_uv_geometry(sc, 4)
    with pytest.raises(InvalidConfig):
        visibility_weights(sc, geo, [simple_camera()], 2)
