import numpy as np
import pytest

from uvsplat.errors import BehindCamera, StaleState
from uvsplat.gaussian_model import GaussianCloud
from uvsplat.multiview import Camera
from uvsplat.splat_renderer import RenderSettings, project_gaussian, render, render_backward

from oracles import brute_force_render, random_scene, render_gradient_check, splat_reference


def axis_camera(size=32, f=40.0):
    return Camera(f, f, size / 2, size / 2, np.eye(3), np.zeros(3), size, size)


def cloud_of(means, colors, opac, scale=0.05):
    n = len(means)
    return GaussianCloud(np.asarray(means, float), np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.full((n, 3), scale), np.asarray(opac, float), np.asarray(colors, float))


# projection ----------------------------------------------------------------

def test_projection_isotropic_on_axis():
    cam = axis_camera(f=100.0)
    sigma, z = 0.02, 2.0
    sp = project_gaussian(cam, [0, 0, z], sigma ** 2 * np.eye(3))
    np.testing.assert_allclose(sp.mean, [16, 16])
    np.testing.assert_allclose(sp.cov, ((100 * sigma / z) ** 2 + 0.3) * np.eye(2), rtol=1e-12)
    far = project_gaussian(cam, [0, 0, 2 * z], sigma ** 2 * np.eye(3))
    np.testing.assert_allclose(np.sqrt(far.cov[0, 0] - 0.3), 0.5 * np.sqrt(sp.cov[0, 0] - 0.3))


def test_projection_zero_covariance_is_floor():
    sp = project_gaussian(axis_camera(), [0.1, -0.2, 1.5], np.zeros((3, 3)))
    np.testing.assert_array_equal(sp.cov, 0.3 * np.eye(2))


def test_projection_matches_numeric_jacobian():
    rng = np.random.default_rng(0)
    cam = Camera.look_at([0.3, 0.2, -2], [0, 0, 0], [0, 1, 0], 50, 55, 32, 32)
    for _ in range(10):
        mean = rng.normal(scale=0.3, size=3)
        A = rng.normal(size=(3, 3)) * 0.05
        cov = A @ A.T

        def proj(p):
            t = cam.R @ p + cam.t
            return np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])

        J = np.column_stack([(proj(mean + e) - proj(mean - e)) / 2e-6 for e in np.eye(3) * 1e-6])
        sp = project_gaussian(cam, mean, cov)
        np.testing.assert_allclose(sp.cov, J @ cov @ J.T + 0.3 * np.eye(2), rtol=1e-6, atol=1e-9)
        assert np.all(np.linalg.eigvalsh(sp.cov) >= 0.3 - 1e-12)


def test_projection_behind_camera():
    with pytest.raises(BehindCamera):
        project_gaussian(axis_camera(), [0, 0, -1.0], np.eye(3))
    with pytest.raises(BehindCamera):
        project_gaussian(axis_camera(), [0, 0, 1e-5], np.eye(3))


# forward -------------------------------------------------------------------

def test_empty_cloud_is_black():
    out = render(GaussianCloud.empty(), axis_camera())
    assert out.color.shape == (32, 32, 3) and out.alpha.shape == (32, 32, 1)
    assert not out.color.any() and not out.alpha.any()


def test_single_gaussian_at_pixel_center():
    cam = axis_camera()
    # (0.5, 0.5) px offset from the principal point lands on the center of pixel (16, 16)
    z = 2.0
    mean = [0.5 * z / cam.fx, 0.5 * z / cam.fy, z]
    out = render(cloud_of([mean], [[0.2, 0.7, 0.4]], [1.0]), cam)
    np.testing.assert_allclose(out.color[16, 16], [0.2, 0.7, 0.4], atol=1e-15)
    assert out.alpha[16, 16, 0] == 1.0


def test_two_gaussians_closed_form():
    cam = axis_camera()
    c1, c2 = np.array([1.0, 0.2, 0.1]), np.array([0.1, 0.3, 0.9])
    cloud = cloud_of([[0, 0, 3.0], [0, 0, 2.0]], [c2, c1], [0.8, 0.5], scale=0.2)
    out = render(cloud, cam)
    # both splats are wide enough that the center pixel sees nearly their peak
    sp = [splat_reference(cam, cloud.means[i], cloud.quats[i], cloud.scales[i]) for i in (1, 0)]
    d = np.array([16.5, 16.5]) - sp[0][0]
    a1 = 0.5 * np.exp(-0.5 * d @ np.linalg.inv(sp[0][1]) @ d)
    a2 = 0.8 * np.exp(-0.5 * d @ np.linalg.inv(sp[1][1]) @ d)
    np.testing.assert_allclose(out.color[16, 16], c1 * a1 + c2 * a2 * (1 - a1), rtol=1e-12)
    np.testing.assert_allclose(out.alpha[16, 16, 0], 1 - (1 - a1) * (1 - a2), rtol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_tiled_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    cloud, cam = random_scene(rng, 60)
    out = render(cloud, cam)
    img, alpha = brute_force_render(cloud, cam)
    np.testing.assert_allclose(out.color, img, atol=1e-6)
    np.testing.assert_allclose(out.alpha, alpha, atol=1e-6)


def test_tile_size_does_not_change_result():
    cloud, cam = random_scene(np.random.default_rng(11), 80, size=40)
    a = render(cloud, cam)
    b = render(cloud, cam, RenderSettings(tile_size=7))
    np.testing.assert_allclose(a.color, b.color, atol=1e-12)
    np.testing.assert_allclose(a.alpha, b.alpha, atol=1e-12)


def test_permutation_invariance():
    rng = np.random.default_rng(5)
    cloud, cam = random_scene(rng, 50)
    perm = rng.permutation(len(cloud))
    shuffled = GaussianCloud(cloud.means[perm], cloud.quats[perm], cloud.scales[perm],
                             cloud.opacities[perm], cloud.colors[perm])
    np.testing.assert_allclose(render(shuffled, cam).color, render(cloud, cam).color, atol=1e-12)


def test_white_cloud_color_equals_alpha():
    rng = np.random.default_rng(6)
    cloud, cam = random_scene(rng, 70)
    cloud.colors[:] = 1.0
    out = render(cloud, cam)
    assert out.alpha.max() <= 1.0 and out.alpha.min() >= 0.0
    np.testing.assert_allclose(out.color, np.repeat(out.alpha, 3, axis=-1), atol=1e-12)


def test_gaussians_behind_camera_are_skipped():
    cam = axis_camera()
    cloud = cloud_of([[0, 0, -1.0]], [[1, 1, 1]], [1.0], scale=0.5)
    assert not render(cloud, cam).alpha.any()


def test_tile_stats_are_json_ready():
    import json
    cloud, cam = random_scene(np.random.default_rng(1), 20)
    stats = render(cloud, cam).tile_stats()
    json.dumps(stats)
    assert stats["tiles_x"] == 2 and stats["tiles_y"] == 2


# backward ------------------------------------------------------------------

def test_zero_upstream_gives_zero_gradients():
    cloud, cam = random_scene(np.random.default_rng(2), 15)
    g = render_backward(cloud, cam, np.zeros((32, 32, 3)), np.zeros((32, 32)))
    for arr in (g.means, g.quats, g.scales, g.opacities, g.colors):
        assert not np.any(arr)


def test_color_gradient_is_alpha_at_center():
    cam = axis_camera()
    z = 2.0
    cloud = cloud_of([[0.5 * z / cam.fx, 0.5 * z / cam.fy, z]], [[0.3, 0.3, 0.3]], [0.6])
    up = np.zeros((32, 32, 3))
    up[16, 16, 1] = 1.0
    g = render_backward(cloud, cam, up)
    np.testing.assert_allclose(g.colors[0], [0, 0.6, 0], atol=1e-15)


def test_gradient_shapes_match_parameters():
    cloud, cam = random_scene(np.random.default_rng(3), 12)
    g = render_backward(cloud, cam, np.ones((32, 32, 3)))
    assert g.means.shape == (12, 3) and g.quats.shape == (12, 4) and g.scales.shape == (12, 3)
    assert g.opacities.shape == (12,) and g.colors.shape == (12, 3)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    cloud, cam = random_scene(rng, 8)
    checked, passed = render_gradient_check(cloud, cam, rng)
    assert checked > 50
    assert passed >= 0.95 * checked


def test_clamped_scales_get_zero_gradient():
    rng = np.random.default_rng(4)
    cloud, cam = random_scene(rng, 10, max_scale=0.1)
    g = render_backward(cloud, cam, rng.normal(size=(32, 32, 3)))
    clamped = cloud.scales >= 0.1
    assert clamped.any()
    assert not g.scales[clamped].any()


def test_stale_state_detected():
    cloud, cam = random_scene(np.random.default_rng(7), 10)
    fwd = render(cloud, cam)
    render_backward(cloud, cam, np.ones((32, 32, 3)), forward=fwd)
    cloud.opacities_raw[0] += 0.1
    with pytest.raises(StaleState):
        render_backward(cloud, cam, np.ones((32, 32, 3)), forward=fwd)


def test_backward_is_deterministic():
    rng = np.random.default_rng(8)
    cloud, cam = random_scene(rng, 40)
    up = rng.normal(size=(32, 32, 3))
    a = render_backward(cloud, cam, up)
    b = render_backward(cloud, cam, up)
    for x, y in zip(vars(a).values(), vars(b).values()):
        np.testing.assert_array_equal(x, y)
