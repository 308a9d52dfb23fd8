"""Procedural test subjects.

A UV sphere plays the role of the body template; the "subject" is the same
sphere with smooth radial bumps (up to 3 cm) that carry their own
hair-like color. Ground-truth views are produced by exact ray casting, which
shares no code with the z-buffer or the splatting renderer.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import TemplateMesh
from .multiview import CaptureSet, Camera, View


def uv_sphere(radius=0.1, n_lat=24, n_lon=48, center=(0.0, 0.0, 0.0)):
    """Latitude/longitude sphere with a single rectangular UV chart.

    ``u`` follows longitude and ``v`` runs from 0 (south pole) to 1 (north
    pole, +y up). The seam column has its own UVs at ``u = 1``.
    """
    center = np.asarray(center, dtype=np.float64)
    verts = [[0.0, radius, 0.0]]
    for i in range(1, n_lat):
        theta = np.pi * i / n_lat
        for j in range(n_lon):
            phi = 2 * np.pi * j / n_lon
            verts.append([radius * np.sin(theta) * np.sin(phi), radius * np.cos(theta),
                          radius * np.sin(theta) * np.cos(phi)])
    verts.append([0.0, -radius, 0.0])
    verts = np.asarray(verts) + center
    south = len(verts) - 1

    def vid(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    def uv(i, j):
        return [j / n_lon, 1.0 - i / n_lat]

    faces, uvs = [], []
    for j in range(n_lon):
        faces.append([0, vid(1, j), vid(1, j + 1)])
        uvs.append([[(j + 0.5) / n_lon, 1.0], uv(1, j), uv(1, j + 1)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            faces += [[a, b, c], [a, c, d]]
            uvs += [[uv(i, j), uv(i + 1, j), uv(i + 1, j + 1)],
                    [uv(i, j), uv(i + 1, j + 1), uv(i, j + 1)]]
    for j in range(n_lon):
        faces.append([south, vid(n_lat - 1, j + 1), vid(n_lat - 1, j)])
        uvs.append([[(j + 0.5) / n_lon, 0.0], uv(n_lat - 1, j + 1), uv(n_lat - 1, j)])
    return TemplateMesh(verts, np.asarray(faces), np.asarray(uvs))


def sphere_texture(u, v):
    """Smooth RGB texture on the sphere chart, consistent across seam and poles."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    band = np.sin(np.pi * v)
    r = 0.55 + 0.30 * np.sin(2 * np.pi * u) * band
    g = 0.45 + 0.25 * np.cos(4 * np.pi * u) * band ** 2
    b = 0.50 + 0.30 * np.cos(np.pi * v) + 0.10 * np.sin(6 * np.pi * u) * band ** 3
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def texture_image(fn, height, width):
    """Sample a UV texture function at texel centers of an image."""
    rows, cols = np.mgrid[0:height, 0:width]
    return fn((cols + 0.5) / width, 1.0 - (rows + 0.5) / height)


@dataclass(frozen=True)
class Bumps:
    """Sum of Gaussian radial bumps on a sphere, capped at ``max_height``."""

    directions: np.ndarray
    widths: np.ndarray
    heights: np.ndarray
    max_height: float

    def height(self, unit_dirs):
        cosang = np.clip(unit_dirs @ self.directions.T, -1.0, 1.0)
        ang = np.arccos(cosang)
        h = (self.heights * np.exp(-0.5 * (ang / self.widths) ** 2)).sum(axis=-1)
        return np.minimum(h, self.max_height)

    @classmethod
    def random(cls, rng, count=6, max_height=0.03, width=(0.25, 0.45)):
        dirs = rng.normal(size=(count, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return cls(dirs, rng.uniform(*width, size=count),
                   rng.uniform(0.6, 1.0, size=count) * max_height, max_height)


HAIR_COLOR = np.array([0.25, 0.12, 0.05])


@dataclass(frozen=True)
class SyntheticSubject:
    template: TemplateMesh
    surface: TemplateMesh
    surface_height: np.ndarray
    bumps: Bumps
    radius: float
    input_views: CaptureSet
    heldout_views: CaptureSet


def surface_color(uv, height, max_height):
    """Template texture blended toward a dark hair color with bump height."""
    base = sphere_texture(uv[..., 0], uv[..., 1])
    t = np.clip(height / max_height, 0.0, 1.0)[..., None] if max_height > 0 else 0.0
    return (1 - t) * base + t * HAIR_COLOR


def ring_cameras(count, distance, focal, size, elevation=0.0, azimuth0=0.0, target=(0, 0, 0)):
    """Cameras evenly spaced in azimuth around the vertical axis, facing ``target``."""
    cams = []
    target = np.asarray(target, dtype=np.float64)
    for k in range(count):
        az = azimuth0 + 2 * np.pi * k / count
        eye = target + distance * np.array([np.cos(elevation) * np.sin(az), np.sin(elevation),
                                            np.cos(elevation) * np.cos(az)])
        cams.append(Camera.look_at(eye, target, [0, 1, 0], focal, focal, size, size))
    return cams


def arc_cameras(count, spread, distance, focal, size, elevation=0.0):
    """``count`` cameras ``spread`` radians apart, centered on azimuth 0."""
    cams = []
    for k in range(count):
        az = (k - (count - 1) / 2) * spread
        cams += ring_cameras(1, distance, focal, size, elevation, azimuth0=az)
    return cams


def raycast(camera, vertices, faces):
    """Exact nearest-hit ray casting of a triangle mesh through pixel centers.

    Returns ``(hit_face, barycentric, depth)``; ``hit_face`` is ``-1`` where the
    ray misses. Uses Moller-Trumbore intersection per triangle over the
    triangle's projected bounding box.
    """
    h, w = camera.height, camera.width
    origin = camera.center
    rows, cols = np.mgrid[0:h, 0:w]
    dirs_cam = np.stack([(cols + 0.5 - camera.cx) / camera.fx, (rows + 0.5 - camera.cy) / camera.fy,
                         np.ones((h, w))], axis=-1)
    dirs = dirs_cam @ camera.R  # camera -> world rotation is R^T
    best_t = np.full((h, w), np.inf)
    hit = -np.ones((h, w), np.int64)
    bary = np.zeros((h, w, 3))
    tri = vertices[faces]
    pc = tri @ camera.R.T + camera.t
    for f in range(len(faces)):
        z = pc[f, :, 2]
        if np.any(z <= 1e-6):
            continue
        px = camera.fx * pc[f, :, 0] / z + camera.cx
        py = camera.fy * pc[f, :, 1] / z + camera.cy
        c0 = max(int(np.floor(px.min())) - 1, 0)
        c1 = min(int(np.ceil(px.max())) + 1, w)
        r0 = max(int(np.floor(py.min())) - 1, 0)
        r1 = min(int(np.ceil(py.max())) + 1, h)
        if c0 >= c1 or r0 >= r1:
            continue
        d = dirs[r0:r1, c0:c1]
        a, b, c = tri[f]
        e1, e2 = b - a, c - a
        pvec = np.cross(d, e2)
        det = pvec @ e1
        ok = np.abs(det) > 1e-18
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin - a
        bu = (pvec @ tvec) * inv
        qvec = np.cross(tvec, e1)
        bv = (d @ qvec) * inv
        t = (qvec @ e2) * inv
        inside = ok & (bu >= 0) & (bv >= 0) & (bu + bv <= 1) & (t > 0)
        closer = inside & (t < best_t[r0:r1, c0:c1])
        if not closer.any():
            continue
        best_t[r0:r1, c0:c1][closer] = t[closer]
        hit[r0:r1, c0:c1][closer] = f
        bary[r0:r1, c0:c1][closer] = np.stack([1 - bu - bv, bu, bv], axis=-1)[closer]
    # ray parameter t is along dirs with unit camera z, so it equals the depth
    return hit, bary, best_t


def render_textured(camera, mesh, color_fn, vertex_attr=None):
    """Ray-cast a textured mesh; ``color_fn(uv, attr)`` gives per-hit RGB.

    Returns ``(image, mask)`` with a black background.
    """
    hit, bary, _ = raycast(camera, mesh.vertices, mesh.faces)
    fg = hit >= 0
    img = np.zeros((camera.height, camera.width, 3))
    uv = np.einsum("nk,nkc->nc", bary[fg], mesh.uv_faces[hit[fg]])
    attr = None
    if vertex_attr is not None:
        attr = np.einsum("nk,nk->n", bary[fg], vertex_attr[mesh.faces[hit[fg]]])
    img[fg] = color_fn(uv, attr)
    return img, fg.astype(np.float64)


def displaced_sphere(template, bumps, radius, center=(0.0, 0.0, 0.0)):
    """Push template vertices radially by the bump field; returns mesh and heights."""
    center = np.asarray(center, dtype=np.float64)
    rel = template.vertices - center
    dirs = rel / np.linalg.norm(rel, axis=1, keepdims=True)
    h = bumps.height(dirs)
    verts = center + dirs * (radius + h)[:, None]
    return TemplateMesh(verts, template.faces, template.uv_faces), h


def make_subject(seed=0, radius=0.1, image_size=96, focal=None, distance=0.6, n_inputs=3,
                 n_heldout=3, template_res=(24, 48), surface_res=(64, 128), max_height=0.03,
                 elevation=0.25, heldout_elevation=None, spread=None):
    """Deterministic synthetic subject with ``n_inputs`` input and held-out views.

    With ``spread=None`` the inputs form a full ring and held-out cameras sit
    halfway (in azimuth) between them. Otherwise the inputs cover a frontal
    arc, ``spread`` radians apart, and the held-out cameras are spaced the
    same way centered on the arc, so ``n_heldout = n_inputs - 1`` puts one
    midway between each neighboring pair. Held-out cameras use
    ``heldout_elevation`` (the input elevation when ``None``).
    """
    rng = np.random.default_rng(seed)
    template = uv_sphere(radius, *template_res)
    bumps = Bumps.random(rng, max_height=max_height)
    fine = uv_sphere(radius, *surface_res)
    surface, height = displaced_sphere(fine, bumps, radius)
    if focal is None:
        # frame the sphere plus the tallest bump and the outermost shell with a margin
        extent = radius + max_height + 0.02
        focal = 0.5 * image_size / np.tan(np.arcsin(min(extent / distance, 0.99))) * 0.9
    ho_elev = elevation if heldout_elevation is None else heldout_elevation
    if spread is None:
        inputs = ring_cameras(n_inputs, distance, focal, image_size, elevation=elevation)
        heldout = ring_cameras(n_heldout, distance, focal, image_size, elevation=ho_elev,
                               azimuth0=np.pi / n_inputs)
    else:
        inputs = arc_cameras(n_inputs, spread, distance, focal, image_size, elevation)
        heldout = arc_cameras(n_heldout, spread, distance, focal, image_size, ho_elev)

    def shade(uv, attr):
        return surface_color(uv, attr, max_height)

    def views(cams):
        out = []
        for cam in cams:
            img, mask = render_textured(cam, surface, shade, height)
            out.append(View(cam, img, mask))
        return CaptureSet(out)

    return SyntheticSubject(template, surface, height, bumps, radius, views(inputs), views(heldout))


def benchmark_subject(seed=0, image_size=96):
    """The end-to-end benchmark scene: three inputs 45 degrees apart on a
    frontal arc, two held-out views between them."""
    return make_subject(seed=seed, image_size=image_size, spread=np.pi / 4, n_heldout=2)
