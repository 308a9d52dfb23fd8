"""Calibrated cameras, projection, image sampling and UV appearance aggregation.

Cameras follow the OpenCV convention: ``x_cam = R @ x_world + t`` with
``+z`` looking forward and ``+y`` pointing down the image. Pixel ``(i, j)``
(row, column) covers ``[j, j + 1) x [i, i + 1)``, so its center sits at
``(j + 0.5, i + 0.5)``.
"""

import json
from dataclasses import dataclass

import numba
import numpy as np

from .errors import InvalidConfig, LevelMismatch

BEHIND_EPS = 1e-8
DEFAULT_OCCLUSION_BIAS = 0.005


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidConfig("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidConfig("image size must be at least 1x1")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise InvalidConfig("camera rotation must be orthonormal with det +1")

    @property
    def center(self):
        return -self.R.T @ self.t

    @property
    def image_size(self):
        return self.height, self.width

    def to_dict(self):
        return {"fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx),
                "cy": float(self.cy), "R": [float(x) for x in self.R.ravel()],
                "t": [float(x) for x in self.t], "width": int(self.width),
                "height": int(self.height)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
                   np.asarray(d["t"], dtype=np.float64), int(d["width"]), int(d["height"]))

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None):
        """Camera at ``eye`` looking toward ``target`` with image-up along ``up``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(fx, fy, width / 2 if cx is None else cx, height / 2 if cy is None else cy,
                   R, -R @ eye, width, height)


def load_cameras(path):
    """Read a JSON array of camera objects."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise InvalidConfig(f"{path}: camera file must hold a JSON array")
    return [Camera.from_dict(d) for d in data]


def save_cameras(path, cameras):
    with open(path, "w") as fh:
        json.dump([c.to_dict() for c in cameras], fh, indent=2)


@dataclass(frozen=True)
class View:
    camera: Camera
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        if self.image.shape[:2] != (h, w) or self.mask.shape[:2] != (h, w):
            raise InvalidConfig(f"view image/mask shape {self.image.shape[:2]}/{self.mask.shape[:2]} "
                                f"does not match camera {h}x{w}")


@dataclass(frozen=True)
class CaptureSet:
    views: tuple

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        if not self.views:
            raise InvalidConfig("a capture needs at least one view")

    def __len__(self):
        return len(self.views)

    @property
    def cameras(self):
        return [v.camera for v in self.views]


def project(camera, points):
    """Pinhole projection.

    Returns ``(pixels, depth, in_front)``; points with camera depth at most
    ``1e-8`` are flagged behind the camera and their pixels are ``nan``.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = p @ camera.R.T + camera.t
    z = pc[:, 2]
    in_front = z > BEHIND_EPS
    zs = np.where(in_front, z, np.nan)
    px = np.stack([camera.fx * pc[:, 0] / zs + camera.cx, camera.fy * pc[:, 1] / zs + camera.cy],
                  axis=1)
    return px, z, in_front


def bilinear_sample(image, coords):
    """Bilinear lookup at continuous pixel positions ``(x, y)``.

    Texel centers sit at integer + 0.5; positions past the border are clamped.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    xy = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    fx = np.clip(xy[:, 0] - 0.5, 0.0, w - 1)
    fy = np.clip(xy[:, 1] - 0.5, 0.0, h - 1)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (fx - x0)[:, None]
    ay = (fy - y0)[:, None]
    out = ((1 - ay) * ((1 - ax) * img[y0, x0] + ax * img[y0, x1])
           + ay * ((1 - ax) * img[y1, x0] + ax * img[y1, x1]))
    return out[:, 0] if squeeze else out


@numba.njit(cache=True)
def _zbuffer(pix, z, faces, height, width):
    depth = np.full((height, width), np.inf)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        if z[i0] <= BEHIND_EPS or z[i1] <= BEHIND_EPS or z[i2] <= BEHIND_EPS:
            continue
        x0, y0 = pix[i0, 0], pix[i0, 1]
        x1, y1 = pix[i1, 0], pix[i1, 1]
        x2, y2 = pix[i2, 0], pix[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        c_lo = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        c_hi = min(int(np.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        r_lo = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        r_hi = min(int(np.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        iz0, iz1, iz2 = 1.0 / z[i0], 1.0 / z[i1], 1.0 / z[i2]
        for r in range(r_lo, r_hi + 1):
            py = r + 0.5
            for c in range(c_lo, c_hi + 1):
                px = c + 0.5
                b0 = ((x1 - px) * (y2 - py) - (y1 - py) * (x2 - px)) / area
                b1 = ((x2 - px) * (y0 - py) - (y2 - py) * (x0 - px)) / area
                b2 = 1.0 - b0 - b1
                if b0 < 0.0 or b1 < 0.0 or b2 < 0.0:
                    continue
                # screen-space barycentrics interpolate inverse depth linearly
                d = 1.0 / (b0 * iz0 + b1 * iz1 + b2 * iz2)
                if d < depth[r, c]:
                    depth[r, c] = d
    return depth


def render_depth(camera, vertices, faces):
    """Z-buffer depth map of a mesh; background pixels hold ``inf``.

    Triangles with any vertex behind the camera are dropped.
    """
    pix, z, _ = project(camera, vertices)
    pix = np.nan_to_num(pix)
    return _zbuffer(np.ascontiguousarray(pix), z, np.ascontiguousarray(faces, dtype=np.int64),
                    int(camera.height), int(camera.width))


@dataclass(frozen=True)
class VisibilityWeights:
    """Normalized per-camera weights ``(C, H, W)`` for one scaffold level."""

    weights: np.ndarray
    level: int
    observed: np.ndarray
    uv_mask: np.ndarray

    @property
    def unobserved_count(self):
        return int((self.uv_mask & ~self.observed).sum())


def visibility_weights(scaffolds, geo, cameras, level, bias=DEFAULT_OCCLUSION_BIAS, depth_maps=None):
    """Cosine-foreshortening weights gated by a template depth test.

    Occlusion is always tested against the level-0 template. ``depth_maps``
    may be passed to reuse per-camera buffers across levels.
    """
    if not 0 <= level <= geo.level_count:
        raise InvalidConfig(f"level {level} outside [0, {geo.level_count}]")
    fg = geo.uv_mask
    p = geo.position_maps[level][fg]
    n = geo.normal_map[fg]
    raw = np.zeros((len(cameras), len(p)))
    for c, cam in enumerate(cameras):
        view_dir = p - cam.center
        view_dir /= np.linalg.norm(view_dir, axis=1, keepdims=True)
        score = np.maximum(0.0, -(n * view_dir).sum(axis=1))
        pix, z, in_front = project(cam, p)
        inside = in_front & (pix[:, 0] >= 0) & (pix[:, 0] < cam.width) \
            & (pix[:, 1] >= 0) & (pix[:, 1] < cam.height)
        depth = (depth_maps[c] if depth_maps is not None
                 else render_depth(cam, scaffolds.template_vertices, scaffolds.faces))
        visible = np.zeros(len(p), dtype=bool)
        cols = np.floor(pix[inside, 0]).astype(np.int64)
        rows = np.floor(pix[inside, 1]).astype(np.int64)
        visible[inside] = z[inside] <= depth[rows, cols] + bias
        raw[c] = np.where(visible, score, 0.0)
    total = raw.sum(axis=0)
    observed_fg = total > 0
    w = np.zeros_like(raw)
    w[:, observed_fg] = raw[:, observed_fg] / total[observed_fg]
    weights = np.zeros((len(cameras),) + fg.shape)
    weights[:, fg] = w
    observed = np.zeros(fg.shape, dtype=bool)
    observed[fg] = observed_fg
    return VisibilityWeights(weights, level, observed, fg.copy())


def aggregate_rgb_map(capture, geo, weights, level, fill_unobserved=True):
    """Visibility-weighted average of the input images at each texel.

    Masks are not applied here; they only gate the fitting loss. Texels seen
    by no camera take the nearest observed color in UV space.
    """
    from .gaussian_model import fill_unobserved as _fill

    if weights.level != level:
        raise LevelMismatch(f"weights computed for level {weights.level}, requested level {level}")
    if weights.weights.shape[0] != len(capture):
        raise InvalidConfig("weights and capture disagree on camera count")
    fg = geo.uv_mask
    p = geo.position_maps[level][fg]
    acc = np.zeros((len(p), 3))
    for c, view in enumerate(capture.views):
        w = weights.weights[c][fg]
        used = w > 0
        if not used.any():
            continue
        pix, _, _ = project(view.camera, p[used])
        acc[used] += w[used, None] * bilinear_sample(view.image[..., :3], pix)
    out = np.zeros(fg.shape + (3,))
    out[fg] = acc
    if fill_unobserved:
        out = _fill(out, weights.observed, fg)
    return out
