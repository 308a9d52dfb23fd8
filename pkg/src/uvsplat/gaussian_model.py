"""UV parameter maps, activations and Gaussian cloud assembly.

Raw (pre-activation) maps are what the optimizer updates:

* rotation: raw quaternion ``(w, x, y, z)``, normalized on use
* scale: ``min(softplus(raw), d)``, so no Gaussian outgrows the shell spacing
* opacity: ``sigmoid(raw)``

Positions and colors are fixed inputs and never touched by fitting.
"""

from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .errors import DegenerateQuaternion, IncompleteMaps, InvalidConfig

INIT_OPACITY = 0.9
UNOBSERVED_OPACITY = 0.1
FALLBACK_COLOR = 0.5


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    # log(expm1(y)) written to stay finite for large y
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def activate_scale(raw, d):
    """Softplus followed by a hard clamp at the scaffold spacing ``d``."""
    if not d > 0:
        raise InvalidConfig(f"scale bound d must be positive, got {d}")
    return np.minimum(softplus(raw), d)


def activate_scale_grad(raw, d):
    """Derivative of :func:`activate_scale`; zero where the clamp is active."""
    return np.where(softplus(raw) < d, sigmoid(raw), 0.0)


def activate_opacity(raw):
    return sigmoid(raw)


def normalize_quaternion(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise DegenerateQuaternion("quaternion norm must exceed 1e-12")
    return q / n


def quat_to_rotation(q):
    """Rotation matrices for quaternions ``(w, x, y, z)``; accepts ``(..., 4)``."""
    w, x, y, z = np.moveaxis(normalize_quaternion(q), -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(R.shape[:-1] + (3, 3))


def covariance(q, s):
    """``R diag(s)^2 R^T`` for quaternions ``q`` and scales ``s``."""
    M = quat_to_rotation(q) * np.asarray(s, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class GaussianCloud:
    """Flat Gaussian parameters ready for rasterization.

    ``quats``, ``scales`` and ``opacities`` are activated values. When the
    cloud was assembled from maps, the ``*_raw`` arrays hold the values they
    came from and ``max_scale`` the clamp bound, so gradients can be carried
    through the activations. ``source`` is ``(level, row, col)`` per Gaussian.
    """

    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    source: np.ndarray = None
    quats_raw: np.ndarray = field(default=None, repr=False)
    scales_raw: np.ndarray = field(default=None, repr=False)
    opacities_raw: np.ndarray = field(default=None, repr=False)
    max_scale: float = np.inf

    def __len__(self):
        return len(self.means)

    @classmethod
    def from_raw(cls, means, quats_raw, scales_raw, opacities_raw, colors, max_scale=np.inf,
                 source=None):
        quats_raw = np.asarray(quats_raw, dtype=np.float64).reshape(-1, 4)
        scales_raw = np.asarray(scales_raw, dtype=np.float64).reshape(-1, 3)
        opacities_raw = np.asarray(opacities_raw, dtype=np.float64).reshape(-1)
        scales = softplus(scales_raw) if np.isinf(max_scale) else activate_scale(scales_raw, max_scale)
        return cls(np.asarray(means, dtype=np.float64).reshape(-1, 3),
                   normalize_quaternion(quats_raw) if len(quats_raw) else quats_raw,
                   scales, activate_opacity(opacities_raw),
                   np.asarray(colors, dtype=np.float64).reshape(-1, 3),
                   source, quats_raw, scales_raw, opacities_raw, float(max_scale))

    @classmethod
    def empty(cls):
        z = np.zeros
        return cls(z((0, 3)), z((0, 4)), z((0, 3)), z(0), z((0, 3)), z((0, 3), np.int64))

    def covariances(self):
        return covariance(self.quats, self.scales)


@dataclass
class ParamMapSet:
    """Per-level UV parameter maps, stacked along a leading level axis.

    Shapes: ``positions (L, H, W, 3)``, ``colors (L, H, W, 3)``,
    ``quats_raw (L, H, W, 4)``, ``scales_raw (L, H, W, 3)``,
    ``opacities_raw (L, H, W, 1)`` with ``L = S + 1``. All maps are float32
    so that containers store them losslessly.
    """

    positions: np.ndarray
    colors: np.ndarray
    quats_raw: np.ndarray
    scales_raw: np.ndarray
    opacities_raw: np.ndarray
    uv_mask: np.ndarray
    offset_step: float
    color_residual: np.ndarray = None

    LEARNABLE = ("quats_raw", "scales_raw", "opacities_raw")

    @property
    def level_count(self):
        return self.positions.shape[0] - 1

    @property
    def resolution(self):
        return self.uv_mask.shape

    def learnable(self):
        names = self.LEARNABLE + (("color_residual",) if self.color_residual is not None else ())
        return {k: getattr(self, k) for k in names}

    def copy(self):
        arrays = ("positions", "colors", "quats_raw", "scales_raw", "opacities_raw", "uv_mask",
                  "color_residual")
        return replace(self, **{k: None if getattr(self, k) is None else np.array(getattr(self, k))
                                for k in arrays})

    def effective_colors(self):
        if self.color_residual is None:
            return self.colors
        return self.colors + self.color_residual

    def check_complete(self):
        levels = self.positions.shape[0]
        h, w = self.uv_mask.shape
        expected = {"positions": 3, "colors": 3, "quats_raw": 4, "scales_raw": 3, "opacities_raw": 1}
        for name, ch in expected.items():
            arr = getattr(self, name)
            if arr is None or arr.shape != (levels, h, w, ch):
                got = None if arr is None else arr.shape
                raise IncompleteMaps(f"{name} has shape {got}, expected {(levels, h, w, ch)}")


def init_param_maps(geo, colors, observed, d=None):
    """Initial raw maps for fitting.

    Identity rotation, scale ``d / 4`` and opacity 0.9 on observed texels;
    texels no camera saw start at opacity 0.1.
    """
    d = geo.offset_step if d is None else d
    levels = geo.position_maps.shape[0]
    h, w = geo.uv_mask.shape
    colors = np.asarray(colors)
    observed = np.asarray(observed, dtype=bool)
    if colors.shape != (levels, h, w, 3) or observed.shape != (levels, h, w):
        raise IncompleteMaps("need one color map and observation mask per scaffold level")
    fg = geo.uv_mask
    quats = np.zeros((levels, h, w, 4), np.float32)
    quats[..., 0] = 1.0
    scales = np.zeros((levels, h, w, 3), np.float32)
    scales[:, fg] = np.float32(softplus_inv(d / 4.0))
    opac = np.zeros((levels, h, w, 1), np.float32)
    opac[..., 0] = np.where(observed, logit(INIT_OPACITY), logit(UNOBSERVED_OPACITY))
    opac[:, ~fg] = 0.0
    return ParamMapSet(geo.position_maps.astype(np.float32), colors.astype(np.float32),
                       quats, scales, opac, fg.copy(), float(d))


def assemble_cloud(maps):
    """One Gaussian per (level, foreground texel), level-major then row-major."""
    maps.check_complete()
    fg = maps.uv_mask
    rows, cols = np.nonzero(fg)
    levels = maps.positions.shape[0]
    n_fg = len(rows)
    source = np.empty((levels * n_fg, 3), np.int64)
    source[:, 0] = np.repeat(np.arange(levels), n_fg)
    source[:, 1] = np.tile(rows, levels)
    source[:, 2] = np.tile(cols, levels)

    def gather(arr):
        return arr[:, rows, cols].reshape(levels * n_fg, -1).astype(np.float64)

    if n_fg == 0:
        cloud = GaussianCloud.empty()
        cloud.max_scale = maps.offset_step
        return cloud
    return GaussianCloud.from_raw(gather(maps.positions), gather(maps.quats_raw),
                                  gather(maps.scales_raw), gather(maps.opacities_raw)[:, 0],
                                  gather(maps.effective_colors()), maps.offset_step, source)


def scatter_to_maps(values, source, shape):
    """Inverse of the gather in :func:`assemble_cloud` for per-Gaussian values.

    Every Gaussian owns a distinct texel, so this is a plain assignment.
    """
    values = np.asarray(values)
    out = np.zeros(tuple(shape[:3]) + values.shape[1:], values.dtype)
    out[source[:, 0], source[:, 1], source[:, 2]] = values
    return out


@numba.njit(cache=True)
def _bfs_fill(colors, observed, uv_mask):
    h, w = observed.shape
    out = colors.copy()
    owner = -np.ones((h, w), np.int64)
    queue = np.empty(h * w, np.int64)
    head = 0
    tail = 0
    for r in range(h):
        for c in range(w):
            if observed[r, c]:
                owner[r, c] = r * w + c
                queue[tail] = r * w + c
                tail += 1
    dr = (-1, 0, 0, 1)
    dc = (0, -1, 1, 0)
    while head < tail:
        cur = queue[head]
        head += 1
        r, c = cur // w, cur % w
        for k in range(4):
            rr = r + dr[k]
            cc = c + dc[k]
            if rr < 0 or rr >= h or cc < 0 or cc >= w or owner[rr, cc] >= 0:
                continue
            owner[rr, cc] = owner[r, c]
            queue[tail] = rr * w + cc
            tail += 1
    for r in range(h):
        for c in range(w):
            if uv_mask[r, c] and not observed[r, c]:
                src = owner[r, c]
                for k in range(colors.shape[2]):
                    out[r, c, k] = colors[src // w, src % w, k]
    return out


def fill_unobserved(colors, observed, uv_mask):
    """Give unobserved foreground texels the color of the nearest observed texel.

    Nearest is in breadth-first (4-neighbour) distance over the full UV grid;
    sources are seeded in row-major order, which settles ties. Without any
    observed texel the whole foreground becomes mid-gray.
    """
    colors = np.asarray(colors, dtype=np.float64)
    observed = np.asarray(observed, dtype=bool) & uv_mask
    if not observed.any():
        out = colors.copy()
        out[uv_mask] = FALLBACK_COLOR
        return out
    return _bfs_fill(colors, observed, np.asarray(uv_mask, dtype=bool))

