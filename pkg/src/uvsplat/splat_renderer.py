"""Tile-based Gaussian splatting with an analytic backward pass.

Forward: every Gaussian is projected to a 2D splat (EWA, first-order
perspective Jacobian plus a blur floor), splats are sorted globally by
camera depth, bucketed into 16x16 pixel tiles, and composited front to back
over a black background.

Backward: per tile, each pixel's front-to-back pass is replayed to recover
the contributing splats, then walked back to front to accumulate gradients.
Per-splat gradients are summed in a fixed order, so results do not depend
on the thread count.
"""

import hashlib
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import BehindCamera, StaleState
from .gaussian_model import (activate_scale_grad, normalize_quaternion, quat_to_rotation,
                             sigmoid)

__all__ = ["RenderSettings", "Splat2D", "RenderOutput", "CloudGradients", "project_gaussian",
           "render", "render_backward"]


@dataclass(frozen=True)
class RenderSettings:
    tile_size: int = 16
    blur: float = 0.3
    min_alpha: float = 1.0 / 255.0
    min_transmittance: float = 1e-4
    near: float = 1e-4


DEFAULT_SETTINGS = RenderSettings()


@dataclass(frozen=True)
class Splat2D:
    mean: np.ndarray
    cov: np.ndarray
    depth: float
    color: np.ndarray = None
    opacity: float = None
    index: int = -1


@dataclass
class CloudGradients:
    """Gradients per Gaussian.

    ``quats``, ``scales`` and ``opacities`` are taken with respect to the raw
    (pre-activation) parameters when the cloud carries them, otherwise with
    respect to the activated values (quaternions are always differentiated
    through normalization).
    """

    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray


@dataclass
class _ProjectedCloud:
    valid: np.ndarray
    t_cam: np.ndarray
    J: np.ndarray
    rot: np.ndarray
    cov3: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    tile_start: np.ndarray
    tile_gauss: np.ndarray
    tiles_x: int
    tiles_y: int


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    n_blended: np.ndarray
    state: _ProjectedCloud = field(default=None, repr=False)
    fingerprint: bytes = field(default=b"", repr=False)

    def tile_stats(self):
        """Per-tile list lengths and blend counts, JSON-serializable."""
        st = self.state
        lengths = np.diff(st.tile_start).reshape(st.tiles_y, st.tiles_x)
        return {"tile_size": int((self.color.shape[1] + st.tiles_x - 1) // st.tiles_x),
                "tiles_x": st.tiles_x, "tiles_y": st.tiles_y,
                "list_length": lengths.tolist(),
                "max_blended": int(self.n_blended.max()) if self.n_blended.size else 0,
                "mean_blended": float(self.n_blended.mean()) if self.n_blended.size else 0.0}


def project_gaussian(camera, mean, cov, blur=DEFAULT_SETTINGS.blur, near=DEFAULT_SETTINGS.near):
    """Project one 3D Gaussian to a 2D splat; raises :class:`BehindCamera`."""
    t = camera.R @ np.asarray(mean, dtype=np.float64) + camera.t
    if t[2] <= near:
        raise BehindCamera(f"camera-space depth {t[2]} is not beyond the near plane {near}")
    J = _jacobian(camera, t[None])[0]
    T = J @ camera.R
    cov2 = T @ np.asarray(cov, dtype=np.float64) @ T.T + blur * np.eye(2)
    mean2 = np.array([camera.fx * t[0] / t[2] + camera.cx, camera.fy * t[1] / t[2] + camera.cy])
    return Splat2D(mean2, cov2, float(t[2]))


def _jacobian(camera, t):
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    J = np.zeros((len(t), 2, 3))
    J[:, 0, 0] = camera.fx / tz
    J[:, 0, 2] = -camera.fx * tx / tz ** 2
    J[:, 1, 1] = camera.fy / tz
    J[:, 1, 2] = -camera.fy * ty / tz ** 2
    return J


def _fingerprint(cloud, camera):
    h = hashlib.blake2b(digest_size=16)
    for arr in (cloud.means, cloud.quats, cloud.scales, cloud.opacities, cloud.colors,
                cloud.quats_raw, cloud.scales_raw, cloud.opacities_raw):
        if arr is None:
            continue
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    h.update(repr(sorted(camera.to_dict().items())).encode())
    return h.digest()


def _project_cloud(cloud, camera, settings):
    n = len(cloud)
    W = camera.R
    t = cloud.means @ W.T + camera.t
    valid = t[:, 2] > settings.near
    tz = np.where(valid, t[:, 2], 1.0)
    t_safe = np.column_stack([t[:, :2], tz])
    J = _jacobian(camera, t_safe)
    rot = quat_to_rotation(cloud.quats) if n else np.zeros((0, 3, 3))
    M = rot * cloud.scales[:, None, :]
    cov3 = M @ np.swapaxes(M, 1, 2)
    T = J @ W
    cov2 = T @ cov3 @ np.swapaxes(T, 1, 2)
    a = cov2[:, 0, 0] + settings.blur
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + settings.blur
    det = a * c - b * b
    conic = np.column_stack([c / det, -b / det, a / det])
    mean2d = np.column_stack([camera.fx * t_safe[:, 0] / tz + camera.cx,
                              camera.fy * t_safe[:, 1] / tz + camera.cy])
    opac = cloud.opacities
    valid &= opac >= settings.min_alpha
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    # beyond this radius the splat's alpha is below the cutoff everywhere
    ratio = np.where(valid, opac / settings.min_alpha, 1.0)
    radius = np.sqrt(2.0 * np.log(np.maximum(ratio, 1.0)) * lam) * (1 + 1e-6) + 1e-9

    ts = settings.tile_size
    width, height = camera.width, camera.height
    tiles_x = (width + ts - 1) // ts
    tiles_y = (height + ts - 1) // ts
    with np.errstate(invalid="ignore"):
        c_lo = np.maximum(np.ceil(mean2d[:, 0] - radius - 0.5), 0)
        c_hi = np.minimum(np.floor(mean2d[:, 0] + radius - 0.5), width - 1)
        r_lo = np.maximum(np.ceil(mean2d[:, 1] - radius - 0.5), 0)
        r_hi = np.minimum(np.floor(mean2d[:, 1] + radius - 0.5), height - 1)
    valid &= (c_lo <= c_hi) & (r_lo <= r_hi) & np.isfinite(mean2d).all(axis=1)
    idx = np.flatnonzero(valid)
    order = idx[np.lexsort((idx, t[idx, 2]))]
    tx0 = (c_lo[order] // ts).astype(np.int64)
    tx1 = (c_hi[order] // ts).astype(np.int64)
    ty0 = (r_lo[order] // ts).astype(np.int64)
    ty1 = (r_hi[order] // ts).astype(np.int64)
    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    total = int(counts.sum())
    first = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - first
    nx_rep = np.repeat(nx, counts)
    tile_id = (np.repeat(ty0, counts) + local // nx_rep) * tiles_x + np.repeat(tx0, counts) + local % nx_rep
    perm = np.argsort(tile_id, kind="stable")
    tile_gauss = np.repeat(order, counts)[perm]
    tile_start = np.zeros(tiles_x * tiles_y + 1, np.int64)
    np.cumsum(np.bincount(tile_id, minlength=tiles_x * tiles_y), out=tile_start[1:])
    return _ProjectedCloud(valid, t, J, rot, cov3, mean2d, conic, t[:, 2], tile_start,
                           tile_gauss, tiles_x, tiles_y)


@numba.njit(parallel=True, cache=True)
def _forward_tiles(mean2d, conic, opac, color, tile_start, tile_gauss, height, width, ts,
                   tiles_x, min_alpha, min_t):
    n_tiles = tile_start.shape[0] - 1
    img = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    n_blend = np.zeros((height, width), np.int64)
    for tile in numba.prange(n_tiles):
        ty = tile // tiles_x
        tx = tile % tiles_x
        s0 = tile_start[tile]
        s1 = tile_start[tile + 1]
        for r in range(ty * ts, min((ty + 1) * ts, height)):
            py = r + 0.5
            for c in range(tx * ts, min((tx + 1) * ts, width)):
                px = c + 0.5
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                nb = 0
                for k in range(s0, s1):
                    g = tile_gauss[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                        - conic[g, 1] * dx * dy
                    a = opac[g] * np.exp(power)
                    if a < min_alpha:
                        continue
                    w = a * T
                    cr += color[g, 0] * w
                    cg += color[g, 1] * w
                    cb += color[g, 2] * w
                    T *= 1.0 - a
                    nb += 1
                    if T < min_t:
                        break
                img[r, c, 0] = cr
                img[r, c, 1] = cg
                img[r, c, 2] = cb
                trans[r, c] = T
                n_blend[r, c] = nb
    return img, trans, n_blend


@numba.njit(parallel=True, cache=True)
def _backward_tiles(mean2d, conic, opac, color, tile_start, tile_gauss, height, width, ts,
                    tiles_x, min_alpha, min_t, d_img, d_alpha):
    n_tiles = tile_start.shape[0] - 1
    slot = np.zeros((tile_gauss.shape[0], 9))
    for tile in numba.prange(n_tiles):
        ty = tile // tiles_x
        tx = tile % tiles_x
        s0 = tile_start[tile]
        s1 = tile_start[tile + 1]
        if s1 == s0:
            continue
        ks = np.empty(s1 - s0, np.int64)
        alphas = np.empty(s1 - s0)
        tbefore = np.empty(s1 - s0)
        for r in range(ty * ts, min((ty + 1) * ts, height)):
            py = r + 0.5
            for c in range(tx * ts, min((tx + 1) * ts, width)):
                px = c + 0.5
                gr = d_img[r, c, 0]
                gg = d_img[r, c, 1]
                gb = d_img[r, c, 2]
                ga = d_alpha[r, c]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and ga == 0.0:
                    continue
                T = 1.0
                m = 0
                for k in range(s0, s1):
                    g = tile_gauss[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                        - conic[g, 1] * dx * dy
                    a = opac[g] * np.exp(power)
                    if a < min_alpha:
                        continue
                    ks[m] = k
                    alphas[m] = a
                    tbefore[m] = T
                    m += 1
                    T *= 1.0 - a
                    if T < min_t:
                        break
                # colour and coverage of everything behind the current splat
                br = 0.0
                bg = 0.0
                bb = 0.0
                ba = 0.0
                for j in range(m - 1, -1, -1):
                    k = ks[j]
                    g = tile_gauss[k]
                    a = alphas[j]
                    Tj = tbefore[j]
                    d_a = Tj * (gr * (color[g, 0] - br) + gg * (color[g, 1] - bg)
                                + gb * (color[g, 2] - bb) + ga * (1.0 - ba))
                    w = a * Tj
                    slot[k, 6] += gr * w
                    slot[k, 7] += gg * w
                    slot[k, 8] += gb * w
                    br = color[g, 0] * a + (1.0 - a) * br
                    bg = color[g, 1] * a + (1.0 - a) * bg
                    bb = color[g, 2] * a + (1.0 - a) * bb
                    ba = a + (1.0 - a) * ba
                    gauss = a / opac[g]
                    slot[k, 5] += d_a * gauss
                    d_pow = d_a * a
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    slot[k, 0] += d_pow * (conic[g, 0] * dx + conic[g, 1] * dy)
                    slot[k, 1] += d_pow * (conic[g, 1] * dx + conic[g, 2] * dy)
                    slot[k, 2] += -0.5 * dx * dx * d_pow
                    slot[k, 3] += -dx * dy * d_pow
                    slot[k, 4] += -0.5 * dy * dy * d_pow
    return slot


def render(cloud, camera, settings=DEFAULT_SETTINGS):
    """Render ``cloud`` from ``camera`` into color ``(H, W, 3)`` and alpha ``(H, W, 1)``."""
    st = _project_cloud(cloud, camera, settings)
    img, trans, n_blend = _forward_tiles(
        st.mean2d, st.conic, np.ascontiguousarray(cloud.opacities, dtype=np.float64),
        np.ascontiguousarray(cloud.colors, dtype=np.float64), st.tile_start, st.tile_gauss,
        camera.height, camera.width, settings.tile_size, st.tiles_x, settings.min_alpha,
        settings.min_transmittance)
    return RenderOutput(img, (1.0 - trans)[..., None], n_blend, st, _fingerprint(cloud, camera))


def render_backward(cloud, camera, d_color, d_alpha=None, forward=None, settings=DEFAULT_SETTINGS):
    """Gradients of a scalar loss given its gradients wrt the rendered images.

    ``forward`` is the :class:`RenderOutput` of the matching forward pass; it
    is recomputed when omitted. Raises :class:`StaleState` if the cloud or
    camera changed after ``forward`` was produced.
    """
    if forward is None:
        forward = render(cloud, camera, settings)
    elif forward.fingerprint != _fingerprint(cloud, camera):
        raise StaleState("cloud or camera changed since the paired forward pass")
    st = forward.state
    n = len(cloud)
    d_color = np.ascontiguousarray(d_color, dtype=np.float64).reshape(camera.height, camera.width, 3)
    if d_alpha is None:
        d_alpha = np.zeros((camera.height, camera.width))
    d_alpha = np.ascontiguousarray(d_alpha, dtype=np.float64).reshape(camera.height, camera.width)
    slot = _backward_tiles(st.mean2d, st.conic, np.ascontiguousarray(cloud.opacities, dtype=np.float64),
                           np.ascontiguousarray(cloud.colors, dtype=np.float64), st.tile_start,
                           st.tile_gauss, camera.height, camera.width, settings.tile_size,
                           st.tiles_x, settings.min_alpha, settings.min_transmittance,
                           d_color, d_alpha)
    g = np.column_stack([np.bincount(st.tile_gauss, weights=slot[:, k], minlength=n)
                         for k in range(9)]) if n else np.zeros((0, 9))
    return _backward_projection(cloud, camera, st, g)


def _backward_projection(cloud, camera, st, g):
    n = len(cloud)
    g_mean2d = g[:, 0:2]
    ga, gb, gc = g[:, 2], g[:, 3], g[:, 4]
    g_opac = g[:, 5]
    g_color = g[:, 6:9].copy()

    # conic = inverse(cov2): dL/dcov2 = -Q G Q with G the symmetric-entry gradient
    c00, c01, c11 = st.conic[:, 0], st.conic[:, 1], st.conic[:, 2]
    Q = np.stack([np.stack([c00, c01], -1), np.stack([c01, c11], -1)], -2)
    Gq = np.stack([np.stack([ga, 0.5 * gb], -1), np.stack([0.5 * gb, gc], -1)], -2)
    G2 = -Q @ Gq @ Q

    W = camera.R
    T = st.J @ W
    g_cov3 = np.swapaxes(T, 1, 2) @ G2 @ T
    g_T = 2.0 * G2 @ T @ st.cov3
    g_J = g_T @ W.T

    M = st.rot * cloud.scales[:, None, :]
    g_M = 2.0 * g_cov3 @ M
    g_scale = (g_M * st.rot).sum(axis=1)
    g_R = g_M * cloud.scales[:, None, :]
    g_quat = _rotation_grad_to_quat(cloud, g_R)

    tx, ty, tz = st.t_cam[:, 0], st.t_cam[:, 1], np.where(st.valid, st.t_cam[:, 2], 1.0)
    fx, fy = camera.fx, camera.fy
    g_t = np.einsum("nij,ni->nj", st.J, g_mean2d)
    g_t[:, 0] += g_J[:, 0, 2] * (-fx / tz ** 2)
    g_t[:, 1] += g_J[:, 1, 2] * (-fy / tz ** 2)
    g_t[:, 2] += (g_J[:, 0, 0] * (-fx / tz ** 2) + g_J[:, 0, 2] * (2 * fx * tx / tz ** 3)
                  + g_J[:, 1, 1] * (-fy / tz ** 2) + g_J[:, 1, 2] * (2 * fy * ty / tz ** 3))
    g_means = g_t @ W

    invalid = ~st.valid
    for arr in (g_means, g_quat, g_scale, g_opac, g_color):
        arr[invalid] = 0.0

    if cloud.scales_raw is not None:
        if np.isinf(cloud.max_scale):
            g_scale = g_scale * sigmoid(cloud.scales_raw)
        else:
            g_scale = g_scale * activate_scale_grad(cloud.scales_raw, cloud.max_scale)
    if cloud.opacities_raw is not None:
        g_opac = g_opac * cloud.opacities * (1.0 - cloud.opacities)
    if n == 0:
        g_quat = np.zeros((0, 4))
    return CloudGradients(g_means, g_quat, g_scale, g_opac, g_color)


def _rotation_grad_to_quat(cloud, g_R):
    q_raw = cloud.quats_raw if cloud.quats_raw is not None else cloud.quats
    if len(q_raw) == 0:
        return np.zeros((0, 4))
    q = normalize_quaternion(q_raw)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    G = g_R.reshape(-1, 9)
    g0, g1, g2, g3, g4, g5, g6, g7, g8 = G.T
    gw = 2 * (-z * g1 + y * g2 + z * g3 - x * g5 - y * g6 + x * g7)
    gx = 2 * (y * g1 + z * g2 + y * g3 - 2 * x * g4 - w * g5 + z * g6 + w * g7 - 2 * x * g8)
    gy = 2 * (-2 * y * g0 + x * g1 + w * g2 + x * g3 + z * g5 - w * g6 + z * g7 - 2 * y * g8)
    gz = 2 * (-2 * z * g0 - w * g1 + x * g2 + w * g3 - 2 * z * g4 + y * g5 + x * g6 + y * g7)
    g_unit = np.column_stack([gw, gx, gy, gz])
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    return (g_unit - q * (q * g_unit).sum(axis=1, keepdims=True)) / norm
