"""Template meshes, scaffold shells, and UV-space geometry maps.

UV convention used throughout the package: a map of size ``H x W`` stores
texel ``(row, col)`` at UV ``((col + 0.5) / W, 1 - (row + 0.5) / H)``, i.e.
``v = 1`` is the top row, matching image orientation of OBJ textures. In
continuous pixel coordinates a UV point lands at ``(u * W, (1 - v) * H)``.
"""

from dataclasses import dataclass, field

import numba
import numpy as np

from .bvh import TriangleBVH
from .errors import EmptyScan, InvalidConfig, InvalidMesh, OverlappingCharts, ZeroNormal

__all__ = [
    "TemplateMesh",
    "TexturedMesh",
    "ScaffoldSet",
    "UvGeometryMaps",
    "load_obj",
    "save_obj",
    "compute_vertex_normals",
    "build_scaffolds",
    "rasterize_uv_geometry",
    "transfer_texture_nearest",
    "uv_to_pixel",
]


@dataclass(frozen=True)
class TemplateMesh:
    """Triangle mesh with per-corner UVs.

    ``uv_faces`` has shape ``(F, 3, 2)``: the UV coordinate of every face
    corner, so seams need no vertex duplication in 3D.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv_faces: np.ndarray
    vertex_normals: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        uv = np.ascontiguousarray(self.uv_faces, dtype=np.float64)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "uv_faces", uv)
        _validate_mesh(v, f, uv)
        if self.vertex_normals is None:
            object.__setattr__(self, "vertex_normals", compute_vertex_normals(self))
        else:
            object.__setattr__(self, "vertex_normals",
                               np.ascontiguousarray(self.vertex_normals, dtype=np.float64))

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def face_normals(self):
        """Unnormalized face normals; their length is twice the face area."""
        tri = self.vertices[self.faces]
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])


@dataclass(frozen=True)
class TexturedMesh:
    """A mesh together with an RGB texture image addressed by its UVs."""

    mesh: TemplateMesh
    texture: np.ndarray


def _validate_mesh(v, f, uv):
    if v.ndim != 2 or v.shape[1] != 3:
        raise InvalidMesh(f"vertices must be (V, 3), got {v.shape}")
    if f.ndim != 2 or f.shape[1] != 3 or len(f) == 0:
        raise InvalidMesh("mesh needs at least one triangular face")
    if uv.shape != (len(f), 3, 2):
        raise InvalidMesh(f"uv_faces must be (F, 3, 2), got {uv.shape}")
    if f.min() < 0 or f.max() >= len(v):
        raise InvalidMesh("face index out of range")
    if uv.min() < 0.0 or uv.max() > 1.0:
        raise InvalidMesh("UV coordinates must lie in [0, 1]^2")
    tri = v[f]
    area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    bad = np.flatnonzero(area2 <= 1e-20)
    if len(bad):
        raise InvalidMesh(f"{len(bad)} degenerate faces, first is {bad[0]}")


def load_obj(path):
    """Read ``v``, ``vt`` and ``f v/vt`` records from a Wavefront OBJ file.

    Polygons are fan-triangulated; ``vn`` records and normal indices are ignored
    because normals are always recomputed.
    """
    verts, tex, faces, uv_faces = [], [], [], []
    with open(path) as fh:
        lines = list(enumerate(fh, 1))
    try:
        for lineno, line in lines:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                tex.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                corners = []
                for token in parts[1:]:
                    fields = token.split("/")
                    if len(fields) < 2 or not fields[1]:
                        raise InvalidMesh(f"{path}:{lineno}: face corner '{token}' lacks a vt index")
                    vi, ti = int(fields[0]), int(fields[1])
                    vi = vi - 1 if vi > 0 else len(verts) + vi
                    ti = ti - 1 if ti > 0 else len(tex) + ti
                    corners.append((vi, ti))
                for k in range(1, len(corners) - 1):
                    tri = (corners[0], corners[k], corners[k + 1])
                    faces.append([c[0] for c in tri])
                    uv_faces.append([c[1] for c in tri])
    except InvalidMesh:
        raise
    except (ValueError, IndexError) as exc:
        raise InvalidMesh(f"{path}:{lineno}: cannot parse '{line.strip()}' ({exc})") from None
    if not faces:
        raise InvalidMesh(f"{path}: no faces")
    tex = np.asarray(tex, dtype=np.float64).reshape(-1, 2)
    uv_idx = np.asarray(uv_faces, dtype=np.int64)
    if uv_idx.max() >= len(tex) or uv_idx.min() < 0:
        raise InvalidMesh(f"{path}: vt index out of range")
    return TemplateMesh(np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64),
                        tex[uv_idx])


def save_obj(path, mesh):
    """Write a mesh as OBJ with one ``vt`` record per face corner."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*map(float, v)))
        for uv in mesh.uv_faces.reshape(-1, 2):
            fh.write("vt {!r} {!r}\n".format(*map(float, uv)))
        for i, f in enumerate(mesh.faces):
            t = 3 * i + 1
            fh.write(f"f {f[0] + 1}/{t} {f[1] + 1}/{t + 1} {f[2] + 1}/{t + 2}\n")


def compute_vertex_normals(mesh):
    """Area-weighted vertex normals.

    The cross product of two triangle edges already has length twice the
    triangle area, so summing raw cross products gives the area weighting.
    """
    vertices = np.asarray(mesh.vertices, dtype=np.float64)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, faces[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    bad = np.flatnonzero(norm < 1e-12)
    if len(bad):
        raise ZeroNormal(f"vertex {bad[0]} has a vanishing area-weighted normal")
    return acc / norm[:, None]


@dataclass(frozen=True)
class ScaffoldSet:
    """Template vertices and ``S`` shells dilated along vertex normals.

    ``levels`` has shape ``(S + 1, V, 3)``; level 0 is the template itself.
    """

    levels: np.ndarray
    faces: np.ndarray
    uv_faces: np.ndarray
    normals: np.ndarray
    offset_step: float
    level_count: int

    @property
    def template_vertices(self):
        return self.levels[0]


def build_scaffolds(mesh, d, S):
    """Dilate ``mesh`` into ``S`` outer shells spaced ``d`` apart."""
    if not d > 0:
        raise InvalidConfig(f"scaffold spacing d must be positive, got {d}")
    if int(S) != S or S < 0:
        raise InvalidConfig(f"scaffold count S must be a non-negative integer, got {S}")
    S = int(S)
    v0 = mesh.vertices
    n = mesh.vertex_normals
    steps = np.arange(S + 1, dtype=np.float64)[:, None, None] * float(d)
    levels = v0[None] + steps * n[None]
    levels[0] = v0
    return ScaffoldSet(levels, mesh.faces, mesh.uv_faces, n, float(d), S)


@dataclass(frozen=True)
class UvGeometryMaps:
    """Per-level position maps, inter-level offset maps and texel metadata.

    ``face_index`` holds the owning triangle of each foreground texel (``-1``
    in background) and ``barycentric`` its interpolation weights.
    """

    position_maps: np.ndarray
    offset_maps: np.ndarray
    normal_map: np.ndarray
    uv_mask: np.ndarray
    face_index: np.ndarray
    barycentric: np.ndarray
    offset_step: float

    @property
    def level_count(self):
        return self.position_maps.shape[0] - 1

    @property
    def resolution(self):
        return self.uv_mask.shape

    @property
    def foreground_count(self):
        return int(self.uv_mask.sum())


def uv_to_pixel(uv, height, width):
    """Map UV coordinates to continuous pixel coordinates ``(x, y)``."""
    uv = np.asarray(uv, dtype=np.float64)
    return np.stack([uv[..., 0] * width, (1.0 - uv[..., 1]) * height], axis=-1)


@numba.njit(cache=True)
def _edge(ax, ay, bx, by, px, py):
    # evaluate with the endpoints in a fixed order so the two triangles sharing
    # an edge get exactly opposite values and never both claim a texel
    if bx < ax or (bx == ax and by < ay):
        return -((ax - bx) * (py - by) - (ay - by) * (px - bx))
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@numba.njit(cache=True)
def _is_top_left(ax, ay, bx, by):
    # interior lies along the edge-function gradient (-(by - ay), bx - ax)
    dy = by - ay
    dx = bx - ax
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)


@numba.njit(cache=True)
def _rasterize_uv(pix, height, width):
    owner = -np.ones((height, width), np.int64)
    bary = np.zeros((height, width, 3))
    conflict = np.array([-1, -1, -1, -1], np.int64)
    for f in range(pix.shape[0]):
        x0, y0 = pix[f, 0, 0], pix[f, 0, 1]
        x1, y1 = pix[f, 1, 0], pix[f, 1, 1]
        x2, y2 = pix[f, 2, 0], pix[f, 2, 1]
        area = _edge(x0, y0, x1, y1, x2, y2)
        if area == 0.0:
            continue
        if area < 0.0:
            x1, y1, x2, y2 = x2, y2, x1, y1
            area = -area
            swapped = True
        else:
            swapped = False
        c_lo = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        c_hi = min(int(np.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        r_lo = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        r_hi = min(int(np.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        tl0 = _is_top_left(x1, y1, x2, y2)
        tl1 = _is_top_left(x2, y2, x0, y0)
        tl2 = _is_top_left(x0, y0, x1, y1)
        for r in range(r_lo, r_hi + 1):
            py = r + 0.5
            for c in range(c_lo, c_hi + 1):
                px = c + 0.5
                w0 = _edge(x1, y1, x2, y2, px, py)
                w1 = _edge(x2, y2, x0, y0, px, py)
                w2 = _edge(x0, y0, x1, y1, px, py)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not tl0) or (w1 == 0.0 and not tl1) or (w2 == 0.0 and not tl2):
                    continue
                if owner[r, c] >= 0:
                    conflict[0] = r
                    conflict[1] = c
                    conflict[2] = owner[r, c]
                    conflict[3] = f
                    return owner, bary, conflict
                owner[r, c] = f
                b0 = w0 / area
                b1 = w1 / area
                b2 = w2 / area
                if swapped:
                    b1, b2 = b2, b1
                bary[r, c, 0] = b0
                bary[r, c, 1] = b1
                bary[r, c, 2] = b2
    return owner, bary, conflict


def _rasterize_charts(uv_faces, height, width):
    if height < 1 or width < 1:
        raise InvalidConfig(f"UV resolution must be positive, got {height}x{width}")
    pix = np.ascontiguousarray(uv_to_pixel(uv_faces, height, width))
    owner, bary, conflict = _rasterize_uv(pix, int(height), int(width))
    if conflict[0] >= 0:
        r, c, f_a, f_b = (int(x) for x in conflict)
        raise OverlappingCharts(f"texel ({r}, {c}) is covered by UV triangles {f_a} and {f_b}")
    return owner, bary


def _interpolate(owner, bary, faces, values):
    """Barycentric interpolation of per-vertex ``values`` at foreground texels."""
    out = np.zeros(owner.shape + (values.shape[-1],))
    fg = owner >= 0
    corners = faces[owner[fg]]
    b = bary[fg]
    out[fg] = (b[:, 0:1] * values[corners[:, 0]] + b[:, 1:2] * values[corners[:, 1]]
               + b[:, 2:3] * values[corners[:, 2]])
    return out


def rasterize_uv_geometry(scaffolds, resolution):
    """Rasterize every scaffold level into UV position maps.

    Texel membership uses the texel-center test with a top-left fill rule, so
    a texel on a shared UV edge belongs to exactly one triangle.
    """
    height, width = _resolution(resolution)
    owner, bary = _rasterize_charts(scaffolds.uv_faces, height, width)
    fg = owner >= 0
    positions = np.stack([_interpolate(owner, bary, scaffolds.faces, lv) for lv in scaffolds.levels])
    normals = _interpolate(owner, bary, scaffolds.faces, scaffolds.normals)
    nn = np.linalg.norm(normals[fg], axis=1)
    normals[fg] /= np.where(nn > 0, nn, 1.0)[:, None]
    offsets = np.zeros((scaffolds.level_count, height, width, 3))
    for i in range(1, scaffolds.level_count + 1):
        offsets[i - 1][fg] = positions[i][fg] - positions[i - 1][fg]
    bary[~fg] = 0.0
    return UvGeometryMaps(positions, offsets, normals, fg, owner, bary, scaffolds.offset_step)


def _resolution(resolution):
    if np.isscalar(resolution):
        return int(resolution), int(resolution)
    h, w = resolution
    return int(h), int(w)


def transfer_texture_nearest(template, scan, resolution):
    """Pseudo-ground-truth texture: colors of the nearest scan surface points.

    Each foreground texel of the template UV layout is lifted to 3D, snapped
    to its closest point on the scan, and colored from the scan texture at
    that point's UV location. Background texels stay 0.
    """
    from .multiview import bilinear_sample

    if scan.mesh.n_faces == 0:
        raise EmptyScan("scan mesh has no faces")
    height, width = _resolution(resolution)
    owner, bary = _rasterize_charts(template.uv_faces, height, width)
    fg = owner >= 0
    points = _interpolate(owner, bary, template.faces, template.vertices)[fg]
    out = np.zeros((height, width, scan.texture.shape[-1] if scan.texture.ndim == 3 else 1))
    if not len(points):
        return out
    bvh = TriangleBVH(scan.mesh.vertices, scan.mesh.faces)
    face, _, b, _ = bvh.closest(points)
    uv = np.einsum("nk,nkc->nc", b, scan.mesh.uv_faces[face])
    th, tw = scan.texture.shape[:2]
    out[fg] = bilinear_sample(scan.texture, uv_to_pixel(uv, th, tw)).reshape(len(points), -1)
    return out
