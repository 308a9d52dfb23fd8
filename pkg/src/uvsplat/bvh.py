"""Closest-point queries against triangle meshes.

A small bounding-volume hierarchy (median split on the longest centroid
axis) built with numpy and traversed in a numba kernel.
"""

import numba
import numpy as np

LEAF_SIZE = 4


@numba.njit(cache=True)
def closest_point_on_triangle(p, a, b, c):
    """Closest point to ``p`` on triangle ``abc``.

    Returns ``(point, barycentric)`` with ``point = bary[0]*a + bary[1]*b + bary[2]*c``.
    Follows the Voronoi-region walk from Ericson, *Real-Time Collision Detection*.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    bary = np.zeros(3)
    if d1 <= 0.0 and d2 <= 0.0:
        bary[0] = 1.0
        return a.copy(), bary
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        bary[1] = 1.0
        return b.copy(), bary
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        bary[0] = 1.0 - v
        bary[1] = v
        return a + v * ab, bary
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        bary[2] = 1.0
        return c.copy(), bary
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        bary[0] = 1.0 - w
        bary[2] = w
        return a + w * ac, bary
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        bary[1] = 1.0 - w
        bary[2] = w
        return b + w * (c - b), bary
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    bary[0] = 1.0 - v - w
    bary[1] = v
    bary[2] = w
    return a + ab * v + ac * w, bary


@numba.njit(cache=True)
def _box_dist2(p, lo, hi):
    d2 = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d2 += (lo[k] - p[k]) ** 2
        elif p[k] > hi[k]:
            d2 += (p[k] - hi[k]) ** 2
    return d2


@numba.njit(cache=True)
def _query_bvh(points, tri, lo, hi, left, right, start, count, order):
    n = points.shape[0]
    out_face = np.empty(n, np.int64)
    out_point = np.empty((n, 3))
    out_bary = np.empty((n, 3))
    out_dist2 = np.empty(n)
    stack = np.empty(128, np.int64)
    for q in range(n):
        p = points[q]
        best = np.inf
        best_face = -1
        best_pt = np.zeros(3)
        best_bary = np.zeros(3)
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist2(p, lo[node], hi[node]) > best:
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    f = order[k]
                    pt, bary = closest_point_on_triangle(p, tri[f, 0], tri[f, 1], tri[f, 2])
                    dd = ((pt - p) ** 2).sum()
                    # ties resolved toward the lower face index for determinism
                    if dd < best or (dd == best and f < best_face):
                        best = dd
                        best_face = f
                        best_pt = pt
                        best_bary = bary
            else:
                dl = _box_dist2(p, lo[left[node]], hi[left[node]])
                dr = _box_dist2(p, lo[right[node]], hi[right[node]])
                # push the farther child first so the nearer one is popped next
                if dl <= dr:
                    stack[top] = right[node]
                    stack[top + 1] = left[node]
                else:
                    stack[top] = left[node]
                    stack[top + 1] = right[node]
                top += 2
        out_face[q] = best_face
        out_point[q] = best_pt
        out_bary[q] = best_bary
        out_dist2[q] = best
    return out_face, out_point, out_bary, out_dist2


@numba.njit(cache=True)
def _query_brute(points, tri):
    n = points.shape[0]
    out_face = np.empty(n, np.int64)
    out_point = np.empty((n, 3))
    out_bary = np.empty((n, 3))
    out_dist2 = np.empty(n)
    for q in range(n):
        best = np.inf
        for f in range(tri.shape[0]):
            pt, bary = closest_point_on_triangle(points[q], tri[f, 0], tri[f, 1], tri[f, 2])
            dd = ((pt - points[q]) ** 2).sum()
            if dd < best:
                best = dd
                out_face[q] = f
                out_point[q] = pt
                out_bary[q] = bary
        out_dist2[q] = best
    return out_face, out_point, out_bary, out_dist2


class TriangleBVH:
    """Bounding-volume hierarchy over a triangle soup for nearest-point queries.

    >>> tri = np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]]], float)
    >>> bvh = TriangleBVH(tri[0], np.array([[0, 1, 2]]))
    >>> bvh.closest(np.array([[0.2, 0.2, 1.0]]))[1]
    array([[0.2, 0.2, 0. ]])
    """

    def __init__(self, vertices, faces):
        vertices = np.asarray(vertices, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64)
        self.triangles = np.ascontiguousarray(vertices[faces])
        self._build()

    def _build(self):
        tri = self.triangles
        centroids = tri.mean(axis=1)
        tmin = tri.min(axis=1)
        tmax = tri.max(axis=1)
        order = np.arange(len(tri))
        lo, hi, left, right, start, count = [], [], [], [], [], []

        def new_node():
            for lst in (lo, hi):
                lst.append(None)
            for lst in (left, right, start, count):
                lst.append(-1)
            return len(lo) - 1

        root = new_node()
        work = [(root, 0, len(tri))]
        while work:
            node, s, e = work.pop()
            idx = order[s:e]
            lo[node] = tmin[idx].min(axis=0)
            hi[node] = tmax[idx].max(axis=0)
            if e - s <= LEAF_SIZE:
                start[node], count[node] = s, e - s
                continue
            c = centroids[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            # stable sort keeps the build deterministic when centroids tie
            order[s:e] = idx[np.argsort(c[:, axis], kind="stable")]
            mid = (s + e) // 2
            left[node], right[node] = new_node(), new_node()
            work.append((right[node], mid, e))
            work.append((left[node], s, mid))

        self._lo = np.array(lo)
        self._hi = np.array(hi)
        self._left = np.array(left, dtype=np.int64)
        self._right = np.array(right, dtype=np.int64)
        self._start = np.array(start, dtype=np.int64)
        self._count = np.array(count, dtype=np.int64)
        self._order = order

    def closest(self, points):
        """Nearest surface point for each query point.

        Returns ``(face, point, barycentric, squared_distance)`` arrays.
        """
        points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        return _query_bvh(points, self.triangles, self._lo, self._hi, self._left,
                          self._right, self._start, self._count, self._order)


def closest_points_brute_force(vertices, faces, points):
    """Exhaustive nearest-point search; exact reference for :class:`TriangleBVH`."""
    tri = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64)[np.asarray(faces)])
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return _query_brute(points, tri)
