"""Boundary-clipped structured triangulations of planar level-set domains.

The domain is ``{phi <= 0}`` for a function sampled on a uniform grid.
Grid nodes lying within a fraction ``snap`` of an axis edge from the zero
crossing are moved onto it; remaining cut triangles are clipped along the
linear interpolant of ``phi``. The result is a conforming P1 mesh whose
boundary is an O(h^2) approximation of the level set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

__all__ = ["GridDomain", "DomainError", "level_set_mesh", "polygon_level_set", "polygon_domain"]


class DomainError(ValueError):
    """Empty, origin-free or degenerate domain."""


@dataclass(frozen=True, eq=False)
class GridDomain:
    nodes: np.ndarray  # (P, 2)
    triangles: np.ndarray  # (T, 3), counter-clockwise
    boundary: np.ndarray  # (P,) bool
    h: float
    origin_node: int
    dropped_components: int = 0

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def triangle_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def scaled(self, factor: float) -> "GridDomain":
        return GridDomain(
            self.nodes * factor, self.triangles, self.boundary, self.h * factor, self.origin_node, self.dropped_components
        )


def _snap(px, py, phi, frac):
    """Move nodes that sit within ``frac`` of a zero crossing onto it."""
    nx, ny = phi.shape
    best = np.full(phi.shape, np.inf)
    tx = np.zeros(phi.shape)
    ty = np.zeros(phi.shape)
    for axis in (0, 1):
        a = phi[:-1, :] if axis == 0 else phi[:, :-1]
        b = phi[1:, :] if axis == 0 else phi[:, 1:]
        cross = (a < 0) & (b > 0) | (a > 0) & (b < 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(cross, a / (a - b), np.nan)
        # candidate for the first endpoint (distance t) and the second (1 - t)
        for which, dist in ((0, t), (1, 1.0 - t)):
            ok = cross & (dist < frac)
            ii, jj = np.nonzero(ok)
            ti, tj = (ii + which, jj) if axis == 0 else (ii, jj + which)
            d = dist[ii, jj]
            step = (t[ii, jj] if which == 0 else t[ii, jj] - 1.0)
            better = d < best[ti, tj]
            ti, tj, d, step = ti[better], tj[better], d[better], step[better]
            best[ti, tj] = d
            if axis == 0:
                tx[ti, tj] = step
                ty[ti, tj] = 0.0
            else:
                ty[ti, tj] = step
                tx[ti, tj] = 0.0
    moved = np.isfinite(best)
    hx = px[1] - px[0]
    hy = py[1] - py[0]
    X, Y = np.meshgrid(px, py, indexing="ij")
    X = X + tx * hx
    Y = Y + ty * hy
    phi = np.where(moved, 0.0, phi)
    return X, Y, phi


def level_set_mesh(px, py, phi, origin=(0.0, 0.0), snap: float = 0.25) -> GridDomain:
    """Mesh ``{phi <= 0}`` from samples ``phi[i, j]`` at ``(px[i], py[j])``.

    Only the connected component containing the node nearest ``origin`` is
    kept; the number of dropped components is recorded.
    """
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    phi = np.array(phi, dtype=float)
    nx, ny = phi.shape
    if not (phi < 0).any():
        raise DomainError("level set has no interior")
    h = float(max(px[1] - px[0], py[1] - py[0]))
    X, Y, phi = _snap(px, py, phi, snap)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    f = phi.ravel()
    idx = np.arange(nx * ny).reshape(nx, ny)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    v01 = idx[:-1, 1:].ravel()
    tris = np.concatenate([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)])
    fv = f[tris]
    inside = (fv <= 0).all(axis=1) & (fv < 0).any(axis=1)
    cut = (fv < 0).any(axis=1) & (fv > 0).any(axis=1)
    keep = [tris[inside]]
    new_pts = []
    edge_node: dict = {}
    next_id = pts.shape[0]
    for tri in tris[cut]:
        poly = []
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            fa, fb = f[a], f[b]
            if fa <= 0:
                poly.append(a)
            if (fa < 0 < fb) or (fb < 0 < fa):
                key = (a, b) if a < b else (b, a)
                node = edge_node.get(key)
                if node is None:
                    t = fa / (fa - fb)
                    new_pts.append(pts[a] + t * (pts[b] - pts[a]))
                    node = next_id
                    edge_node[key] = node
                    next_id += 1
                poly.append(node)
        for c in range(1, len(poly) - 1):
            keep.append(np.array([[poly[0], poly[c], poly[c + 1]]]))
    if new_pts:
        pts = np.concatenate([pts, np.array(new_pts)])
        f = np.concatenate([f, np.zeros(len(new_pts))])
    tris = np.concatenate(keep)
    p = pts[tris]
    area = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    tris = tris[area > 1e-10 * h * h]
    if tris.size == 0:
        raise DomainError("level set produced no triangles")
    # connected component containing the origin
    used = np.unique(tris)
    remap = np.full(pts.shape[0], -1)
    remap[used] = np.arange(used.size)
    tris = remap[tris]
    pts = pts[used]
    rows = np.concatenate([tris[:, 0], tris[:, 1], tris[:, 2]])
    cols = np.concatenate([tris[:, 1], tris[:, 2], tris[:, 0]])
    adj = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(used.size, used.size))
    ncomp, labels = connected_components(adj, directed=False)
    origin_node = int(np.argmin(np.sum((pts - np.asarray(origin)) ** 2, axis=1)))
    if np.sum((pts[origin_node] - np.asarray(origin)) ** 2) > 4 * h * h:
        raise DomainError("origin is not inside the domain")
    keep_nodes = labels == labels[origin_node]
    tris = tris[keep_nodes[tris[:, 0]]]
    used = np.unique(tris)
    remap = np.full(pts.shape[0], -1)
    remap[used] = np.arange(used.size)
    tris = remap[tris]
    origin_node = int(remap[origin_node])
    pts = pts[used]
    # boundary = endpoints of edges owned by a single triangle
    e = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    boundary = np.zeros(pts.shape[0], dtype=bool)
    boundary[uniq[counts == 1].ravel()] = True
    return GridDomain(pts, tris, boundary, h, origin_node, int(ncomp - 1))


def polygon_level_set(vertices: np.ndarray):
    """Signed level function of a convex CCW polygon: max of edge distances."""
    v = np.asarray(vertices, dtype=float)
    e = np.roll(v, -1, axis=0) - v
    normals = np.stack([e[:, 1], -e[:, 0]], axis=1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    offsets = np.einsum("ij,ij->i", normals, v)

    def phi(points):
        points = np.asarray(points, dtype=float)
        return np.max(points @ normals.T - offsets, axis=-1)

    return phi


def polygon_domain(vertices, h: float, center=None, snap: float = 0.25) -> GridDomain:
    """Mesh a convex polygon with a structured grid of spacing ``h``."""
    v = np.asarray(vertices, dtype=float)
    if v.shape[0] < 3:
        raise DomainError("polygon needs at least 3 vertices")
    x = v[:, 0]
    y = v[:, 1]
    if 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) <= 0:
        raise DomainError("polygon is degenerate or clockwise")
    center = v.mean(axis=0) if center is None else np.asarray(center, dtype=float)
    lo = v.min(axis=0) - 2 * h
    hi = v.max(axis=0) + 2 * h
    # grid aligned so that ``center`` is a node
    ix = np.arange(np.floor((lo[0] - center[0]) / h), np.ceil((hi[0] - center[0]) / h) + 1)
    iy = np.arange(np.floor((lo[1] - center[1]) / h), np.ceil((hi[1] - center[1]) / h) + 1)
    px = center[0] + h * ix
    py = center[1] + h * iy
    X, Y = np.meshgrid(px, py, indexing="ij")
    phi = polygon_level_set(v)(np.stack([X, Y], axis=-1))
    return level_set_mesh(px, py, phi, origin=center, snap=snap)
