"""Geodesic distance maps on the periodic cover and the stable norm.

Distances from the origin are computed by label-setting on a stencil graph
over the box ``[-R, R]^n``: every node is joined to the nodes at coprime
integer offsets within Chebyshev radius ``r``, with edge length measured by
the metric at the segment midpoint. In 2D the default ``simplex`` method
also relaxes each node across the wedge between two angularly adjacent
stencil neighbours (linear interpolation of the label along the far edge),
which removes most of the polygonal bias of the pure graph metric.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import map_coordinates
from scipy.spatial import ConvexHull

from .metric_field import MetricField

__all__ = [
    "SizingError",
    "DistanceField",
    "NormTable",
    "stencil_offsets",
    "stencil_error_bound",
    "distance_map",
    "stable_norm_estimate",
    "stable_ball_table",
    "table_directions",
]

DEFAULT_MEMORY_BUDGET = 1_500_000_000
FIT_RESIDUAL_FLAG = 5e-3


class SizingError(ValueError):
    """Requested grid does not fit the memory budget or the requested extent."""


def stencil_offsets(r: int, n: int = 2) -> np.ndarray:
    """Coprime integer offsets with Chebyshev norm <= r.

    ``r = 1`` is the diagnostic axis-only stencil (4 neighbours in 2D). In
    2D the offsets are returned sorted by angle.
    """
    if r < 1:
        raise ValueError("stencil radius must be >= 1")
    if r == 1:
        offs = np.concatenate([np.eye(n, dtype=np.int64), -np.eye(n, dtype=np.int64)])
    else:
        rng = range(-r, r + 1)
        grid = np.array(np.meshgrid(*[rng] * n, indexing="ij")).reshape(n, -1).T
        keep = [o for o in grid if np.any(o) and math.gcd(*(int(abs(v)) for v in o)) == 1]
        offs = np.array(keep, dtype=np.int64)
    if n == 2:
        offs = offs[np.argsort(np.arctan2(offs[:, 1], offs[:, 0]), kind="stable")]
    return offs


def stencil_error_bound(r: int, method: str = "simplex") -> float:
    """Relative error bound of the stencil metric for a constant metric.

    For the graph method this is the worst polygonal bias, ``1/cos(gap/2) - 1``
    with ``gap`` the largest angle between adjacent stencil directions (2D,
    isotropic). Wedge relaxation is exact for linear label fields, so the
    bound only carries the residual curvature error near the source, which
    the Burago fit absorbs; a quarter of the graph bound is a conservative
    cap observed on the flat families.
    """
    offs = stencil_offsets(r, 2).astype(float)
    ang = np.sort(np.arctan2(offs[:, 1], offs[:, 0]))
    gaps = np.diff(np.concatenate([ang, ang[:1] + 2 * np.pi]))
    graph = 1.0 / math.cos(gaps.max() / 2) - 1.0
    return graph if method == "graph" or r == 1 else 0.25 * graph


@dataclass(frozen=True, eq=False)
class DistanceField:
    extent: float
    resolution: int  # nodes per unit length
    values: np.ndarray
    stencil_radius: int
    method: str = "simplex"
    field_id: int = 0

    @property
    def dimension(self) -> int:
        return self.values.ndim

    @property
    def h(self) -> float:
        return 1.0 / self.resolution

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def origin_index(self) -> tuple:
        return tuple(s // 2 for s in self.values.shape)

    def axis(self) -> np.ndarray:
        m = self.values.shape[0]
        return -self.extent + self.h * np.arange(m)

    def coords(self) -> np.ndarray:
        ax = self.axis()
        return np.stack(np.meshgrid(*[ax] * self.dimension, indexing="ij"), axis=-1)

    def value_at(self, points) -> np.ndarray:
        """Multilinear interpolation of the label field at physical points."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        idx = (p + self.extent) / self.h
        if np.any(idx < -1e-9) or np.any(idx > self.values.shape[0] - 1 + 1e-9):
            raise SizingError("point outside the distance-map extent")
        return map_coordinates(self.values, idx.T, order=1, mode="nearest")


def distance_map(
    field: MetricField,
    extent: float,
    resolution: int,
    stencil_radius: int = 3,
    method: str = "simplex",
    quadrature: str = "simpson",
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> DistanceField:
    """Label field approximating ``d_g(0, x)`` on ``[-R, R]^n``.

    ``resolution`` is the number of grid nodes per unit length. ``method``
    is ``simplex`` (2D wedge relaxation) or ``graph`` (pure shortest path,
    always an over-estimate of the continuum distance). ``quadrature`` is
    ``midpoint`` or ``simpson`` for the segment-length rule.
    """
    if extent < 1:
        raise SizingError(f"extent must be >= 1, got {extent}")
    if method not in ("simplex", "graph"):
        raise ValueError(f"unknown method {method!r}")
    if quadrature not in ("midpoint", "simpson"):
        raise ValueError(f"unknown quadrature {quadrature!r}")
    n = field.dimension
    m = 2 * int(math.ceil(extent * resolution)) + 1
    extent = (m // 2) / resolution
    total = m**n
    # labels, flags and a heap that may hold a few entries per node
    need = total * (8 + 1 + 48)
    if need > memory_budget:
        raise SizingError(
            f"distance map with {m}^{n} nodes needs ~{need / 1e9:.2f} GB, budget {memory_budget / 1e9:.2f} GB"
        )
    from ._kernels import label_setting

    offs = stencil_offsets(stencil_radius, n)
    use_simplex = method == "simplex" and n == 2 and stencil_radius > 1
    k = len(offs)
    prev = np.full(k, -1, dtype=np.int64)
    nxt = np.full(k, -1, dtype=np.int64)
    if use_simplex:
        prev = (np.arange(k) - 1) % k
        nxt = (np.arange(k) + 1) % k
    res = np.array(field.resolution, dtype=np.int64)
    samples = np.ascontiguousarray(field.samples.reshape(-1, n, n))
    shape = np.full(n, m, dtype=np.int64)
    lo = np.full(n, -extent)
    origin = int(np.ravel_multi_index((m // 2,) * n, (m,) * n))
    dist = label_setting(
        samples, res, field.lattice.inverse, shape, lo, 1.0 / resolution, offs, prev, nxt, origin, use_simplex,
        quadrature == "simpson",
    )
    assert np.isfinite(dist).all(), "unreachable node on a grid graph"
    return DistanceField(
        float(extent),
        int(resolution),
        dist.reshape((m,) * n),
        int(stencil_radius),
        "simplex" if use_simplex else "graph",
        id(field),
    )


def _burago_fit(rhos: np.ndarray, f: np.ndarray) -> tuple[float, float, float]:
    design = np.stack([np.ones_like(rhos), 1.0 / rhos], axis=1)
    coef, *_ = np.linalg.lstsq(design, f, rcond=None)
    resid = f - design @ coef
    return float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(resid**2)))


def stable_norm_estimate(
    field: MetricField,
    direction,
    rho_list,
    dist: DistanceField | None = None,
    resolution: int = 8,
    stencil_radius: int = 3,
    cell_average: int = 8,
) -> tuple[float, float, float]:
    """Stable norm of ``direction`` by the fit ``f(rho) ~ N + C/rho``.

    ``f(rho)`` is ``d(0, rho v + y)/rho`` averaged over ``cell_average^n``
    centred sub-cell midpoints ``y`` of the fundamental cell. A single
    endpoint carries a bounded periodic offset whose phase depends on
    ``rho v`` modulo the lattice; the fit would alias it into ``N``, while
    the cell average turns it into a smooth ``1/rho`` term. ``cell_average=1``
    samples the bare endpoint.

    Returns ``(N, C, fit_residual)``. ``direction`` need not be unit; the
    norm is positively homogeneous.
    """
    rhos = np.asarray(sorted(rho_list), dtype=float)
    if rhos.size < 2:
        raise ValueError("need at least two rho values")
    if cell_average < 1:
        raise ValueError("cell_average must be >= 1")
    v = np.asarray(direction, dtype=float)
    n = v.size
    sub = (np.arange(cell_average) + 0.5) / cell_average - 0.5
    offs = np.stack(np.meshgrid(*[sub] * n, indexing="ij"), axis=-1).reshape(-1, n)
    offs = field.lattice.to_physical(offs)
    reach = rhos[-1] * np.abs(v).max() + np.abs(offs).max()
    if dist is None:
        dist = distance_map(field, max(reach + 2 * stencil_radius / resolution, 1.0), resolution, stencil_radius)
    if reach > dist.extent:
        raise SizingError(f"rho*direction reaches {reach:.3g} beyond extent {dist.extent:.3g}")
    pts = rhos[:, None, None] * v[None, None, :] + offs[None, :, :]
    f = dist.value_at(pts.reshape(-1, n)).reshape(rhos.size, -1).mean(axis=1) / rhos
    return _burago_fit(rhos, f)


def table_directions(m: int, n: int = 2) -> np.ndarray:
    if n == 2:
        th = 2 * np.pi * np.arange(m) / m
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    # Fibonacci sphere, antipodally closed: second half mirrors the first
    half = m // 2
    i = np.arange(half) + 0.5
    z = 1 - i / half
    phi = np.pi * (1 + 5**0.5) * i
    pts = np.stack([np.sqrt(1 - z**2) * np.cos(phi), np.sqrt(1 - z**2) * np.sin(phi), z], axis=1)
    return np.concatenate([pts, -pts])


@dataclass(frozen=True, eq=False)
class NormTable:
    """Sampled stable unit ball: boundary radius per direction."""

    directions: np.ndarray
    radii: np.ndarray
    burago_C: np.ndarray
    residuals: np.ndarray
    flags: np.ndarray
    convexified: bool
    raw_radii: np.ndarray | None = None
    stencil_radius: int = 3
    method: str = "simplex"
    h: float = 0.125
    meta: dict = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return self.directions.shape[1]

    @property
    def size(self) -> int:
        return self.directions.shape[0]

    def polygon(self) -> np.ndarray:
        """Counter-clockwise boundary vertices (2D)."""
        if self.dimension != 2:
            raise ValueError("polygon is only defined for 2D tables")
        return self.radii[:, None] * self.directions

    def boundary(self, refine: int = 8) -> np.ndarray:
        """Counter-clockwise boundary with ``refine`` times more vertices.

        The radial function is interpolated by a periodic cubic spline in
        the angle and convexified again. Inscribed polygons underestimate
        the ball; the spline removes that O(1/M^2) bias on smooth balls.
        """
        if self.dimension != 2:
            raise ValueError("boundary is only defined for 2D tables")
        if refine <= 1:
            return self.polygon()
        th = np.arctan2(self.directions[:, 1], self.directions[:, 0]) % (2 * np.pi)
        order = np.argsort(th)
        th, r = th[order], self.radii[order]
        spline = CubicSpline(np.append(th, th[0] + 2 * np.pi), np.append(r, r[0]), bc_type="periodic")
        fine = th[0] + 2 * np.pi * np.arange(refine * self.size) / (refine * self.size)
        d = np.stack([np.cos(fine), np.sin(fine)], axis=1)
        rf = spline(fine)
        rf = _radial_of_hull(rf[:, None] * d, d)
        return rf[:, None] * d

    def _facets(self):
        hull = ConvexHull(self.polygon())
        return hull.equations[:, :2], -hull.equations[:, 2]

    def gauge(self, x) -> np.ndarray:
        """Stable norm evaluated from the (convex) polygon: max_e n_e.x / c_e."""
        normals, offsets = self._facets()
        x = np.asarray(x, dtype=float)
        return np.max(x @ normals.T / offsets, axis=-1)

    def support(self, xi) -> np.ndarray:
        """Dual norm: support function of the polygon, max over vertices."""
        xi = np.asarray(xi, dtype=float)
        return np.max(xi @ self.polygon().T, axis=-1)

    def area(self, refine: int = 1) -> float:
        p = self.boundary(refine)
        x, y = p[:, 0], p[:, 1]
        return float(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["theta", "radius", "buragoC", "residual", "flag"])
        for d, r, c, res, fl in zip(self.directions, self.radii, self.burago_C, self.residuals, self.flags):
            theta = math.atan2(d[1], d[0]) % (2 * math.pi) if self.dimension == 2 else float("nan")
            w.writerow([repr(float(theta)), repr(float(r)), repr(float(c)), repr(float(res)), int(fl)])
        return buf.getvalue()

    def to_polygon_json(self) -> str:
        return json.dumps({"closed": True, "vertices": self.polygon().tolist() + [self.polygon()[0].tolist()]})


def _radial_of_hull(points: np.ndarray, directions: np.ndarray) -> np.ndarray:
    hull = ConvexHull(points)
    normals = hull.equations[:, :2]
    offsets = -hull.equations[:, 2]
    return 1.0 / np.max(directions @ normals.T / offsets, axis=1)


def stable_ball_table(
    field: MetricField,
    m: int = 64,
    rho_list=(8, 16, 32),
    dist: DistanceField | None = None,
    resolution: int = 8,
    stencil_radius: int = 3,
    fit_flag: float = FIT_RESIDUAL_FLAG,
) -> NormTable:
    """Per-direction stable-ball radii ``1 / N(theta)``, symmetrized and convexified."""
    n = field.dimension
    if n == 2 and m < 32:
        raise ValueError("need at least 32 directions in 2D")
    if m % 2:
        raise ValueError("direction count must be even (antipodal pairs)")
    rhos = np.asarray(sorted(rho_list), dtype=float)
    if dist is None:
        reach = rhos[-1] + 0.5 * np.abs(field.lattice.basis).sum(axis=1).max()
        dist = distance_map(field, reach + 2 * stencil_radius / resolution + 1e-9, resolution, stencil_radius)
    dirs = table_directions(m, n)
    norms = np.empty(m)
    cs = np.empty(m)
    res = np.empty(m)
    for i, d in enumerate(dirs):
        norms[i], cs[i], res[i] = stable_norm_estimate(field, d, rhos, dist=dist)
    flags = (res > fit_flag) | ~(norms > 0)
    raw = 1.0 / norms
    half = m // 2
    sym = raw.copy()
    sym[:half] = 0.5 * (raw[:half] + raw[half:])
    sym[half:] = sym[:half]
    convexified = False
    radii = sym
    if n == 2:
        hull_r = _radial_of_hull(sym[:, None] * dirs, dirs)
        convexified = bool(np.max(np.abs(hull_r - sym)) > 1e-6)
        radii = hull_r
    else:
        warnings.warn("3D stable-ball table kept raw (no convex repair)", stacklevel=2)
    return NormTable(
        directions=dirs,
        radii=radii,
        burago_C=cs,
        residuals=res,
        flags=flags,
        convexified=convexified,
        raw_radii=raw,
        stencil_radius=dist.stencil_radius,
        method=dist.method,
        h=dist.h,
        meta={"rho_list": rhos.tolist()},
    )
