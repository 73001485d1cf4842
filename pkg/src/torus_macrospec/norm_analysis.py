"""Bessel reference values and Faber-Krahn machinery for norms on the plane.

``lambda1_norm`` minimizes the anisotropic Rayleigh quotient

    R(f) = int ||df||_*^2 / int f^2

over P1 functions vanishing on the boundary of a convex polygon.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import ConvexHull

from .ball_spectra import ConstantCoefficients, assemble, generalized_eigs
from .geodesic_distance import NormTable
from .meshing import GridDomain, polygon_domain

__all__ = [
    "bessel_reduced",
    "bessel_zero",
    "lambda_euclidean",
    "unit_ball_volume",
    "NormSpec",
    "ConvexDomain",
    "symmetrize",
    "lambda1_norm",
    "Lambda1Result",
    "faber_krahn_report",
    "FaberKrahnReport",
]

log = logging.getLogger(__name__)

SYMMETRIZE_VERTICES = 256


def bessel_reduced(p: float, x: float) -> tuple[float, float]:
    """``sum_m (-1)^m (x/2)^(2m) / (m! Gamma(m+p+1))`` with a truncation bound.

    This is ``(2/x)^p J_p(x)``, which has the same positive zeros as
    ``J_p``. Terms are summed until they decrease and fall below double
    precision relative to the running magnitude; the alternating tail is
    then bounded by the first omitted term. Returns ``(value, bound)``.
    """
    q = 0.25 * x * x
    term = 1.0 / math.gamma(p + 1.0)
    total = term
    scale = abs(term)
    m = 0
    while True:
        ratio = q / ((m + 1) * (m + p + 1))
        nxt = -term * ratio
        if ratio < 1.0 and abs(nxt) <= 1e-17 * scale:
            return total, abs(nxt) + 4e-16 * scale
        term = nxt
        total += term
        scale = max(scale, abs(term))
        m += 1


def bessel_zero(p: float, step: float = 0.05, xtol: float = 1e-14) -> float:
    """First positive zero of ``J_p`` by certified-sign bracketing and bisection."""
    a = step
    fa, _ = bessel_reduced(p, a)
    while True:
        b = a + step
        fb, eb = bessel_reduced(p, b)
        if abs(fb) > eb and np.sign(fb) != np.sign(fa):
            break
        a, fa = b, fb
    while b - a > xtol * b:
        c = 0.5 * (a + b)
        fc, ec = bessel_reduced(p, c)
        if abs(fc) <= ec:
            return c
        if np.sign(fc) == np.sign(fa):
            a, fa = c, fc
        else:
            b = c
    return 0.5 * (a + b)


def lambda_euclidean(n: int) -> float:
    """First Dirichlet eigenvalue of the unit Euclidean n-ball, ``j_{(n-2)/2,1}^2``."""
    if n not in (2, 3):
        raise ValueError("n must be 2 or 3")
    return bessel_zero((n - 2) / 2.0) ** 2


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def _huber(t, eps):
    a = np.abs(t)
    val = np.where(a < eps, 0.5 * t * t / eps, a - 0.5 * eps)
    grad = np.where(a < eps, t / eps, np.sign(t))
    return val, grad


@dataclass(frozen=True, eq=False)
class NormSpec:
    """A norm on R^2 (``ellipsoid``, ``lp`` or ``table``) with its dual."""

    kind: str
    Q: np.ndarray | None = None
    p: float | None = None
    table: NormTable | None = None
    vertices: np.ndarray | None = None

    @classmethod
    def euclidean(cls) -> "NormSpec":
        return cls("ellipsoid", Q=np.eye(2))

    @classmethod
    def ellipsoid(cls, Q) -> "NormSpec":
        Q = np.asarray(Q, dtype=float)
        if np.linalg.eigvalsh(Q)[0] <= 0:
            raise ValueError("ellipsoid matrix must be SPD")
        return cls("ellipsoid", Q=Q)

    @classmethod
    def lp(cls, p: float) -> "NormSpec":
        if p < 1:
            raise ValueError("p must be >= 1")
        return cls("lp", p=float(p))

    @classmethod
    def from_table(cls, table: NormTable, refine: int = 8) -> "NormSpec":
        """Polygonal norm whose unit ball is the (spline-refined) table boundary."""
        return cls("table", table=table, vertices=table.boundary(refine))

    def _facets(self):
        hull = ConvexHull(self.vertices)
        return hull.equations[:, :2], -hull.equations[:, 2]

    @property
    def huber(self) -> bool:
        """Whether ``dual_sq`` smooths a kinked dual (l^1 or l^inf)."""
        return self.kind == "lp" and (self.p == 1 or math.isinf(self.p))

    @property
    def label(self) -> str:
        if self.kind == "lp":
            return f"l{self.p:g}"
        return self.kind

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "ellipsoid":
            return np.sqrt(np.einsum("...i,ij,...j->...", x, self.Q, x))
        if self.kind == "lp":
            if math.isinf(self.p):
                return np.abs(x).max(axis=-1)
            return (np.abs(x) ** self.p).sum(axis=-1) ** (1.0 / self.p)
        normals, offsets = self._facets()
        return np.max(x @ normals.T / offsets, axis=-1)

    def dual(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if self.kind == "ellipsoid":
            return np.sqrt(np.einsum("...i,ij,...j->...", xi, np.linalg.inv(self.Q), xi))
        if self.kind == "lp":
            if self.p == 1:
                return np.abs(xi).max(axis=-1)
            if math.isinf(self.p):
                return np.abs(xi).sum(axis=-1)
            q = self.p / (self.p - 1)
            return (np.abs(xi) ** q).sum(axis=-1) ** (1.0 / q)
        return np.max(xi @ self.vertices.T, axis=-1)

    def dual_sq(self, xi, eps: float):
        """``||xi||_*^2`` and a gradient, rows of ``xi`` being covectors.

        Kinked duals of l^1 and l^inf are Huber-smoothed with width ``eps``;
        polygon duals use the exact support function, whose maximizing
        vertex is a subgradient. Other duals are exact.
        """
        xi = np.asarray(xi, dtype=float)
        if self.kind == "ellipsoid":
            qi = np.linalg.inv(self.Q)
            g = xi @ qi
            return np.einsum("ti,ti->t", g, xi), 2.0 * g
        if self.kind == "lp" and 1 < self.p < math.inf:
            q = self.p / (self.p - 1)
            a = np.abs(xi)
            s = (a**q).sum(axis=1)
            nrm = s ** (1.0 / q)
            with np.errstate(divide="ignore", invalid="ignore"):
                dn = np.where(nrm[:, None] > 0, np.sign(xi) * a ** (q - 1) / nrm[:, None] ** (q - 1), 0.0)
            return nrm**2, 2.0 * nrm[:, None] * dn
        if self.kind == "lp":
            # in 2D: max(|a|,|b|) = (|a+b| + |a-b|)/2 and |a|+|b| = max(|a+b|,|a-b|)
            if self.p == 1:
                u, gu = _huber(xi[:, 0] + xi[:, 1], eps)
                v, gv = _huber(xi[:, 0] - xi[:, 1], eps)
                nrm = 0.5 * (u + v)
                dn = 0.5 * np.stack([gu + gv, gu - gv], axis=1)
            else:
                u, gu = _huber(xi[:, 0], eps)
                v, gv = _huber(xi[:, 1], eps)
                nrm = u + v
                dn = np.stack([gu, gv], axis=1)
            return nrm**2, 2.0 * nrm[:, None] * dn
        # support function of the polygon: the maximizing vertex is a gradient
        s = xi @ self.vertices.T
        arg = np.argmax(s, axis=1)
        nrm = s[np.arange(s.shape[0]), arg]
        return nrm**2, 2.0 * nrm[:, None] * self.vertices[arg]

    def unit_ball_polygon(self, m: int = SYMMETRIZE_VERTICES) -> np.ndarray:
        th = 2 * np.pi * np.arange(m) / m
        d = np.stack([np.cos(th), np.sin(th)], axis=1)
        return d / self(d)[:, None]


@dataclass(frozen=True, eq=False)
class ConvexDomain:
    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("need at least three 2D vertices")
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        scale = np.max(np.linalg.norm(e, axis=1)) ** 2
        if np.any(cross < -1e-9 * scale):
            raise ValueError("polygon is not convex and counter-clockwise")
        object.__setattr__(self, "vertices", v)
        if self.measure <= 0:
            raise ValueError("polygon has non-positive area")

    @property
    def measure(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return float(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    @property
    def centroid(self) -> np.ndarray:
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        c = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
        return np.array([((v[:, 0] + w[:, 0]) * c).sum(), ((v[:, 1] + w[:, 1]) * c).sum()]) / (6 * self.measure)

    def scaled(self, t: float) -> "ConvexDomain":
        return ConvexDomain(self.vertices * t)

    def translated(self, shift) -> "ConvexDomain":
        return ConvexDomain(self.vertices + np.asarray(shift, dtype=float))

    @classmethod
    def regular(cls, m: int, area: float = 1.0, phase: float = 0.0) -> "ConvexDomain":
        th = phase + 2 * np.pi * np.arange(m) / m
        v = np.stack([np.cos(th), np.sin(th)], axis=1)
        a = 0.5 * m * math.sin(2 * math.pi / m)
        return cls(v * math.sqrt(area / a))

    @classmethod
    def rectangle(cls, width: float, height: float) -> "ConvexDomain":
        w, h = width / 2, height / 2
        return cls(np.array([[-w, -h], [w, -h], [w, h], [-w, h]]))


def symmetrize(domain: ConvexDomain, norm: NormSpec, m: int = SYMMETRIZE_VERTICES) -> ConvexDomain:
    """Norm ball with the measure of ``domain``, centred at its centroid."""
    unit = norm.unit_ball_polygon(m)
    x, y = unit[:, 0], unit[:, 1]
    unit_area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    r = math.sqrt(domain.measure / unit_area)
    return ConvexDomain(unit * r + domain.centroid)


@dataclass(frozen=True)
class Lambda1Result:
    value: float
    flagged: bool
    seed_values: tuple
    iterations: tuple
    smoothing: float
    h: float
    linear_value: float | None = None


def _mesh(domain: ConvexDomain, resolution: int) -> GridDomain:
    h = math.sqrt(domain.measure) / resolution
    return polygon_domain(domain.vertices, h, center=domain.centroid)


def _gradient_operator(mesh: GridDomain):
    p = mesh.nodes[mesh.triangles]
    area = mesh.triangle_areas()
    e = [p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]]
    t = mesh.triangles.shape[0]
    rows, cols, vals = [], [], []
    for comp in range(2):
        for k in range(3):
            g = (-e[k][:, 1] if comp == 0 else e[k][:, 0]) / (2 * area)
            rows.append(2 * np.arange(t) + comp)
            cols.append(mesh.triangles[:, k])
            vals.append(g)
    d = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(2 * t, mesh.n_nodes)
    )
    return d, area


def _descent(u, energy, mass, solve, max_iter, gtol):
    """Sobolev-preconditioned projected descent with Armijo steps.

    Directions are Polak-Ribiere conjugate combinations of the preconditioned
    gradient, reset to steepest descent whenever they fail to descend.
    """

    def normalize(v):
        return v / math.sqrt(v @ (mass * v))

    u = normalize(u)
    e, ge = energy(u)
    it = 0
    stalled = False
    step = 0.5  # t = 1/2 is inverse iteration when the quotient is quadratic
    d = z_prev = g_prev = None
    for it in range(1, max_iter + 1):
        # tangential gradient on ||u||_M = 1; smoothed energies are not 2-homogeneous
        grad = ge - (ge @ u) * mass * u
        z = solve(grad)
        if grad @ z < gtol * max(e, 1.0):
            break
        if d is None:
            d = -z
        else:
            beta = max(0.0, (z @ (grad - g_prev)) / (z_prev @ g_prev))
            d = -z + beta * d
        slope = grad @ d
        if slope >= 0:
            d = -z
            slope = grad @ d
        t = min(0.5, 2.0 * step)
        while True:
            cand = normalize(u + t * d)
            ec, gc = energy(cand)
            if ec <= e + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-10:
                stalled = True
                break
        if stalled:
            break
        rel = (e - ec) / e
        step = t
        z_prev, g_prev = z, grad
        u, e, ge = cand, ec, gc
        if rel < 1e-13:
            break
    else:
        stalled = True
    return e, u, it, stalled


def lambda1_norm(
    domain: ConvexDomain,
    norm: NormSpec,
    resolution: int = 48,
    max_iter: int = 1000,
    gtol: float = 1e-10,
) -> Lambda1Result:
    """First Dirichlet eigenvalue of ``domain`` for the norm ``norm``.

    ``resolution`` is the number of mesh cells per ``sqrt(area)``.
    """
    mesh = _mesh(domain, resolution)
    free = np.flatnonzero(~mesh.boundary)
    dmat, area = _gradient_operator(mesh)
    dmat = dmat[:, free]
    # Huber width h in units of the unit-measure domain, so that lambda_1(tD) = lambda_1(D) / t^2
    eps = mesh.h * domain.measure**-1.5
    kmat_full, mass_full = assemble(mesh, ConstantCoefficients(np.eye(2)))
    mass = mass_full[free]
    keu = kmat_full[free][:, free].tocsc()
    lu = splu(keu)

    def energy(u):
        g = (dmat @ u).reshape(-1, 2)
        val, grad = norm.dual_sq(g, eps)
        e = float(area @ val)
        ge = dmat.T @ (area[:, None] * grad).ravel()
        return e, ge

    linear = None
    # seeds: constant interior, Euclidean eigenfunction, radial norm profile
    _, evec = _first_mode(keu, mass)
    x = mesh.nodes[free] - domain.centroid
    nx = norm(x)
    radial = np.maximum(1.0 - nx / max(nx.max(), 1e-12), 0.0) + 1e-3
    seeds = [np.ones(free.size), np.abs(evec), radial]
    values, its, flags = [], [], []
    for s in seeds:
        e, _, it, stalled = _descent(s, energy, mass, lu.solve, max_iter, gtol)
        values.append(e)
        its.append(it)
        flags.append(stalled)
    best = int(np.argmin(values))
    value = values[best]
    if norm.kind == "ellipsoid":
        lin = generalized_eigs(mesh, ConstantCoefficients(np.linalg.inv(norm.Q)), 1, "dirichlet")
        linear = float(lin.eigenvalues[0])
        if abs(linear - value) > 0.01 * linear:
            log.warning("descent %.6g and linear %.6g disagree", value, linear)
        value = linear
    return Lambda1Result(
        value=float(value),
        flagged=bool(flags[best]),
        seed_values=tuple(float(v) for v in values),
        iterations=tuple(its),
        smoothing=float(eps) if norm.huber else 0.0,
        h=float(mesh.h),
        linear_value=linear,
    )


def _first_mode(kmat, mass):
    from scipy.sparse.linalg import eigsh

    d = 1.0 / np.sqrt(mass)
    a = (sp.diags(d) @ kmat @ sp.diags(d)).tocsc()
    vals, vecs = eigsh(a, k=1, sigma=0.0, which="LM", v0=np.ones(a.shape[0]))
    return float(vals[0]), vecs[:, 0] * d


@dataclass(frozen=True)
class FaberKrahnReport:
    lambda1_D: float
    lambda1_Dstar: float
    slack: float
    equality: bool
    hausdorff: float
    norm_kind: str
    resolution: int
    smoothing: float
    tolerance: float
    flagged: bool = False

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


def _hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    from shapely.geometry import Polygon

    return float(Polygon(a).hausdorff_distance(Polygon(b)))


def faber_krahn_report(
    domain: ConvexDomain, norm: NormSpec, resolution: int = 48, rel_tol: float = 0.01
) -> FaberKrahnReport:
    """Compare ``lambda_1(D)`` with ``lambda_1(D*)`` for the norm ball ``D*``.

    ``rel_tol`` is the solver tolerance relative to ``lambda_1(D*)``; the
    equality diagnosis fires when the slack is within it.
    """
    star = symmetrize(domain, norm)
    l_d = lambda1_norm(domain, norm, resolution)
    l_s = lambda1_norm(star, norm, resolution)
    slack = l_d.value - l_s.value
    tol = rel_tol * l_s.value
    return FaberKrahnReport(
        lambda1_D=l_d.value,
        lambda1_Dstar=l_s.value,
        slack=float(slack),
        equality=bool(slack <= tol),
        hausdorff=_hausdorff(domain.vertices, star.vertices),
        norm_kind=norm.label,
        resolution=int(resolution),
        smoothing=l_d.smoothing,
        tolerance=float(tol),
        flagged=l_d.flagged or l_s.flagged,
    )
