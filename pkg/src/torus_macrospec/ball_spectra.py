"""Dirichlet and Neumann spectra of rescaled metric balls and of the stable ball.

Both sides use the same P1 finite elements on boundary-clipped structured
meshes:

    K_ij = int a grad phi_i . grad phi_j,    M_ii = int w phi_i  (lumped)

with ``(a, w) = (sqrt(det g_rho) g_rho^{-1}, sqrt(det g_rho))`` on the metric
ball ``B_rho(1)`` and ``(a, w) = (q, 1)`` on the stable unit ball. The
rescaled metric satisfies ``g_rho(x) = g(rho x)`` in rescaled coordinates.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .cell_solver import HomogenizedTensor, conductivity
from .geodesic_distance import DistanceField, NormTable, SizingError, distance_map
from .meshing import DomainError, GridDomain, level_set_mesh, polygon_domain
from .metric_field import MetricField, ellipticity_bounds, sample_metric

__all__ = [
    "SpectrumReport",
    "EigenError",
    "MetricCoefficients",
    "ConstantCoefficients",
    "assemble",
    "ball_domain",
    "generalized_eigs",
    "rescaled_spectrum_sweep",
    "stable_ball_spectrum",
    "sweep_csv",
]

log = logging.getLogger(__name__)

MAX_K = 12
NODES_PER_PERIOD = 8
MIN_NODES_PER_UNIT = 64  # rescaled-coordinate floor for small rho
NEUMANN_SHIFT = -1e-2


class EigenError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpectrumReport:
    bc: str
    eigenvalues: np.ndarray
    rho: float
    h: float
    solver_iters: int
    residuals: np.ndarray
    n_dofs: int = 0
    converged: bool = True
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MetricCoefficients:
    """Coefficients of the Laplace-Beltrami form for ``g_rho(x) = g(scale * x)``."""

    field: MetricField
    scale: float = 1.0

    def __call__(self, points):
        g = sample_metric(self.field, self.scale * np.asarray(points))
        return conductivity(g)


@dataclass(frozen=True)
class ConstantCoefficients:
    q: np.ndarray
    weight: float = 1.0

    def __call__(self, points):
        m = np.asarray(points).shape[0]
        return np.broadcast_to(np.asarray(self.q, dtype=float), (m, 2, 2)), np.full(m, self.weight)


def assemble(domain: GridDomain, coeffs) -> tuple[sp.csr_matrix, np.ndarray]:
    """P1 stiffness (coefficients at centroids) and lumped mass diagonal."""
    p = domain.nodes[domain.triangles]  # (T, 3, 2)
    area = domain.triangle_areas()
    # gradients of barycentric coordinates: rows are grad lambda_k
    e0 = p[:, 2] - p[:, 1]
    e1 = p[:, 0] - p[:, 2]
    e2 = p[:, 1] - p[:, 0]
    grads = np.stack([np.stack([-e[:, 1], e[:, 0]], axis=1) for e in (e0, e1, e2)], axis=1)
    grads /= (2.0 * area)[:, None, None]
    a, w = coeffs(domain.centroids())
    local = area[:, None, None] * np.einsum("tki,tij,tlj->tkl", grads, a, grads)
    rows = np.repeat(domain.triangles, 3, axis=1).ravel()
    cols = np.tile(domain.triangles, (1, 3)).ravel()
    n = domain.n_nodes
    k = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))
    k = 0.5 * (k + k.T)
    mass = np.bincount(domain.triangles.ravel(), weights=np.repeat(area * w / 3.0, 3), minlength=n)
    return k.tocsr(), mass


def ball_domain(dist: DistanceField, rho: float, snap: float = 0.25) -> GridDomain:
    """Mesh of ``B_rho(1)`` in rescaled coordinates ``x / rho``."""
    if dist.dimension != 2:
        raise ValueError("ball meshes are 2D only")
    reach = dist.extent
    if rho > reach:
        raise SizingError(f"rho={rho} exceeds distance-map extent {reach}")
    phi = dist.values / rho - 1.0
    # the ball must not touch the box boundary
    edge = np.concatenate([phi[0], phi[-1], phi[:, 0], phi[:, -1]])
    if (edge <= 0).any():
        raise SizingError(f"metric ball of radius {rho} reaches the distance-map boundary")
    ax = dist.axis() / rho
    try:
        dom = level_set_mesh(ax, ax, phi, origin=(0.0, 0.0), snap=snap)
    except DomainError:
        raise
    if dom.dropped_components:
        log.info("ball rho=%g: dropped %d disconnected fragments", rho, dom.dropped_components)
    return dom


def generalized_eigs(domain: GridDomain, coeffs, k: int = 1, bc: str = "dirichlet", rho: float = math.inf,
                     shift: float | None = None, tol: float = 0.0) -> SpectrumReport:
    """Smallest ``k`` eigenvalues of ``K u = lambda M u`` by shift-invert Lanczos."""
    if not 1 <= k <= MAX_K:
        raise ValueError(f"k must be in 1..{MAX_K}")
    bc = bc.lower()
    if bc not in ("dirichlet", "neumann"):
        raise ValueError(f"unknown boundary condition {bc!r}")
    kmat, mass = assemble(domain, coeffs)
    if bc == "dirichlet":
        free = np.flatnonzero(~domain.boundary)
        kmat = kmat[free][:, free]
        mass = mass[free]
        sigma = 0.0 if shift is None else shift
    else:
        sigma = NEUMANN_SHIFT * (kmat.diagonal().mean() / mass.mean()) * domain.h**2 if shift is None else shift
    ndof = kmat.shape[0]
    if ndof <= k + 1:
        raise DomainError(f"only {ndof} degrees of freedom for k={k}")
    # symmetric form with D = M^{-1/2}: D K D v = lambda v
    d = 1.0 / np.sqrt(mass)
    a = (sp.diags(d) @ kmat @ sp.diags(d)).tocsc()
    v0 = np.ones(ndof) / math.sqrt(ndof)
    ncv = min(ndof - 1, max(2 * k + 1, 20))
    try:
        vals, vecs = eigsh(a, k=k, sigma=sigma, which="LM", v0=v0, ncv=ncv, tol=tol)
        converged = True
    except ArpackNoConvergence as exc:
        vals, vecs = exc.eigenvalues, exc.eigenvectors
        converged = False
        log.warning("Lanczos did not converge; partial report (%d of %d)", len(vals), k)
    except RuntimeError as exc:  # factorization breakdown
        raise EigenError(f"shift-invert factorization failed: {exc}") from exc
    order = np.argsort(vals)
    vals = vals[order]
    vecs = vecs[:, order]
    res = np.linalg.norm(a @ vecs - vecs * vals, axis=0) / np.maximum(np.abs(vals), 1.0)
    return SpectrumReport(
        bc=bc,
        eigenvalues=vals,
        rho=float(rho),
        h=domain.h,
        solver_iters=ncv,
        residuals=res,
        n_dofs=ndof,
        converged=converged,
        meta={"area": domain.area(), "dropped_components": domain.dropped_components},
    )


def _sweep_resolution(rho: float, nodes_per_period: int, min_nodes_per_unit: int) -> int:
    """Distance-grid nodes per unit length of the unrescaled cover."""
    return max(nodes_per_period, int(math.ceil(min_nodes_per_unit / rho)))


def rescaled_spectrum_sweep(
    field: MetricField,
    rho_list,
    k: int = 1,
    bc: str = "dirichlet",
    stencil_radius: int = 3,
    nodes_per_period: int = NODES_PER_PERIOD,
    min_nodes_per_unit: int = MIN_NODES_PER_UNIT,
    max_nodes: int = 2_000_000,
    return_domains: bool = False,
):
    """Eigenvalues of ``Delta_rho`` on ``B_rho(1)`` for each ``rho``.

    These equal ``rho^2`` times the eigenvalues of ``Delta`` on ``B_g(rho)``.
    """
    if nodes_per_period < 8:
        raise ValueError("need at least 8 nodes per period")
    eb = ellipticity_bounds(field)
    reports, domains = [], []
    for rho in rho_list:
        res = _sweep_resolution(rho, nodes_per_period, min_nodes_per_unit)
        extent = rho / math.sqrt(eb.alpha) * 1.05 + (stencil_radius + 2) / res
        m = 2 * math.ceil(extent * res) + 1
        if m * m > max_nodes:
            feasible = (math.sqrt(max_nodes) - 1) / 2 / nodes_per_period
            feasible = (feasible - (stencil_radius + 2) / nodes_per_period) * math.sqrt(eb.alpha) / 1.05
            raise SizingError(
                f"rho={rho} needs {m}^2 nodes at {nodes_per_period} nodes per period; "
                f"max feasible rho is about {feasible:.1f}"
            )
        dist = distance_map(field, extent, res, stencil_radius)
        dom = ball_domain(dist, rho)
        rep = generalized_eigs(dom, MetricCoefficients(field, rho), k, bc, rho=rho)
        reports.append(rep)
        domains.append(dom)
        log.info("rho=%g: %d dofs, eigenvalues %s", rho, rep.n_dofs, rep.eigenvalues)
    return (reports, domains) if return_domains else reports


def stable_ball_spectrum(
    tensor: HomogenizedTensor,
    table: NormTable,
    k: int = 1,
    bc: str = "dirichlet",
    h: float = 1.0 / 128,
    refine: int = 8,
) -> SpectrumReport:
    """``lambda_i^infty``: constant coefficients ``q^{ij}`` on the stable unit ball.

    The ball is the spline-refined table boundary (``refine = 1`` meshes the
    raw inscribed polygon).
    """
    if table.dimension != 2:
        raise ValueError("stable-ball spectra are 2D only")
    poly = table.boundary(refine)
    if table.area() <= 0:
        raise DomainError("stable-ball polygon is degenerate")
    dom = polygon_domain(poly, h, center=(0.0, 0.0))
    return generalized_eigs(dom, ConstantCoefficients(tensor.q_up), k, bc, rho=math.inf)


def sweep_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rho", "bc", "i", "lambda_rescaled", "h", "iters", "residual"])
    for rep in reports:
        rho = "inf" if math.isinf(rep.rho) else repr(rep.rho)
        for i, (lam, r) in enumerate(zip(rep.eigenvalues, rep.residuals), start=1):
            w.writerow([rho, rep.bc, i, repr(float(lam)), repr(rep.h), rep.solver_iters, repr(float(r))])
    return buf.getvalue()
