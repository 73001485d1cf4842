"""Asymptotic volume and long-time heat-kernel comparison.

The heat equation ``du/dt + Delta_g u = 0`` is stepped with implicit Euler,

    (M + dt K) u_{j+1} = M u_j,

where ``K`` is the periodic divergence-form matrix of the cell solver on a
large box and ``M = diag(sqrt(det g) h^n)``. Since ``K^T 1 = 0`` the
``mu_g``-mass ``1^T M u`` is conserved up to the CG residual.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .cell_solver import HomogenizedTensor, conductivity, pcg, periodic_operator
from .geodesic_distance import DistanceField, NormTable, SizingError
from .metric_field import MetricField, ellipticity_bounds, sample_metric, torus_volume
from .norm_analysis import unit_ball_volume

__all__ = [
    "VolumeGrowthSeries",
    "AsvolReport",
    "HeatComparison",
    "MassError",
    "volume_growth",
    "asvol_report",
    "heat_compare",
]

log = logging.getLogger(__name__)

MASS_TOL = 1e-6
TAIL_MASS = 1e-8
VOLUME_TOL = 0.03


class MassError(RuntimeError):
    pass


@dataclass(frozen=True)
class VolumeGrowthSeries:
    rho: np.ndarray
    v: np.ndarray
    asvol: float
    c: float
    residual: float
    h: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rho", "v"])
        for r, v in zip(self.rho, self.v):
            w.writerow([repr(float(r)), repr(float(v))])
        return buf.getvalue()


def volume_growth(field: MetricField, dist: DistanceField, rho_list) -> VolumeGrowthSeries:
    """``v(rho) = Vol_g(B_g(rho)) / rho^n`` by node sums over the label field.

    With two or more radii the series is extrapolated by ``v = Asvol + c/rho``;
    with one radius ``asvol`` is the raw value and ``c`` is nan.
    """
    rhos = np.asarray(sorted(float(r) for r in rho_list))
    if rhos.size == 0:
        raise ValueError("rho_list is empty")
    n = dist.dimension
    vals = dist.values
    edge = min(float(np.take(vals, [0, -1], axis=a).min()) for a in range(n))
    if edge <= rhos[-1]:
        raise SizingError(f"metric ball of radius {rhos[-1]} reaches the distance-map boundary (edge label {edge:.3g})")
    pts = dist.coords().reshape(-1, n)
    _, w = conductivity(sample_metric(field, pts))
    cell = dist.h**n
    d = dist.values.ravel()
    order = np.argsort(d, kind="stable")
    cum = np.cumsum(w[order]) * cell
    idx = np.searchsorted(d[order], rhos, side="right")
    vol = np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)
    v = vol / rhos**n
    if rhos.size >= 2:
        design = np.stack([np.ones_like(rhos), 1.0 / rhos], axis=1)
        coef, *_ = np.linalg.lstsq(design, v, rcond=None)
        resid = float(np.max(np.abs(design @ coef - v)))
        asvol, c = float(coef[0]), float(coef[1])
    else:
        asvol, c, resid = float(v[0]), float("nan"), float("nan")
    return VolumeGrowthSeries(rhos, v, asvol, c, resid, dist.h)


@dataclass(frozen=True)
class AsvolReport:
    asvol: float
    bound: float
    slack: float
    bound_2d: float | None
    asvol_cross: float | None
    cross_gap: float | None
    flat_consistent: bool
    tolerance: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


def asvol_report(
    field: MetricField,
    tensor: HomogenizedTensor,
    series: VolumeGrowthSeries,
    table: NormTable | None = None,
    tol: float = VOLUME_TOL,
) -> AsvolReport:
    """Compare the asymptotic volume with ``Vol_g * omega_n / Vol_Al``.

    ``asvol_cross`` is ``mu_inf(B_inf(1))``, the area of the spline-refined
    stable ball times the mean density ``Vol_g / covolume``.
    """
    n = field.dimension
    vol = torus_volume(field)
    bound = vol * unit_ball_volume(n) / tensor.albanese_volume
    cross = gap = None
    if table is not None and table.dimension == 2:
        cross = vol / field.lattice.covolume * table.area(refine=8)
        gap = abs(cross - series.asvol) / series.asvol
    slack = series.asvol - bound
    return AsvolReport(
        asvol=float(series.asvol),
        bound=float(bound),
        slack=float(slack),
        bound_2d=math.pi if n == 2 else None,
        asvol_cross=None if cross is None else float(cross),
        cross_gap=None if gap is None else float(gap),
        flat_consistent=bool(abs(slack) <= tol * bound),
        tolerance=float(tol),
    )


@dataclass(frozen=True)
class HeatComparison:
    t: np.ndarray
    delta: np.ndarray
    lp1: np.ndarray
    lp2: np.ndarray
    a: float
    mass_drift: float
    min_value: float
    steps: int
    h: float
    box: float
    disc_bound: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "delta", "lp1", "lp2"])
        for row in zip(self.t, self.delta, self.lp1, self.lp2):
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()


def _box_half_width(t_max: float, alpha: float) -> float:
    # Gaussian tail: mass beyond R is below TAIL_MASS when the diffusion is at most 1/alpha
    return math.sqrt(4.0 * t_max * math.log(1.0 / TAIL_MASS) / alpha) + 1.0


def _discretization_bound(t, dt, h, n):
    """Twice the leading truncation error of the scheme at ``x = 0``, scaled like ``delta``.

    Implicit Euler contributes ``(t dt / 2) d_t^2 G(t, 0)`` for the Gaussian
    ``G(t, 0) = (4 pi t)^{-n/2}``; the O(h^2) spatial term is added with the
    same weight.
    """
    t = np.asarray(t, dtype=float)
    lead = (n / 2) * (n / 2 + 1) / (2 * (4 * math.pi) ** (n / 2))
    return 2.0 * lead * (dt + h * h) / t


def heat_compare(
    field: MetricField,
    tensor: HomogenizedTensor,
    t_list=(1.0, 2.0, 4.0, 8.0),
    a: float = 1.0,
    nodes_per_period: int = 8,
    dt_max: float | None = None,
    growth: float = 1.2,
    tol: float = 1e-10,
) -> HeatComparison:
    """Heat kernel from the origin against the homogenized Gaussian.

    ``k_inf(t, 0, x) = (4 pi t)^{-n/2} det(q_up)^{-1/2} exp(-q_ij x^i x^j / 4t)``
    integrates to one against Lebesgue measure; the discrete solution has
    unit ``mu_g``-mass, so it is compared with ``k_inf * covolume / Vol_g``.
    """
    t_list = np.asarray(t_list, dtype=float)
    if t_list.size == 0 or np.any(np.diff(t_list) <= 0) or t_list[0] <= 0:
        raise ValueError("t_list must be positive and increasing")
    n = field.dimension
    basis = field.lattice.basis
    if not np.allclose(basis, np.diag(np.diag(basis))):
        raise ValueError("heat_compare needs a rectangular lattice")
    periods = np.diag(basis)
    eb = ellipticity_bounds(field)
    half = _box_half_width(t_list[-1], eb.alpha)
    counts = [int(math.ceil(2 * half / p)) for p in periods]
    res = tuple(c * nodes_per_period for c in counts)
    side = np.array([c * p for c, p in zip(counts, periods)])
    h = side / np.array(res)
    axes = [-side[i] / 2 + h[i] * np.arange(res[i]) for i in range(n)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    a_nodes, w = conductivity(sample_metric(field, pts))
    # periodic_operator assumes unit side per axis; rescale to the box
    scale = np.diag(1.0 / side)
    a_unit = np.einsum("ia,...ab,jb->...ij", scale, a_nodes, scale) * float(np.prod(side))
    kmat = periodic_operator(a_unit)
    cell = float(np.prod(h))
    mass = (w * cell).ravel()
    origin = tuple(r // 2 for r in res)
    flat_origin = int(np.ravel_multi_index(origin, res))
    u = np.zeros(mass.size)
    u[flat_origin] = 1.0 / mass[flat_origin]
    m0 = float(mass @ u)

    vol = torus_volume(field) / field.lattice.covolume
    qd = tensor.q_down
    c0 = 1.0 / math.sqrt(np.linalg.det(tensor.q_up))
    x = pts.reshape(-1, n)
    quad = np.einsum("ti,ij,tj->t", x, qd, x)
    r2 = np.einsum("ti,ti->t", x, x)

    hmin = float(h.min())
    dt = 0.25 * hmin**2
    dt_cap = hmin if dt_max is None else dt_max
    t = 0.0
    steps = 0
    drift = 0.0
    umin = 0.0
    deltas, l1s, l2s = [], [], []
    kdiag = kmat.diagonal()
    for target in t_list:
        while t < target - 1e-12:
            step = min(dt, target - t)
            op = sp.diags(mass) + step * kmat
            rhs = mass * u
            u, _, _ = pcg(op, rhs, mass + step * kdiag, tol, 10_000, x0=u)
            t += step
            steps += 1
            m = float(mass @ u)
            drift = max(drift, abs(m - m0))
            if abs(m - m0) > MASS_TOL:
                raise MassError(f"mass drift {m - m0:.3e} at t={t:.4g} after {steps} steps (dt={step:.3e})")
            umin = min(umin, float(u.min()))
            dt = min(dt * growth, dt_cap)
        k_inf = c0 / (4 * math.pi * t) ** (n / 2) * np.exp(-quad / (4 * t)) / vol
        diff = u - k_inf
        near = r2 <= a * t
        deltas.append(t ** (n / 2) * float(np.abs(diff[near]).max()))
        l1s.append(float(np.abs(diff) @ mass))
        l2s.append(t ** (n / 4) * math.sqrt(float(diff**2 @ mass)))
        log.info("t=%g delta=%.3e after %d steps", t, deltas[-1], steps)
    return HeatComparison(
        t=t_list,
        delta=np.array(deltas),
        lp1=np.array(l1s),
        lp2=np.array(l2s),
        a=float(a),
        mass_drift=float(drift),
        min_value=float(umin),
        steps=steps,
        h=hmin,
        box=float(side.max()),
        disc_bound=_discretization_bound(t_list, dt_cap, hmin, n),
        meta={"resolution": list(res), "dt_max": dt_cap},
    )
