"""Periodic corrector problem and the homogenized (Albanese) tensor.

The Laplace-Beltrami operator in divergence form is ``-w^{-1} div(A grad u)``
with weight ``w = sqrt(det g)`` and conductivity ``A = sqrt(det g) g^{-1}``.
The correctors solve ``div(A (e_k - grad chi_k)) = 0`` on the cell and the
homogenized contravariant tensor is

    q^{ij} = Vol_g^{-1} * mean(A^{ij} - A^{ik} d_k chi_j)

in lattice coordinates, pushed to physical coordinates by the lattice basis.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .metric_field import MetricError, MetricField, torus_volume

__all__ = [
    "ConvergenceError",
    "CorrectorSet",
    "HomogenizedTensor",
    "pcg",
    "conductivity",
    "periodic_operator",
    "corrector_rhs",
    "solve_correctors",
    "homogenized_tensor",
    "homogenize",
    "albanese_dual_norm",
    "tensor_from_matrix",
    "tensor_to_json",
]

log = logging.getLogger(__name__)

CROSS_CHECK_WARN = 1e-2


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final relative residual {residual:.3e})")
        self.residual = residual


def pcg(apply_a, b, diag, tol, maxiter, x0=None, project=None):
    """Jacobi-preconditioned conjugate gradient.

    ``apply_a`` is a callable or sparse matrix. ``project`` (optional) is
    applied to the iterate and the residual; it is used to stay on the
    mean-zero subspace of a singular periodic operator.

    Returns ``(x, relative_residual, iterations)``. Raises
    :class:`ConvergenceError` when ``maxiter`` is reached.
    """
    matvec = apply_a if callable(apply_a) else apply_a.dot
    proj = project if project is not None else (lambda v: v)
    b = proj(np.asarray(b, dtype=float))
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else proj(np.array(x0, dtype=float))
    if bnorm == 0.0:
        return np.zeros_like(b), 0.0, 0
    inv_diag = 1.0 / diag
    r = proj(b - matvec(x))
    z = proj(inv_diag * r)
    p = z.copy()
    rz = r @ z
    rel = np.linalg.norm(r) / bnorm
    it = 0
    while rel > tol:
        if it >= maxiter:
            raise ConvergenceError(f"CG did not converge in {maxiter} iterations", rel)
        ap = matvec(p)
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        r = proj(r)
        rel = np.linalg.norm(r) / bnorm
        z = proj(inv_diag * r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    return proj(x), float(rel), it


def conductivity(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(A, w)`` with ``w = sqrt(det g)`` and ``A = w g^{-1}``."""
    w = np.sqrt(np.linalg.det(g))
    return w[..., None, None] * np.linalg.inv(g), w


def _shift(n_axis: int) -> sp.csr_matrix:
    # (T u)_i = u_{i+1}, periodic
    return sp.csr_matrix(
        (np.ones(n_axis), (np.arange(n_axis), (np.arange(n_axis) + 1) % n_axis)),
        shape=(n_axis, n_axis),
    )


def _axis_op(op1d, axis: int, res: tuple) -> sp.csr_matrix:
    mats = [op1d if a == axis else sp.identity(r, format="csr") for a, r in enumerate(res)]
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out


@dataclass
class _Discretization:
    res: tuple
    diff: list  # forward differences per axis
    avg: list  # (I + T_a) / 2 per axis
    face: list  # harmonic face averages of A_aa per axis
    cross: dict  # (a, b) -> dual-cell average of A_ab
    cell_volume: float


def _discretize(a_nodes: np.ndarray) -> _Discretization:
    res = a_nodes.shape[:-2]
    n = len(res)
    h = [1.0 / r for r in res]
    diff, avg, shifts = [], [], []
    for ax, r in enumerate(res):
        t = _shift(r)
        shifts.append(_axis_op(t, ax, res))
        diff.append(_axis_op((t - sp.identity(r)) / h[ax], ax, res))
        avg.append(_axis_op((t + sp.identity(r)) * 0.5, ax, res))
    face = []
    for ax in range(n):
        aa = a_nodes[..., ax, ax].ravel()
        face.append(2.0 * aa * (shifts[ax] @ aa) / (aa + shifts[ax] @ aa))
    cross = {}
    for a in range(n):
        for b in range(a + 1, n):
            c = a_nodes[..., a, b].ravel()
            cross[(a, b)] = avg[a] @ (avg[b] @ c)
    return _Discretization(res, diff, avg, face, cross, float(np.prod(h)))


def _stiffness(disc: _Discretization) -> sp.csr_matrix:
    n = len(disc.res)
    k = None
    for a in range(n):
        term = disc.diff[a].T @ sp.diags(disc.face[a]) @ disc.diff[a]
        k = term if k is None else k + term
    for (a, b), c in disc.cross.items():
        ga = disc.avg[b] @ disc.diff[a]
        gb = disc.avg[a] @ disc.diff[b]
        cd = sp.diags(c)
        k = k + ga.T @ cd @ gb + gb.T @ cd @ ga
    return (k * disc.cell_volume).tocsr()


def _rhs(disc: _Discretization, k: int) -> np.ndarray:
    """Discrete ``v -> B(x_k, v)`` where ``x_k`` has unit slope along axis k."""
    out = disc.diff[k].T @ disc.face[k]
    for (a, b), c in disc.cross.items():
        ga = disc.avg[b] @ disc.diff[a]
        gb = disc.avg[a] @ disc.diff[b]
        if a == k:
            out = out + gb.T @ c
        if b == k:
            out = out + ga.T @ c
    return out * disc.cell_volume


def periodic_operator(a_nodes: np.ndarray) -> sp.csr_matrix:
    """Symmetric periodic finite-difference matrix of ``-div(A grad)``.

    Diagonal fluxes use harmonic face averages of ``A_aa``; off-diagonal
    terms use ``A_ab`` averaged onto dual cells. Rows are scaled by the
    cell volume so that ``u @ K @ v`` approximates ``int A grad u . grad v``.
    """
    return _stiffness(_discretize(a_nodes))


def corrector_rhs(a_nodes: np.ndarray, k: int) -> np.ndarray:
    return _rhs(_discretize(a_nodes), k)


@dataclass(frozen=True)
class CorrectorSet:
    correctors: np.ndarray  # (n, *res), lattice coordinates
    residuals: tuple
    means: tuple
    iterations: tuple
    tol: float
    field_id: int = 0

    @property
    def dimension(self) -> int:
        return self.correctors.shape[0]


@dataclass(frozen=True)
class HomogenizedTensor:
    q_up: np.ndarray
    q_down: np.ndarray
    albanese_volume: float
    cross_check_gap: float
    torus_volume: float = float("nan")
    q_second: np.ndarray | None = None
    resolution: tuple = ()
    residuals: tuple = ()
    warnings: tuple = field(default_factory=tuple)

    @property
    def dimension(self) -> int:
        return self.q_up.shape[0]


def solve_correctors(field: MetricField, tol: float = 1e-10, maxiter: int | None = None) -> CorrectorSet:
    """Periodic correctors ``chi_k`` (lattice coordinates, mean zero)."""
    if not 0 < tol <= 1e-4:
        raise ValueError(f"tol must lie in (0, 1e-4], got {tol}")
    a_nodes, _ = conductivity(field.lattice_samples())
    disc = _discretize(a_nodes)
    kmat = _stiffness(disc)
    n_tot = kmat.shape[0]
    if maxiter is None:
        # 20 sqrt(N) is the nominal cap; floor keeps coarse grids from tripping it
        maxiter = max(20 * int(np.sqrt(n_tot)), 2000)
    diag = kmat.diagonal()

    def project(v):
        return v - v.mean()

    chis, res, means, its = [], [], [], []
    for k in range(field.dimension):
        rhs = _rhs(disc, k)
        chi, rel, it = pcg(kmat, rhs, diag, tol, maxiter, project=project)
        chis.append(chi.reshape(field.resolution))
        res.append(rel)
        means.append(float(chi.mean()))
        its.append(it)
        log.debug("corrector %d: %d CG iterations, residual %.2e", k, it, rel)
    return CorrectorSet(np.array(chis), tuple(res), tuple(means), tuple(its), tol, id(field))


def _centred_gradient(u: np.ndarray) -> np.ndarray:
    res = u.shape
    return np.stack(
        [(np.roll(u, -1, axis=a) - np.roll(u, 1, axis=a)) * (res[a] / 2.0) for a in range(u.ndim)],
        axis=-1,
    )


def homogenized_tensor(
    field: MetricField, correctors: CorrectorSet, gap_warn: float = CROSS_CHECK_WARN
) -> HomogenizedTensor:
    """Homogenized tensor from solved correctors, by two independent formulas.

    The primary value is the flux average ``mean(A (e_j - grad chi_j))_i``;
    the cross-check is the Gram matrix of the harmonic coordinate
    differentials ``mean(A grad eta_i . grad eta_j)``. Both use nodal
    quadrature and centred differences.
    """
    n = field.dimension
    if correctors.correctors.shape != (n,) + field.resolution:
        raise MetricError("correctors were solved on a different grid")
    a_nodes, w = conductivity(field.lattice_samples())
    vol_lat = float(w.mean())  # Vol_g; the lattice cell has unit volume
    grads = [_centred_gradient(c) for c in correctors.correctors]
    # d eta_j = e_j - grad chi_j
    deta = [np.eye(n)[j] - grads[j] for j in range(n)]
    q1 = np.empty((n, n))
    q2 = np.empty((n, n))
    for j in range(n):
        flux = np.einsum("...ik,...k->...i", a_nodes, deta[j])
        for i in range(n):
            q1[i, j] = flux[..., i].mean() / vol_lat
            q2[i, j] = np.einsum("...i,...i->...", flux, deta[i]).mean() / vol_lat
    b = field.lattice.basis
    q1 = b @ q1 @ b.T
    q2 = b @ q2 @ b.T
    gap = float(np.abs(q1 - q2).max())
    q_up = 0.5 * (q1 + q1.T)
    return tensor_from_matrix(
        q_up,
        covolume=field.lattice.covolume,
        cross_check_gap=gap,
        volume=torus_volume(field),
        q_second=0.5 * (q2 + q2.T),
        resolution=field.resolution,
        residuals=correctors.residuals,
        gap_warn=gap_warn,
    )


def tensor_from_matrix(
    q_up,
    covolume: float = 1.0,
    cross_check_gap: float = 0.0,
    volume: float = float("nan"),
    q_second=None,
    resolution=(),
    residuals=(),
    gap_warn: float = CROSS_CHECK_WARN,
) -> HomogenizedTensor:
    q_up = np.array(q_up, dtype=float)
    q_up = 0.5 * (q_up + q_up.T)
    eig = np.linalg.eigvalsh(q_up)
    if eig[0] <= 0:
        raise MetricError(f"homogenized tensor is not SPD (eigenvalues {eig}); corrector under-resolved?")
    q_down = np.linalg.inv(q_up)
    q_down = 0.5 * (q_down + q_down.T)
    warnings = []
    if cross_check_gap > gap_warn:
        warnings.append(f"cross-check gap {cross_check_gap:.3e} exceeds {gap_warn:.1e}")
        log.warning(warnings[-1])
    return HomogenizedTensor(
        q_up=q_up,
        q_down=q_down,
        albanese_volume=float(np.sqrt(np.linalg.det(q_down)) * covolume),
        cross_check_gap=float(cross_check_gap),
        torus_volume=float(volume),
        q_second=q_second,
        resolution=tuple(resolution),
        residuals=tuple(residuals),
        warnings=tuple(warnings),
    )


def homogenize(field: MetricField, tol: float = 1e-10) -> tuple[CorrectorSet, HomogenizedTensor]:
    chi = solve_correctors(field, tol)
    return chi, homogenized_tensor(field, chi)


def albanese_dual_norm(tensor: HomogenizedTensor, vector) -> float | np.ndarray:
    """``sqrt(q_ij xi^i xi^j)``; vectorized over leading axes of ``vector``."""
    v = np.asarray(vector, dtype=float)
    val = np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", v, tensor.q_down, v), 0.0))
    return float(val) if val.ndim == 0 else val


def tensor_to_json(tensor: HomogenizedTensor, correctors: CorrectorSet | None = None) -> str:
    doc = {
        "q_up": tensor.q_up.tolist(),
        "q_down": tensor.q_down.tolist(),
        "albanese_volume": tensor.albanese_volume,
        "cross_check_gap": tensor.cross_check_gap,
        "torus_volume": tensor.torus_volume,
        "residuals": list(correctors.residuals if correctors is not None else tensor.residuals),
        "resolution": list(tensor.resolution),
        "warnings": list(tensor.warnings),
    }
    return json.dumps(doc, indent=2, sort_keys=True)
