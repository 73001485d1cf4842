"""Periodic Riemannian metrics on the n-torus.

A metric is stored as SPD matrix samples on the nodes of the fundamental
cell ``[0, 1)^n`` in lattice coordinates. The lattice basis maps lattice
coordinates to physical space; samples are the metric coefficients in
physical coordinates at the physical node positions.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

__all__ = [
    "MetricError",
    "GridFileError",
    "LatticeBasis",
    "FourierSeries",
    "MetricField",
    "EllipticityBounds",
    "make_metric",
    "sample_metric",
    "torus_volume",
    "ellipticity_bounds",
    "read_grid_file",
    "write_grid_file",
]

MIN_RESOLUTION = 8
PROFILE_FLOOR = 1e-10


class MetricError(ValueError):
    """Invalid metric data (non-SPD sample, degenerate profile, bad family)."""


class GridFileError(MetricError):
    """Malformed grid metric file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class LatticeBasis:
    """Lattice generators as the columns of ``basis``."""

    basis: np.ndarray

    def __post_init__(self):
        b = np.array(self.basis, dtype=float)
        if b.ndim != 2 or b.shape[0] != b.shape[1] or b.shape[0] not in (2, 3):
            raise MetricError(f"lattice basis must be 2x2 or 3x3, got shape {b.shape}")
        if abs(np.linalg.det(b)) <= 1e-14:
            raise MetricError("lattice basis is singular")
        b.setflags(write=False)
        object.__setattr__(self, "basis", b)

    @classmethod
    def identity(cls, n: int) -> "LatticeBasis":
        return cls(np.eye(n))

    @property
    def dimension(self) -> int:
        return self.basis.shape[0]

    @property
    def covolume(self) -> float:
        return float(abs(np.linalg.det(self.basis)))

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.basis)

    def to_lattice(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.inverse.T

    def to_physical(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords, dtype=float) @ self.basis.T


@dataclass(frozen=True)
class FourierSeries:
    """Finite real Fourier series on the unit cell.

    Each term is ``coef * prod_a f_a(2 pi k_a y_a)`` with ``f_a`` either
    ``cos`` or ``sin``.
    """

    const: float = 0.0
    terms: tuple = ()

    @classmethod
    def from_config(cls, cfg: Any, ndim: int) -> "FourierSeries":
        if isinstance(cfg, FourierSeries):
            return cfg
        if isinstance(cfg, (int, float)):
            return cls(float(cfg), ())
        if not isinstance(cfg, Mapping):
            raise MetricError(f"Fourier series must be a table, got {cfg!r}")
        terms = []
        for t in cfg.get("terms", []):
            k = t.get("k", [0] * ndim)
            k = [k] if isinstance(k, (int, float)) else list(k)
            funcs = t.get("funcs", ["cos"] * ndim)
            funcs = [funcs] if isinstance(funcs, str) else list(funcs)
            if len(k) != ndim or len(funcs) != ndim:
                raise MetricError(f"term {t!r} does not have {ndim} modes")
            if any(f not in ("cos", "sin") for f in funcs):
                raise MetricError(f"term {t!r}: funcs must be 'cos' or 'sin'")
            terms.append((float(t["coef"]), tuple(int(v) for v in k), tuple(funcs)))
        return cls(float(cfg.get("const", 0.0)), tuple(terms))

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = np.full(y.shape[:-1], self.const)
        for coef, ks, funcs in self.terms:
            val = np.full(y.shape[:-1], coef)
            for a, (k, f) in enumerate(zip(ks, funcs)):
                arg = 2 * np.pi * k * y[..., a]
                val = val * (np.cos(arg) if f == "cos" else np.sin(arg))
            out = out + val
        return out

    def to_config(self) -> dict:
        return {
            "const": self.const,
            "terms": [{"coef": c, "k": list(k), "funcs": list(f)} for c, k, f in self.terms],
        }


@dataclass(frozen=True)
class EllipticityBounds:
    alpha: float
    beta: float


@dataclass(frozen=True, eq=False)
class MetricField:
    """Node samples of a periodic metric.

    ``samples`` has shape ``(*resolution, n, n)``; node ``i`` sits at lattice
    coordinate ``i / resolution``.
    """

    lattice: LatticeBasis
    resolution: tuple
    samples: np.ndarray
    family: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        n = self.lattice.dimension
        res = tuple(int(r) for r in self.resolution)
        if len(res) != n or s.shape != res + (n, n):
            raise MetricError(f"samples shape {s.shape} does not match resolution {res} and n={n}")
        if min(res) < MIN_RESOLUTION:
            raise MetricError(f"resolution must be >= {MIN_RESOLUTION} per axis, got {res}")
        s = 0.5 * (s + np.swapaxes(s, -1, -2))
        _check_spd(s)
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "resolution", res)

    @property
    def dimension(self) -> int:
        return self.lattice.dimension

    def node_coords(self) -> np.ndarray:
        """Lattice coordinates of the nodes, shape ``(*resolution, n)``."""
        axes = [np.arange(r) / r for r in self.resolution]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def lattice_samples(self) -> np.ndarray:
        """Metric coefficients expressed in lattice coordinates, ``B^T g B``."""
        b = self.lattice.basis
        return np.einsum("ai,...ab,bj->...ij", b, self.samples, b)

    def sqrt_det(self) -> np.ndarray:
        return np.sqrt(np.linalg.det(self.samples))


def _check_spd(samples: np.ndarray) -> None:
    n = samples.shape[-1]
    flat = samples.reshape(-1, n, n)
    eig = np.linalg.eigvalsh(flat)
    bad = np.flatnonzero(~(eig[:, 0] > 0) | ~np.isfinite(eig).all(axis=1))
    if bad.size:
        node = np.unravel_index(bad[0], samples.shape[:-2])
        raise MetricError(
            f"sample at node {tuple(int(i) for i in node)} is not SPD "
            f"(min eigenvalue {eig[bad[0], 0]:.3e})"
        )


def _family_samples(kind: str, spec: Mapping, y: np.ndarray, n: int) -> np.ndarray:
    shape = y.shape[:-1]
    if kind == "flat":
        g = np.array(spec.get("G", np.eye(n)), dtype=float)
        if g.shape != (n, n):
            raise MetricError(f"flat metric G must be {n}x{n}")
        return np.broadcast_to(g, shape + (n, n)).copy()
    if kind == "conformal":
        if n != 2:
            raise MetricError("conformal family is defined for n=2 only")
        if "factor" in spec:
            factor = FourierSeries.from_config(spec["factor"], n)(y)
        elif "phi" in spec:
            factor = np.exp(2.0 * FourierSeries.from_config(spec["phi"], n)(y))
        else:
            raise MetricError("conformal family needs 'phi' or 'factor'")
        if factor.min() <= PROFILE_FLOOR:
            idx = np.unravel_index(np.argmin(factor), shape)
            raise MetricError(f"conformal factor not positive at node {tuple(int(i) for i in idx)}")
        return factor[..., None, None] * np.eye(n)
    if kind == "laminate":
        axis = int(spec.get("axis", 1)) - 1
        if not 0 <= axis < n:
            raise MetricError(f"laminate axis must be in 1..{n}")
        yk = y[..., axis : axis + 1]
        if "profile" in spec:
            a = FourierSeries.from_config(spec["profile"], 1)(yk)
        elif "log_profile" in spec:
            a = np.exp(FourierSeries.from_config(spec["log_profile"], 1)(yk))
        else:
            raise MetricError("laminate family needs 'profile' or 'log_profile'")
        if a.min() <= PROFILE_FLOOR:
            idx = np.unravel_index(np.argmin(a), shape)
            raise MetricError(f"laminate profile touches 0 at node {tuple(int(i) for i in idx)}")
        g = np.broadcast_to(np.eye(n), shape + (n, n)).copy()
        g[..., axis, axis] = a
        return g
    raise MetricError(f"unknown metric family {kind!r}")


def make_metric(spec: Mapping, resolution: Sequence[int] | int | None = None) -> MetricField:
    """Build a metric field from a family descriptor.

    ``spec["family"]`` is one of ``flat``, ``conformal``, ``laminate`` or
    ``grid``. Analytic families accept ``n`` (default 2), an optional
    ``basis`` and a resolution (per-axis list or a single int).
    """
    kind = spec.get("family")
    if kind == "grid":
        return read_grid_file(spec["path"])
    n = int(spec.get("n", 2))
    lattice = LatticeBasis(spec["basis"]) if "basis" in spec else LatticeBasis.identity(n)
    n = lattice.dimension
    if resolution is None:
        resolution = spec.get("resolution", 64)
    res = (int(resolution),) * n if np.isscalar(resolution) else tuple(int(r) for r in resolution)
    if len(res) != n:
        raise MetricError(f"resolution {res} does not match dimension {n}")
    if min(res) < MIN_RESOLUTION:
        raise MetricError(f"resolution must be >= {MIN_RESOLUTION} per axis, got {res}")
    axes = [np.arange(r) / r for r in res]
    y = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    samples = _family_samples(kind, spec, y, n)
    desc = _plain(dict(spec))
    desc["resolution"] = list(res)
    return MetricField(lattice, res, samples, family=desc)


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, FourierSeries):
        return obj.to_config()
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def sample_metric(field: MetricField, point: np.ndarray) -> np.ndarray:
    """Periodic multilinear interpolation of the metric at physical points.

    ``point`` may have any leading shape; the result has shape
    ``point.shape[:-1] + (n, n)``.
    """
    point = np.asarray(point, dtype=float)
    n = field.dimension
    res = np.array(field.resolution)
    y = field.lattice.to_lattice(point) * res
    base = np.floor(y)
    frac = y - base
    base = base.astype(np.int64)
    out = np.zeros(point.shape[:-1] + (n, n))
    for corner in np.ndindex(*(2,) * n):
        c = np.array(corner)
        idx = np.mod(base + c, res)
        w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=-1)
        out += w[..., None, None] * field.samples[tuple(idx[..., a] for a in range(n))]
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def torus_volume(field: MetricField) -> float:
    """Riemannian volume of the torus (midpoint rule on the periodic grid)."""
    return float(field.sqrt_det().mean() * field.lattice.covolume)


def ellipticity_bounds(field: MetricField) -> EllipticityBounds:
    n = field.dimension
    eig = np.linalg.eigvalsh(field.samples.reshape(-1, n, n))
    return EllipticityBounds(float(eig[:, 0].min()), float(eig[:, -1].max()))


# grid metric file: text header line then little-endian float64 samples

_HEADER = re.compile(
    r"^torusmetric v1 n=(?P<n>[23]) N=(?P<N>[0-9,]+) basis=(?P<basis>[-+0-9.eE,]+)$"
)


def _upper_indices(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i, n)]


def write_grid_file(field: MetricField, path) -> None:
    n = field.dimension
    header = "torusmetric v1 n={} N={} basis={}\n".format(
        n,
        ",".join(str(r) for r in field.resolution),
        ",".join(repr(float(v)) for v in field.lattice.basis.ravel()),
    )
    upper = _upper_indices(n)
    data = np.stack([field.samples[..., i, j] for i, j in upper], axis=-1)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.astype("<f8").tobytes(order="C"))


def read_grid_file(path) -> MetricField:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise GridFileError("missing header line terminator", len(raw))
    try:
        header = raw[:nl].decode("ascii")
    except UnicodeDecodeError as exc:
        raise GridFileError("header is not ASCII", exc.start) from None
    m = _HEADER.match(header)
    if m is None:
        raise GridFileError(f"malformed header {header[:80]!r}", 0)
    n = int(m["n"])
    try:
        res = tuple(int(v) for v in m["N"].split(","))
        basis = np.array([float(v) for v in m["basis"].split(",")])
    except ValueError:
        raise GridFileError("non-numeric header field", raw.find(b"N=")) from None
    if len(res) != n:
        raise GridFileError(f"N lists {len(res)} axes for n={n}", raw.find(b"N="))
    if basis.size != n * n:
        raise GridFileError(f"basis has {basis.size} entries, expected {n * n}", raw.find(b"basis="))
    upper = _upper_indices(n)
    expected = int(np.prod(res)) * len(upper) * 8
    body = raw[nl + 1 :]
    if len(body) != expected:
        raise GridFileError(
            f"sample block has {len(body)} bytes, expected {expected}", nl + 1 + min(len(body), expected)
        )
    data = np.frombuffer(body, dtype="<f8").reshape(res + (len(upper),))
    if not np.isfinite(data).all():
        bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
        raise GridFileError("non-finite sample value", nl + 1 + 8 * bad)
    samples = np.empty(res + (n, n))
    for c, (i, j) in enumerate(upper):
        samples[..., i, j] = data[..., c]
        samples[..., j, i] = data[..., c]
    return MetricField(
        LatticeBasis(basis.reshape(n, n)),
        res,
        samples,
        family={"family": "grid", "path": str(path), "resolution": list(res)},
    )
