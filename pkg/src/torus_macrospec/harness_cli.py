"""Config-driven pipeline, convergence report, flatness audit and plots.

Stages and their inputs::

    correctors   -
    stable_norm  -
    spectra      correctors, stable_norm
    faber_krahn  stable_norm
    asvol        correctors, stable_norm
    heat         correctors
    audit        correctors, stable_norm, spectra, asvol

Every stage writes ``<stage>.json`` (tagged with the config hash) plus its
CSV artifacts; a later run with the same hash reloads finished stages
instead of recomputing them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .asymptotics import MassError, asvol_report, heat_compare, volume_growth
from .ball_spectra import EigenError, rescaled_spectrum_sweep, stable_ball_spectrum, sweep_csv
from .cell_solver import (
    ConvergenceError,
    HomogenizedTensor,
    albanese_dual_norm,
    homogenize,
    tensor_from_matrix,
    tensor_to_json,
)
from .geodesic_distance import NormTable, SizingError, distance_map, stable_ball_table, stencil_error_bound
from .meshing import DomainError
from .metric_field import MetricError, MetricField, ellipticity_bounds, make_metric
from .norm_analysis import ConvexDomain, NormSpec, faber_krahn_report, lambda1_norm, lambda_euclidean

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "stage_closure",
    "run",
    "flatness_audit",
    "audit_directory",
    "emit_plots",
    "sweep_verdict",
    "STAGES",
]

log = logging.getLogger(__name__)

STAGES = ("correctors", "stable_norm", "spectra", "faber_krahn", "asvol", "heat", "audit")
DEPENDS = {
    "correctors": (),
    "stable_norm": (),
    "spectra": ("correctors", "stable_norm"),
    "faber_krahn": ("stable_norm",),
    "asvol": ("correctors", "stable_norm"),
    "heat": ("correctors",),
    "audit": ("correctors", "stable_norm", "spectra", "asvol"),
}
NUMERIC_ERRORS = (
    ConvergenceError,
    EigenError,
    SizingError,
    DomainError,
    MassError,
    MetricError,
    np.linalg.LinAlgError,
    FloatingPointError,
    ArithmeticError,
    RuntimeError,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INCONCLUSIVE = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- config


@dataclass(frozen=True)
class StableNormConfig:
    directions: int = 64
    rho_list: tuple = (8.0, 16.0, 32.0)
    nodes_per_unit: int = 8
    stencil_radius: int = 3


@dataclass(frozen=True)
class SpectraConfig:
    rho_list: tuple = (4.0, 8.0, 16.0)
    k: int = 2
    bc: tuple = ("dirichlet", "neumann")
    stable_h: float = 1.0 / 128
    nodes_per_period: int = 8
    min_nodes_per_unit: int = 64


@dataclass(frozen=True)
class FaberKrahnConfig:
    resolution: int = 48


@dataclass(frozen=True)
class AsvolConfig:
    rho_list: tuple = (8.0, 16.0, 32.0)


@dataclass(frozen=True)
class HeatConfig:
    t_list: tuple = (1.0, 2.0, 4.0, 8.0)
    a: float = 1.0
    nodes_per_period: int = 8


@dataclass(frozen=True)
class Tolerances:
    cg: float = 1e-10
    spectral_rel: float = 0.05
    volume_rel: float = 0.03
    norm_factor: float = 3.0
    sweep_step_slack: float = 0.10
    final_gap: float = 0.05
    neumann_zero: float = 1e-8


@dataclass(frozen=True)
class RunConfig:
    metric: dict
    stages: tuple = STAGES
    output: str = "runs/out"
    stable_norm: StableNormConfig = StableNormConfig()
    spectra: SpectraConfig = SpectraConfig()
    faber_krahn: FaberKrahnConfig = FaberKrahnConfig()
    asvol: AsvolConfig = AsvolConfig()
    heat: HeatConfig = HeatConfig()
    tolerances: Tolerances = Tolerances()
    source: str = ""

    def hashable(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("output")
        d.pop("source")
        d.pop("stages")
        return _jsonable(d)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.hashable(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {
    "stable_norm": StableNormConfig,
    "spectra": SpectraConfig,
    "faber_krahn": FaberKrahnConfig,
    "asvol": AsvolConfig,
    "heat": HeatConfig,
    "tolerances": Tolerances,
}


def _coerce(cls, section: str, table: Mapping) -> Any:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in table.items():
        if key not in fields:
            raise ConfigError(f"[{section}] unknown key {key!r} (allowed: {', '.join(sorted(fields))})")
        default = fields[key].default
        try:
            if isinstance(default, tuple):
                val = tuple(val) if isinstance(val, (list, tuple)) else (val,)
                if default and isinstance(default[0], float):
                    val = tuple(float(v) for v in val)
                elif default and isinstance(default[0], str):
                    val = tuple(str(v).lower() for v in val)
            elif isinstance(default, bool):
                val = bool(val)
            elif isinstance(default, int):
                if isinstance(val, float) and not val.is_integer():
                    raise TypeError
                val = int(val)
            elif isinstance(default, float):
                val = float(val)
        except (TypeError, ValueError):
            raise ConfigError(f"[{section}] key {key!r}: cannot use value {val!r}") from None
        kwargs[key] = val
    return cls(**kwargs)


def stage_closure(stages) -> tuple:
    """Requested stages plus their dependencies, in pipeline order."""
    want = set()

    def add(s):
        if s not in DEPENDS:
            raise ConfigError(f"unknown stage {s!r} (known: {', '.join(STAGES)})")
        if s in want:
            return
        want.add(s)
        for d in DEPENDS[s]:
            add(d)

    for s in stages:
        add(s)
    return tuple(s for s in STAGES if s in want)


def parse_config(doc: Mapping, source: str = "<memory>") -> RunConfig:
    doc = dict(doc)
    if "metric" not in doc or not isinstance(doc["metric"], Mapping):
        raise ConfigError(f"{source}: missing [metric] section")
    metric = _jsonable(doc.pop("metric"))
    if "family" not in metric:
        raise ConfigError(f"{source}: [metric] needs a 'family' key")
    run_tab = dict(doc.pop("run", {}))
    stages = run_tab.pop("stages", list(STAGES))
    output = str(run_tab.pop("output", "runs/" + Path(source).stem))
    if run_tab:
        raise ConfigError(f"{source}: [run] unknown keys {sorted(run_tab)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in doc:
            tab = doc.pop(name)
            if not isinstance(tab, Mapping):
                raise ConfigError(f"{source}: [{name}] must be a table")
            kwargs[name] = _coerce(cls, name, tab)
    if doc:
        raise ConfigError(f"{source}: unknown sections {sorted(doc)}")
    try:
        closure = stage_closure(stages)
    except ConfigError as exc:
        raise ConfigError(f"{source}: [run] stages: {exc}") from None
    cfg = RunConfig(metric=metric, stages=closure, output=output, source=source, **kwargs)
    _validate(cfg, source)
    return cfg


def _validate(cfg: RunConfig, source: str) -> None:
    sp = cfg.spectra
    if not 1 <= sp.k <= 12:
        raise ConfigError(f"{source}: [spectra] k must be in 1..12")
    for bc in sp.bc:
        if bc not in ("dirichlet", "neumann"):
            raise ConfigError(f"{source}: [spectra] bc {bc!r} is not dirichlet or neumann")
    if cfg.stable_norm.directions < 32 or cfg.stable_norm.directions % 2:
        raise ConfigError(f"{source}: [stable_norm] directions must be even and >= 32")
    if len(cfg.stable_norm.rho_list) < 2:
        raise ConfigError(f"{source}: [stable_norm] rho_list needs at least two radii")
    t = np.asarray(cfg.heat.t_list)
    if t.size == 0 or np.any(np.diff(t) <= 0) or t[0] <= 0:
        raise ConfigError(f"{source}: [heat] t_list must be positive and increasing")


def load_config(path) -> RunConfig:
    """Parse a TOML run configuration; errors carry the file, line or key."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc, str(path))


# --------------------------------------------------------------------------- io


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_json(path: Path):
    with open(path) as fh:
        return json.load(fh)


def provenance(cfg: RunConfig) -> dict:
    import numba
    import scipy

    return {
        "config_hash": cfg.config_hash,
        "package_version": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "python": ".".join(str(v) for v in sys.version_info[:3]),
    }


# --------------------------------------------------------------------------- verdicts


def sweep_verdict(rescaled, limit: float, step_slack: float = 0.10, final_tol: float = 0.05) -> dict:
    """Gap trend of ``rho^2 lambda_i`` towards ``lambda_i^infty`` over a sweep."""
    gaps = np.abs(np.asarray(rescaled, dtype=float) - limit)
    steps_ok = [bool(b <= a * (1 + step_slack) + 1e-12) for a, b in zip(gaps[:-1], gaps[1:])]
    scale = abs(limit) if limit != 0 else 1.0
    final = float(gaps[-1] / scale)
    return {
        "gaps": gaps.tolist(),
        "non_increasing": all(steps_ok),
        "final_relative_gap": final,
        "final_ok": final <= final_tol,
        "passed": all(steps_ok) and final <= final_tol,
    }


def _tensor_from_doc(doc) -> HomogenizedTensor:
    return tensor_from_matrix(
        doc["q_up"],
        covolume=doc["covolume"],
        cross_check_gap=doc["cross_check_gap"],
        volume=doc["torus_volume"],
        resolution=doc["resolution"],
        residuals=doc["residuals"],
    )


def _table_from_doc(doc) -> NormTable:
    return NormTable(
        directions=np.asarray(doc["directions"]),
        radii=np.asarray(doc["radii"]),
        burago_C=np.asarray(doc["burago_C"]),
        residuals=np.asarray(doc["residuals"]),
        flags=np.asarray(doc["flags"], dtype=bool),
        convexified=doc["convexified"],
        raw_radii=np.asarray(doc["raw_radii"]),
        stencil_radius=doc["stencil_radius"],
        method=doc["method"],
        h=doc["h"],
    )


def flatness_audit(
    tensor: HomogenizedTensor | None,
    table: NormTable | None,
    spectra: Mapping | None,
    asvol: Mapping | None,
    n: int = 2,
    tolerances: Tolerances = Tolerances(),
    hashes: Mapping | None = None,
) -> dict:
    """Three gap metrics against calibrated tolerances.

    (i) norm gap ``max_theta (||theta||_Al r(theta) - 1)``, (ii) spectral gap
    ``lambda_{e,n} - lambda_1^infty``, (iii) relative volume gap
    ``(Asvol - Vol_g omega_n / Vol_Al) / bound``. The verdict is
    ``flat-consistent`` when all three are within tolerance, ``non-flat``
    otherwise, and ``inconclusive`` when an input is missing or the inputs
    come from different configurations.
    """
    missing = [name for name, v in (("correctors", tensor), ("stable_norm", table),
                                    ("spectra", spectra), ("asvol", asvol)) if v is None]
    diag = []
    if hashes:
        distinct = sorted(set(hashes.values()))
        if len(distinct) > 1:
            diag.append("inputs come from different configurations: " + ", ".join(
                f"{k}={v}" for k, v in sorted(hashes.items())))
    if missing:
        diag.append("missing inputs: " + ", ".join(missing))
    if diag:
        return {"verdict": "inconclusive", "diagnostics": diag}
    lam_e = lambda_euclidean(n)
    m = table.size
    norm_tol = tolerances.norm_factor * (stencil_error_bound(table.stencil_radius, table.method) + 1.0 / m)
    ratio = albanese_dual_norm(tensor, table.directions) * table.radii
    norm_raw = float(np.max(ratio - 1.0))
    lam_inf = float(spectra["dirichlet"]["limit"][0])
    spec_raw = lam_e - lam_inf
    vol_raw = float(asvol["slack"] / asvol["bound"])
    metrics = {
        "norm": {"raw": norm_raw, "gap": max(norm_raw, 0.0), "tolerance": norm_tol, "min_ratio": float(ratio.min())},
        "spectral": {"raw": spec_raw, "gap": max(spec_raw, 0.0), "tolerance": tolerances.spectral_rel * lam_e,
                     "lambda_inf": lam_inf, "lambda_e": lam_e},
        "volume": {"raw": vol_raw, "gap": max(vol_raw, 0.0), "tolerance": tolerances.volume_rel,
                   "asvol": asvol["asvol"], "bound": asvol["bound"]},
    }
    exceed = [k for k, v in metrics.items() if v["gap"] > v["tolerance"]]
    return {
        "verdict": "non-flat" if exceed else "flat-consistent",
        "exceeding": exceed,
        "metrics": metrics,
        "diagnostics": [],
    }


# --------------------------------------------------------------------------- stages


@dataclass
class _Context:
    cfg: RunConfig
    out: Path
    field: MetricField
    results: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict)

    def write(self, name: str, text: str) -> None:
        write_atomic(self.out / name, text)

    def tensor(self) -> HomogenizedTensor:
        return _tensor_from_doc(self.results["correctors"])

    def table(self) -> NormTable:
        return _table_from_doc(self.results["stable_norm"])

    def distance(self):
        """One distance map large enough for both the norm table and volume growth."""
        if "dist" not in self.cache:
            sn = self.cfg.stable_norm
            half_cell = 0.5 * float(np.abs(self.field.lattice.basis).sum(axis=1).max())
            extent = max(sn.rho_list) + half_cell + 2 * sn.stencil_radius / sn.nodes_per_unit
            if "asvol" in self.cfg.stages:
                alpha = ellipticity_bounds(self.field).alpha
                extent = max(extent, max(self.cfg.asvol.rho_list) / math.sqrt(alpha) + 1.0)
            self.cache["dist"] = distance_map(self.field, extent, sn.nodes_per_unit, sn.stencil_radius)
        return self.cache["dist"]


def _stage_correctors(ctx: _Context) -> dict:
    chi, tensor = homogenize(ctx.field, ctx.cfg.tolerances.cg)
    ctx.write("tensor.json", tensor_to_json(tensor, chi))
    return {
        "q_up": tensor.q_up,
        "q_down": tensor.q_down,
        "q_second": tensor.q_second,
        "albanese_volume": tensor.albanese_volume,
        "torus_volume": tensor.torus_volume,
        "covolume": ctx.field.lattice.covolume,
        "cross_check_gap": tensor.cross_check_gap,
        "resolution": list(tensor.resolution),
        "residuals": list(chi.residuals),
        "iterations": list(chi.iterations),
        "warnings": list(tensor.warnings),
    }


def _stage_stable_norm(ctx: _Context) -> dict:
    sn = ctx.cfg.stable_norm
    table = stable_ball_table(
        ctx.field, sn.directions, sn.rho_list, dist=ctx.distance(), resolution=sn.nodes_per_unit,
        stencil_radius=sn.stencil_radius,
    )
    ctx.write("stable_norm.csv", table.to_csv())
    if table.dimension == 2:
        ctx.write("stable_polygon.json", table.to_polygon_json() + "\n")
    return {
        "directions": table.directions,
        "radii": table.radii,
        "raw_radii": table.raw_radii,
        "burago_C": table.burago_C,
        "residuals": table.residuals,
        "flags": table.flags.astype(int),
        "convexified": table.convexified,
        "stencil_radius": table.stencil_radius,
        "method": table.method,
        "h": table.h,
        "area": table.area() if table.dimension == 2 else None,
        "stencil_error_bound": stencil_error_bound(table.stencil_radius, table.method),
    }


def _stage_spectra(ctx: _Context) -> dict:
    sp = ctx.cfg.spectra
    tensor, table = ctx.tensor(), ctx.table()
    tol = ctx.cfg.tolerances
    out: dict = {"rho": list(sp.rho_list)}
    reports = []
    for bc in sp.bc:
        sweep = rescaled_spectrum_sweep(
            ctx.field, sp.rho_list, sp.k, bc, stencil_radius=ctx.cfg.stable_norm.stencil_radius,
            nodes_per_period=sp.nodes_per_period, min_nodes_per_unit=sp.min_nodes_per_unit,
        )
        limit = stable_ball_spectrum(tensor, table, sp.k, bc, h=sp.stable_h)
        reports.extend(sweep + [limit])
        rescaled = np.array([r.eigenvalues for r in sweep])
        entry = {
            "rescaled": rescaled,
            "limit": limit.eigenvalues,
            "n_dofs": [r.n_dofs for r in sweep],
            "h": [r.h for r in sweep],
            "residuals": [r.residuals for r in sweep],
            "limit_residuals": limit.residuals,
            "converged": all(r.converged for r in sweep) and limit.converged,
        }
        if bc == "dirichlet":
            entry["verdict"] = sweep_verdict(rescaled[:, 0], limit.eigenvalues[0], tol.sweep_step_slack, tol.final_gap)
        else:
            zero_ok = bool(np.all(np.abs(rescaled[:, 0]) <= tol.neumann_zero)
                           and abs(limit.eigenvalues[0]) <= tol.neumann_zero)
            v2 = sweep_verdict(rescaled[:, 1], limit.eigenvalues[1], tol.sweep_step_slack, tol.final_gap) \
                if sp.k >= 2 else None
            entry["verdict"] = {"lambda1_zero": zero_ok, "lambda2": v2}
        out[bc] = entry
    ctx.write("spectra.csv", sweep_csv(reports))
    return out


def _stage_faber_krahn(ctx: _Context) -> dict:
    table = ctx.table()
    if table.dimension != 2:
        return {"skipped": "Faber-Krahn numerics are 2D only"}
    res = ctx.cfg.faber_krahn.resolution
    norm = NormSpec.from_table(table)
    ball = ConvexDomain(norm.vertices)
    corollary = lambda1_norm(ball, norm, res)
    lam_e = lambda_euclidean(2)
    side = math.sqrt(ball.measure)
    rep = faber_krahn_report(ConvexDomain.rectangle(side, side), norm, res)
    ctx.write("faber_krahn.json", rep.to_json() + "\n")
    return {
        "stable_ball_lambda1": corollary.value,
        "lambda_e": lam_e,
        "corollary_relative_error": abs(corollary.value - lam_e) / lam_e,
        "corollary_flagged": corollary.flagged,
        "square": json.loads(rep.to_json()),
    }


def _stage_asvol(ctx: _Context) -> dict:
    series = volume_growth(ctx.field, ctx.distance(), ctx.cfg.asvol.rho_list)
    table = ctx.table()
    rep = asvol_report(ctx.field, ctx.tensor(), series, table, tol=ctx.cfg.tolerances.volume_rel)
    ctx.write("volume.csv", series.to_csv())
    ctx.write("asvol_report.json", rep.to_json() + "\n")
    doc = json.loads(rep.to_json())
    doc.update({"rho": series.rho, "v": series.v, "fit_c": series.c, "fit_residual": series.residual})
    return doc


def _stage_heat(ctx: _Context) -> dict:
    hc = ctx.cfg.heat
    comp = heat_compare(ctx.field, ctx.tensor(), hc.t_list, hc.a, hc.nodes_per_period, tol=ctx.cfg.tolerances.cg)
    ctx.write("heat.csv", comp.to_csv())
    d = comp.delta
    return {
        "t": comp.t,
        "delta": d,
        "lp1": comp.lp1,
        "lp2": comp.lp2,
        "disc_bound": comp.disc_bound,
        "mass_drift": comp.mass_drift,
        "min_value": comp.min_value,
        "steps": comp.steps,
        "h": comp.h,
        "box": comp.box,
        "decreasing": bool(np.all(np.diff(d) < 0)),
        "last_two_non_increasing": bool(np.all(np.diff(d[-3:]) <= 0)),
    }


def _stage_audit(ctx: _Context) -> dict:
    res = ctx.results
    return flatness_audit(
        ctx.tensor(), ctx.table(), res.get("spectra"), res.get("asvol"), ctx.field.dimension, ctx.cfg.tolerances
    )


STAGE_FUNCS: dict[str, Callable[[_Context], dict]] = {
    "correctors": _stage_correctors,
    "stable_norm": _stage_stable_norm,
    "spectra": _stage_spectra,
    "faber_krahn": _stage_faber_krahn,
    "asvol": _stage_asvol,
    "heat": _stage_heat,
    "audit": _stage_audit,
}


@dataclass
class RunResult:
    exit_code: int
    status: dict
    report: dict
    out: Path


def run(cfg: RunConfig, out: str | Path | None = None, force: bool = False) -> RunResult:
    """Run the configured stages in dependency order and write the report."""
    out = Path(out if out is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    try:
        fld = make_metric(cfg.metric)
    except (MetricError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{cfg.source}: [metric] {exc}") from None
    chash = cfg.config_hash
    ctx = _Context(cfg, out, fld)
    status = {}
    for stage in cfg.stages:
        failed_deps = [d for d in DEPENDS[stage] if status.get(d) not in ("ok", "cached")]
        if failed_deps:
            status[stage] = "skipped: dependency " + ",".join(failed_deps) + " failed"
            log.error("stage %s %s", stage, status[stage])
            continue
        path = out / f"{stage}.json"
        if not force and path.is_file():
            try:
                doc = _read_json(path)
            except json.JSONDecodeError:
                doc = {}
            if doc.get("config_hash") == chash and doc.get("status") == "ok":
                ctx.results[stage] = doc["result"]
                status[stage] = "cached"
                log.info("stage %s: up to date, skipped", stage)
                continue
        log.info("stage %s: running", stage)
        try:
            result = STAGE_FUNCS[stage](ctx)
        except NUMERIC_ERRORS as exc:
            status[stage] = f"failed: {type(exc).__name__}: {exc}"
            log.error("stage %s failed: %s", stage, exc)
            write_atomic(path, dumps({"config_hash": chash, "stage": stage, "status": "failed",
                                      "error": str(exc)}))
            continue
        result = _jsonable(result)
        ctx.results[stage] = result
        status[stage] = "ok"
        write_atomic(path, dumps({"config_hash": chash, "stage": stage, "status": "ok", "result": result}))
    report = convergence_report(cfg, ctx.results, status)
    write_atomic(out / "report.json", dumps(report))
    code = EXIT_OK
    if any(s.startswith(("failed", "skipped")) for s in status.values()):
        code = EXIT_NUMERIC
    elif "audit" in ctx.results and ctx.results["audit"]["verdict"] == "inconclusive":
        code = EXIT_INCONCLUSIVE
    return RunResult(code, status, report, out)


def convergence_report(cfg: RunConfig, results: Mapping, status: Mapping) -> dict:
    """Top-level report: sweep columns, targets, gaps and per-statement verdicts."""
    rep: dict = {
        "provenance": provenance(cfg),
        "config": cfg.hashable(),
        # cached stages report as ok so reruns stay byte-identical
        "stages": {k: ("ok" if v == "cached" else v) for k, v in status.items()},
        "verdicts": {},
    }
    lam_e = lambda_euclidean(int(cfg.metric.get("n", 2)))
    spec = results.get("spectra")
    if spec:
        conv = {"rho": spec["rho"]}
        for bc in cfg.spectra.bc:
            e = spec[bc]
            resc = np.asarray(e["rescaled"], dtype=float)
            lim = np.asarray(e["limit"], dtype=float)
            conv[bc] = {"rescaled": resc, "limit": lim, "gaps": np.abs(resc - lim[None, :])}
        rep["convergence"] = conv
        rep["verdicts"]["dirichlet_sweep"] = spec.get("dirichlet", {}).get("verdict")
        rep["verdicts"]["neumann_sweep"] = spec.get("neumann", {}).get("verdict")
        if "dirichlet" in spec:
            lam_inf = float(spec["dirichlet"]["limit"][0])
            rep["verdicts"]["spectral_bound"] = {
                "lambda_inf": lam_inf,
                "lambda_e": lam_e,
                "slack": lam_e - lam_inf,
                "bound_holds": lam_inf <= lam_e * (1 + 1e-3),
            }
    sn = results.get("stable_norm")
    cor = results.get("correctors")
    if sn and cor:
        table, tensor = _table_from_doc(sn), _tensor_from_doc(cor)
        ratio = albanese_dual_norm(tensor, table.directions) * table.radii
        eps = stencil_error_bound(table.stencil_radius, table.method) + 1.0 / table.size
        rep["verdicts"]["albanese_inclusion"] = {
            "min_ratio": float(ratio.min()),
            "max_ratio": float(ratio.max()),
            "epsilon_grid": eps,
            "holds": bool(ratio.min() >= 1 - eps),
        }
    if results.get("faber_krahn") and "square" in results["faber_krahn"]:
        fk = results["faber_krahn"]
        rep["verdicts"]["faber_krahn"] = {
            "corollary_relative_error": fk["corollary_relative_error"],
            "corollary_ok": fk["corollary_relative_error"] <= 0.03,
            "square_slack": fk["square"]["slack"],
            "inequality_holds": fk["square"]["slack"] >= -2 * fk["square"]["tolerance"],
        }
    av = results.get("asvol")
    if av:
        rep["verdicts"]["asymptotic_volume"] = {
            "asvol": av["asvol"],
            "bound": av["bound"],
            "slack": av["slack"],
            "bound_holds": av["asvol"] >= av["bound"] * (1 - cfg.tolerances.volume_rel),
            "cross_gap": av.get("cross_gap"),
        }
    ht = results.get("heat")
    if ht:
        rep["verdicts"]["heat"] = {k: ht[k] for k in ("decreasing", "last_two_non_increasing", "mass_drift")}
    if results.get("audit"):
        rep["verdicts"]["audit"] = results["audit"]
    return _jsonable(rep)


# --------------------------------------------------------------------------- audit / plots


def audit_directory(out) -> dict:
    """Recompute the flatness audit from stage files in ``out``."""
    out = Path(out)
    docs, hashes = {}, {}
    for stage in ("correctors", "stable_norm", "spectra", "asvol"):
        p = out / f"{stage}.json"
        if p.is_file():
            d = _read_json(p)
            if d.get("status") == "ok":
                docs[stage] = d["result"]
                hashes[stage] = d.get("config_hash")
    n = len(docs["correctors"]["q_up"]) if "correctors" in docs else 2
    return flatness_audit(
        _tensor_from_doc(docs["correctors"]) if "correctors" in docs else None,
        _table_from_doc(docs["stable_norm"]) if "stable_norm" in docs else None,
        docs.get("spectra"),
        docs.get("asvol"),
        n,
        hashes=hashes,
    )


def _placeholder(ax, title):
    ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes, fontsize=14)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])


def emit_plots(out) -> list:
    """Write ``spectra.svg``, ``stable_ball.svg`` and ``volume.svg`` into ``out``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "torus-macrospec"
    out = Path(out)

    def load(stage):
        p = out / f"{stage}.json"
        if not p.is_file():
            return None
        d = _read_json(p)
        return d.get("result") if d.get("status") == "ok" else None

    written = []
    spec, sn, cor, av = load("spectra"), load("stable_norm"), load("correctors"), load("asvol")
    lam_e = lambda_euclidean(2)

    fig, ax = plt.subplots(figsize=(6, 4))
    if spec and spec.get("rho"):
        rho = np.asarray(spec["rho"], dtype=float)
        for bc in ("dirichlet", "neumann"):
            if bc not in spec:
                continue
            resc = np.asarray(spec[bc]["rescaled"], dtype=float)
            lim = np.asarray(spec[bc]["limit"], dtype=float)
            for i in range(resc.shape[1]):
                line, = ax.plot(rho, resc[:, i], "o-", label=f"{bc} i={i + 1}")
                ax.axhline(lim[i], color=line.get_color(), ls="--", lw=0.8)
        ax.axhline(lam_e, color="k", ls=":", lw=1, label="lambda_e,2")
        if "dirichlet" in spec:
            slack = lam_e - float(spec["dirichlet"]["limit"][0])
            ax.annotate(f"lambda_e - lambda_1^inf = {slack:.4g}", (0.02, 0.95), xycoords="axes fraction", va="top")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("rho")
        ax.set_ylabel("rho^2 lambda_i")
        ax.legend(fontsize=7)
        ax.set_title("rescaled ball spectra")
    else:
        _placeholder(ax, "rescaled ball spectra")
    written.append(_save(fig, out / "spectra.svg"))

    fig, ax = plt.subplots(figsize=(5, 5))
    if sn and cor and len(sn["directions"][0]) == 2:
        table, tensor = _table_from_doc(sn), _tensor_from_doc(cor)
        poly = table.polygon()
        closed = np.vstack([poly, poly[:1]])
        ax.plot(closed[:, 0], closed[:, 1], "-", label="stable ball")
        th = np.linspace(0, 2 * np.pi, 361)
        d = np.stack([np.cos(th), np.sin(th)], axis=1)
        r_al = 1.0 / albanese_dual_norm(tensor, d)
        ax.plot(r_al * d[:, 0], r_al * d[:, 1], "--", label="Albanese ball")
        dev = float(np.max(np.abs(albanese_dual_norm(tensor, table.directions) * table.radii - 1)))
        ax.annotate(f"max radial deviation {100 * dev:.2f}%", (0.02, 0.97), xycoords="axes fraction", va="top")
        ax.set_aspect("equal")
        ax.legend(fontsize=8, loc="lower right")
        ax.set_title("stable vs Albanese unit ball")
    else:
        _placeholder(ax, "stable vs Albanese unit ball")
    written.append(_save(fig, out / "stable_ball.svg"))

    fig, ax = plt.subplots(figsize=(6, 4))
    if av and av.get("rho"):
        ax.plot(av["rho"], av["v"], "o-", label="v(rho)")
        ax.axhline(av["bound"], color="k", ls="--", label="Vol_g omega_2 / Vol_Al")
        ax.axhline(av["asvol"], color="C1", ls=":", label="extrapolated Asvol")
        ax.set_xlabel("rho")
        ax.set_ylabel("Vol(B(rho)) / rho^2")
        ax.legend(fontsize=8)
        ax.set_title("volume growth")
    else:
        _placeholder(ax, "volume growth")
    written.append(_save(fig, out / "volume.svg"))
    return written


def _save(fig, path: Path) -> Path:
    import matplotlib.pyplot as plt

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".svg.tmp")
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    os.replace(tmp, path)
    return path
