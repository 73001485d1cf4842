import dataclasses
import json

import numpy as np
import pytest

from conftest import conformal_spec
from torus_macrospec import cli
from torus_macrospec import harness_cli as h

FLAT_DOC = {
    "metric": {"family": "flat", "G": [[1.0, 0.0], [0.0, 1.0]], "resolution": 8},
    "run": {"stages": ["audit"]},
    "stable_norm": {"directions": 32, "rho_list": [4.0, 8.0]},
    "spectra": {"rho_list": [2.0, 4.0], "k": 2, "stable_h": 1 / 32, "min_nodes_per_unit": 16},
    "asvol": {"rho_list": [4.0, 8.0]},
}

FLAT_TOML = """\
[metric]
family = "flat"
G = [[1.0, 0.0], [0.0, 1.0]]
resolution = 8

[run]
stages = ["audit"]

[stable_norm]
directions = 32
rho_list = [4.0, 8.0]

[spectra]
rho_list = [2.0, 4.0]
k = 2
stable_h = 0.03125
min_nodes_per_unit = 16

[asvol]
rho_list = [4.0, 8.0]
"""


def _doc(**updates):
    doc = json.loads(json.dumps(FLAT_DOC))
    for k, v in updates.items():
        doc[k] = v
    return doc


@pytest.fixture(scope="module")
def flat_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("flat_run")
    cfg = h.parse_config(FLAT_DOC, "flat_cheap")
    return h.run(cfg, out)


@pytest.fixture(scope="module")
def conformal_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("conformal_run")
    doc = _doc(metric={**conformal_spec(), "resolution": 32})
    doc["stable_norm"] = {"directions": 32, "rho_list": [8.0, 16.0]}
    doc["asvol"] = {"rho_list": [8.0, 16.0]}
    return h.run(h.parse_config(doc, "conformal_cheap"), out)


# --------------------------------------------------------------------------- config


def test_stage_closure_adds_dependencies_in_order():
    assert h.stage_closure(["spectra"]) == ("correctors", "stable_norm", "spectra")
    assert h.stage_closure(["heat", "faber_krahn"]) == ("correctors", "stable_norm", "faber_krahn", "heat")
    assert h.stage_closure(["audit"]) == ("correctors", "stable_norm", "spectra", "asvol", "audit")
    for stage in h.STAGES:
        closure = h.stage_closure([stage])
        for s in closure:
            assert set(h.DEPENDS[s]) <= set(closure[: closure.index(s)])


def test_stage_closure_unknown():
    with pytest.raises(h.ConfigError, match="unknown stage 'bogus'"):
        h.stage_closure(["bogus"])


@pytest.mark.parametrize(
    "doc, match",
    [
        ({"run": {}}, "missing \\[metric\\]"),
        ({"metric": {"G": [[1.0]]}}, "family"),
        (_doc(spectra={"kk": 2}), "unknown key 'kk'"),
        (_doc(spectra={"k": 2.5}), "key 'k'"),
        (_doc(spectra={"k": 20}), "k must be in 1..12"),
        (_doc(spectra={"bc": ["robin"]}), "robin"),
        (_doc(stable_norm={"directions": 31}), "directions"),
        (_doc(stable_norm={"rho_list": [8.0]}), "two radii"),
        (_doc(heat={"t_list": [2.0, 1.0]}), "t_list"),
        (_doc(run={"stages": ["nope"]}), "stages"),
        (_doc(run={"threads": 2}), "\\[run\\] unknown keys"),
        (_doc(extra={"a": 1}), "unknown sections"),
        (_doc(tolerances=3), "must be a table"),
    ],
)
def test_parse_config_errors(doc, match):
    with pytest.raises(h.ConfigError, match=match):
        h.parse_config(doc, "bad.toml")


def test_load_config_missing_and_malformed(tmp_path):
    with pytest.raises(h.ConfigError, match="not found"):
        h.load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[metric\nfamily = 1\n")
    with pytest.raises(h.ConfigError, match="line 1"):
        h.load_config(bad)


def test_load_config_roundtrip(tmp_path):
    p = tmp_path / "flat.toml"
    p.write_text(FLAT_TOML)
    cfg = h.load_config(p)
    assert cfg == dataclasses.replace(h.parse_config(FLAT_DOC, str(p)), source=str(p), output="runs/flat")
    assert cfg.stable_norm.rho_list == (4.0, 8.0)
    assert cfg.spectra.k == 2 and isinstance(cfg.spectra.rho_list[0], float)


def test_config_hash_ignores_plumbing():
    a = h.parse_config(FLAT_DOC, "a")
    b = dataclasses.replace(a, output="elsewhere", source="b", stages=("correctors",))
    assert a.config_hash == b.config_hash
    c = h.parse_config(_doc(asvol={"rho_list": [4.0, 16.0]}), "a")
    assert c.config_hash != a.config_hash


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for name in ("flat", "conformal", "laminate"):
        cfg = h.load_config(root / f"{name}.toml")
        assert cfg.stages == h.STAGES
        assert cfg.metric["family"] == name


# --------------------------------------------------------------------------- verdict helpers


def test_sweep_verdict():
    v = h.sweep_verdict([6.0, 5.9, 5.85], 5.8)
    assert v["non_increasing"] and v["passed"]
    assert np.allclose(v["gaps"], [0.2, 0.1, 0.05])
    v = h.sweep_verdict([5.9, 6.0], 5.8)
    assert not v["non_increasing"]
    # 10% slack per step
    assert h.sweep_verdict([5.9, 5.909], 5.8)["non_increasing"]
    v = h.sweep_verdict([9.0, 8.0], 5.8)
    assert v["non_increasing"] and not v["final_ok"]


def test_dumps_is_canonical():
    a = h.dumps({"b": np.float64(1.5), "a": np.arange(3), "c": float("nan"), "d": float("inf")})
    assert a == h.dumps({"d": float("inf"), "c": float("nan"), "a": [0, 1, 2], "b": 1.5})
    assert json.loads(a) == {"a": [0, 1, 2], "b": 1.5, "c": None, "d": "inf"}
    assert a.endswith("\n")


def test_write_atomic_leaves_no_temp(tmp_path):
    p = tmp_path / "sub" / "x.json"
    h.write_atomic(p, "one\n")
    h.write_atomic(p, "two\n")
    assert p.read_text() == "two\n"
    assert sorted(q.name for q in p.parent.iterdir()) == ["x.json"]


def test_flatness_audit_missing_inputs():
    v = h.flatness_audit(None, None, None, None)
    assert v["verdict"] == "inconclusive"
    assert "correctors" in v["diagnostics"][0] and "asvol" in v["diagnostics"][0]


# --------------------------------------------------------------------------- pipeline


def test_flat_run_artifacts(flat_run):
    assert flat_run.exit_code == h.EXIT_OK
    assert set(flat_run.status.values()) == {"ok"}
    for name in ("correctors.json", "stable_norm.json", "spectra.json", "asvol.json", "audit.json",
                 "report.json", "tensor.json", "stable_norm.csv", "stable_polygon.json", "spectra.csv",
                 "volume.csv", "asvol_report.json"):
        assert (flat_run.out / name).is_file(), name
    rep = json.loads((flat_run.out / "report.json").read_text())
    assert rep["provenance"]["config_hash"] == h.parse_config(FLAT_DOC).config_hash
    assert rep["verdicts"]["audit"]["verdict"] == "flat-consistent"
    assert np.allclose(rep["config"]["metric"]["G"], np.eye(2))
    q = np.array(json.loads((flat_run.out / "correctors.json").read_text())["result"]["q_up"])
    assert np.abs(q - np.eye(2)).max() <= 1e-10


def test_report_gaps_recomputable(flat_run):
    conv = flat_run.report["convergence"]
    for bc in ("dirichlet", "neumann"):
        resc = np.array(conv[bc]["rescaled"])
        lim = np.array(conv[bc]["limit"])
        assert np.allclose(conv[bc]["gaps"], np.abs(resc - lim[None, :]), rtol=0, atol=0)


def test_rerun_is_cached_and_byte_identical(flat_run):
    before = {p.name: p.read_bytes() for p in flat_run.out.glob("*.json")}
    again = h.run(h.parse_config(FLAT_DOC, "flat_cheap"), flat_run.out)
    assert set(again.status.values()) == {"cached"}
    after = {p.name: p.read_bytes() for p in flat_run.out.glob("*.json")}
    assert before == after


def test_force_rerun_is_byte_identical(flat_run, tmp_path):
    fresh = h.run(h.parse_config(FLAT_DOC, "flat_cheap"), tmp_path, force=True)
    assert set(fresh.status.values()) == {"ok"}
    for p in flat_run.out.glob("*.json"):
        assert (tmp_path / p.name).read_bytes() == p.read_bytes(), p.name


def test_audit_directory_matches_run(flat_run):
    v = h.audit_directory(flat_run.out)
    assert v == flat_run.report["verdicts"]["audit"]


def test_audit_directory_hash_mismatch(flat_run, tmp_path):
    for p in flat_run.out.glob("*.json"):
        (tmp_path / p.name).write_bytes(p.read_bytes())
    doc = json.loads((tmp_path / "asvol.json").read_text())
    doc["config_hash"] = "0" * 16
    (tmp_path / "asvol.json").write_text(h.dumps(doc))
    v = h.audit_directory(tmp_path)
    assert v["verdict"] == "inconclusive"
    assert "different configurations" in v["diagnostics"][0]


def test_audit_directory_missing_stage(flat_run, tmp_path):
    for p in flat_run.out.glob("*.json"):
        if p.name != "spectra.json":
            (tmp_path / p.name).write_bytes(p.read_bytes())
    v = h.audit_directory(tmp_path)
    assert v["verdict"] == "inconclusive"
    assert "spectra" in v["diagnostics"][0]


def test_conformal_audit_non_flat(conformal_run):
    audit = conformal_run.report["verdicts"]["audit"]
    assert audit["verdict"] == "non-flat"
    assert "norm" in audit["exceeding"]
    m = audit["metrics"]
    assert m["spectral"]["raw"] > 0 and m["volume"]["raw"] > 0


def test_stage_failure_halts_dependents(tmp_path, monkeypatch):
    def boom(ctx):
        raise h.SizingError("too small")

    monkeypatch.setitem(h.STAGE_FUNCS, "stable_norm", boom)
    doc = _doc(run={"stages": ["audit", "heat"]}, heat={"t_list": [0.5, 1.0], "nodes_per_period": 4})
    res = h.run(h.parse_config(doc), tmp_path)
    assert res.exit_code == h.EXIT_NUMERIC
    assert res.status["correctors"] == "ok"
    assert res.status["heat"] == "ok"
    assert res.status["stable_norm"].startswith("failed: SizingError")
    for stage in ("spectra", "asvol", "audit"):
        assert res.status[stage].startswith("skipped")
    failed = json.loads((tmp_path / "stable_norm.json").read_text())
    assert failed["status"] == "failed"
    # a failed stage is recomputed on the next run
    monkeypatch.undo()
    again = h.run(h.parse_config(doc), tmp_path)
    assert again.status["stable_norm"] == "ok" and again.status["correctors"] == "cached"
    assert again.exit_code == h.EXIT_OK


def test_bad_metric_is_config_error(tmp_path):
    doc = _doc(metric={"family": "flat", "G": [[1.0, 2.0], [2.0, 1.0]], "resolution": 8})
    with pytest.raises(h.ConfigError, match="metric"):
        h.run(h.parse_config(doc), tmp_path)


# --------------------------------------------------------------------------- plots


def test_plots_with_data(flat_run):
    paths = h.emit_plots(flat_run.out)
    assert [p.name for p in paths] == ["spectra.svg", "stable_ball.svg", "volume.svg"]
    ball = (flat_run.out / "stable_ball.svg").read_text()
    assert "max radial deviation" in ball
    dev = float(ball.split("max radial deviation ")[1].split("%")[0])
    assert dev < 1.0
    first = [p.read_bytes() for p in paths]
    assert [p.read_bytes() for p in h.emit_plots(flat_run.out)] == first


def test_plots_no_data(tmp_path):
    paths = h.emit_plots(tmp_path)
    assert len(paths) == 3
    for p in paths:
        assert "no data" in p.read_text()


def test_conformal_plot_annotates_slack(conformal_run):
    h.emit_plots(conformal_run.out)
    svg = (conformal_run.out / "spectra.svg").read_text()
    slack = conformal_run.report["verdicts"]["spectral_bound"]["slack"]
    assert slack > 0
    assert f"{slack:.4g}" in svg


# --------------------------------------------------------------------------- cli


def test_cli_run_audit_plot(tmp_path, capsys):
    cfg = tmp_path / "flat.toml"
    cfg.write_text(FLAT_TOML)
    out = tmp_path / "out"
    assert cli.main(["run", str(cfg), "--out", str(out), "--threads", "1"]) == 0
    text = capsys.readouterr().out
    assert "audit: flat-consistent" in text
    assert cli.main(["audit", str(out)]) == 0
    verdict = json.loads(capsys.readouterr().out)
    assert verdict["verdict"] == "flat-consistent"
    assert cli.main(["plot", str(out)]) == 0
    assert (out / "volume.svg").is_file()


def test_cli_stages_option(tmp_path, capsys):
    cfg = tmp_path / "flat.toml"
    cfg.write_text(FLAT_TOML)
    out = tmp_path / "out"
    assert cli.main(["run", str(cfg), "--out", str(out), "--stages", "correctors"]) == 0
    assert capsys.readouterr().out.splitlines()[0].startswith("correctors")
    assert sorted(p.name for p in out.glob("*.json")) == ["correctors.json", "report.json", "tensor.json"]


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "missing.toml")]) == h.EXIT_CONFIG
    assert "missing.toml" in capsys.readouterr().err
    cfg = tmp_path / "flat.toml"
    cfg.write_text(FLAT_TOML)
    assert cli.main(["run", str(cfg), "--threads", "0"]) == h.EXIT_CONFIG
    assert cli.main(["run", str(cfg), "--stages", "bogus"]) == h.EXIT_CONFIG
    assert cli.main(["audit", str(tmp_path / "nowhere")]) == h.EXIT_CONFIG
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["audit", str(empty)]) == h.EXIT_INCONCLUSIVE
