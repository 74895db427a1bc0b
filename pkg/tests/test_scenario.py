import json

import numpy as np
import pytest

from eulerporo import cli
from eulerporo import energy as en
from eulerporo import field_ops as fo
from eulerporo import material as mm
from eulerporo import rothe as ro
from eulerporo import scenario as sc


def _doc(name="equilibrium", n=12, steps=10, **edits):
    doc = sc.preset_config(name, n=n, steps=steps)
    for key, value in edits.items():
        doc[key] = value
    return doc


def _cfg(*args, **kw):
    return sc.parse_config(json.dumps(_doc(*args, **kw)))


def test_defaults_fill_an_empty_document():
    cfg = sc.parse_config("{}")
    assert cfg.d == 2 and cfg.bc_mode == "box"
    assert cfg.steps == round(cfg.t_end / cfg.tau)
    assert cfg.moduli == mm.Moduli()
    assert cfg.settings().tau == cfg.tau


def test_config_round_trip():
    cfg = _cfg("damage-pulse")
    again = sc.parse_config(json.dumps(sc.config_to_dict(cfg)))
    assert again == cfg


def test_syntax_error_reports_position():
    with pytest.raises(sc.ConfigError) as exc:
        sc.parse_config('{"domain": {"d": 2,,}}')
    (hyp, where, _), = exc.value.violations
    assert hyp == "syntax" and "line 1" in where and "column" in where


def test_zero_viscosity_is_rejected_as_ass4():
    with pytest.raises(sc.ConfigError) as exc:
        sc.parse_config(json.dumps({"moduli": {"k_v": 0.0}}))
    assert exc.value.hypotheses == {"ass:4"}
    assert "moduli.k_v" in str(exc.value)


def test_convexity_guard_reports_the_bound():
    with pytest.raises(sc.ConfigError) as exc:
        sc.parse_config(json.dumps({"material": {"G1": 1.0, "eps_sat": 1.0, "G0": 0.05}}))
    assert exc.value.hypotheses == {"ass:1"}
    p = mm.BiotDamageParams(G1=1.0, eps_sat=1.0, G0=0.05)
    bound = 1.25 * mm.convexity_bound(p)
    assert f"{bound:.6g}" in str(exc.value)


def test_every_violation_is_listed():
    doc = {"moduli": {"k_v": 0.0, "gamma": -1.0}, "dissipation": {"eta_p": 0.0},
           "mobility": {"m0": 0.1, "m1": -0.2, "m_min": 0.01},
           "domain": {"n": 2}, "bogus": {}}
    with pytest.raises(sc.ConfigError) as exc:
        sc.parse_config(json.dumps(doc))
    paths = {p for _, p, _ in exc.value.violations}
    assert {"moduli.k_v", "moduli.gamma", "dissipation.eta_p", "mobility.m1", "domain.n",
            "bogus"} <= paths
    assert {"ass:2", "ass:3", "ass:4", "config"} <= exc.value.hypotheses


@pytest.mark.parametrize("hyp", ["ass:1", "ass:2", "ass:3", "ass:4"])
def test_violating_configs_name_their_hypothesis(hyp):
    with pytest.raises(sc.ConfigError) as exc:
        sc.parse_config(json.dumps(sc.violating_configs()[hyp]))
    assert exc.value.hypotheses == {hyp}


def test_unknown_preset_family_rejected():
    with pytest.raises(sc.ConfigError):
        sc.parse_config(json.dumps({"initial": {"v": {"preset": "vortex"}}}))


def test_equilibrium_run_writes_zero_energy_rows(tmp_path):
    cfg = _cfg(steps=100, n=8)
    res = sc.run_scenario(cfg, out_dir=tmp_path)
    assert res.status == sc.EXIT_OK
    version, cols, rows = sc.read_energy_csv(tmp_path / "energy.csv")
    assert version == en.CSV_VERSION
    assert cols == en.EnergyReport.columns()
    assert rows.shape == (100, len(cols))
    assert np.all(rows[:, 1:] == 0.0)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "completed" and summary["exit_code"] == 0
    assert (tmp_path / "manifest.json").exists()


def test_viscous_decay_kinetic_energy_strictly_decreases():
    res = sc.run_scenario(_cfg("viscous-decay", n=16, steps=40), write=False)
    kin = [r.kinetic for r in res.reports]
    assert all(b < a for a, b in zip(kin, kin[1:]))


def test_solver_abort_flushes_artifacts(tmp_path):
    doc = _doc("equilibrium", n=8, steps=5)
    doc["time"] = {"t_end": 0.25, "tau": 0.05, "tau_min": 0.05}
    doc["solver"] = {"picard_max": 2}
    doc["loads"] = {"f": {"preset": "constant", "amplitude": [50.0, 20.0]}}
    res = sc.run_scenario(sc.parse_config(json.dumps(doc)), out_dir=tmp_path)
    assert res.status == sc.EXIT_SOLVER
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "solver-abort" and summary["exit_code"] == 1
    assert "Picard" in summary["error"]
    assert (tmp_path / "manifest.json").exists()
    assert (tmp_path / "energy.csv").read_text().startswith("# " + en.CSV_VERSION)


def _state(d=2, n=5, seed=0):
    n = (4,) if d == 1 else (n, n + 1)
    g = fo.Grid(n, (1.0,) * d)
    rng = np.random.default_rng(seed)
    mat = mm.Material()
    m = mm.Moduli()
    s = ro.initial_state(g, m, mat, v=rng.standard_normal((d,) + g.n),
                         Ee=0.1 * rng.standard_normal((d * (d + 1) // 2,) + g.n),
                         chi=rng.standard_normal(g.n))
    s.t = 0.1 + rng.random()
    return s, mat


def test_csv_snapshot_one_row_per_cell(tmp_path):
    s, mat = _state(d=1)
    t, cols, table = sc.read_snapshot_csv(sc.write_snapshot_csv(s, mat, tmp_path / "a.csv"))
    assert cols == sc.snapshot_columns(1, 1)
    assert table.shape == (4, len(cols))
    assert t == s.t


@pytest.mark.parametrize("d", [1, 2])
def test_csv_snapshot_round_trip_is_bitwise(tmp_path, d):
    s, mat = _state(d=d, seed=d)
    _, _, table = sc.read_snapshot_csv(sc.write_snapshot_csv(s, mat, tmp_path / "s.csv"))
    assert np.array_equal(table, sc.snapshot_table(s, mat))


def test_vtk_snapshot_round_trip(tmp_path):
    s, mat = _state(d=2, seed=4)
    back = sc.read_snapshot_vtk(sc.write_snapshot_vtk(s, mat, tmp_path / "s.vtk"))
    g = s.grid
    assert back["dims"] == g.n + (1,)
    v = back["v"]
    np.testing.assert_allclose(v[:, 0], g.interior(s.v)[0].T.ravel(), rtol=1e-15, atol=0)
    np.testing.assert_array_equal(v[:, 2], 0.0)
    S = back["S"].reshape(-1, 3, 3)
    np.testing.assert_allclose(S[:, 0, 1], g.interior(s.S)[1].T.ravel(), rtol=1e-15, atol=0)
    np.testing.assert_allclose(back["chi"][:, 0], g.interior(s.chi).T.ravel(), rtol=1e-15,
                               atol=0)


def test_ground_state_phi_column_is_zero(tmp_path):
    g = fo.Grid((6, 6), (1.0, 1.0))
    mat = mm.Material(mm.BiotDamageParams(chi_eq=0.2, c_h=0.3))
    s = ro.initial_state(g, mm.Moduli(), mat)
    _, cols, table = sc.read_snapshot_csv(sc.write_snapshot_csv(s, mat, tmp_path / "g.csv"))
    assert np.all(table[:, cols.index("phi")] == 0.0)


def test_runs_are_deterministic(tmp_path):
    doc = _doc("viscous-decay", n=10, steps=5)
    doc["initial"]["chi"] = {"preset": "constant", "amplitude": 0.0, "noise": 0.01}
    doc["seed"] = 7
    cfg = sc.parse_config(json.dumps(doc))
    a = sc.run_scenario(cfg, out_dir=tmp_path / "a")
    b = sc.run_scenario(cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "energy.csv").read_bytes() == (tmp_path / "b" / "energy.csv").read_bytes()
    assert a.summary == b.summary


def test_output_dir_precedence(tmp_path, monkeypatch):
    cfg = _cfg()
    monkeypatch.delenv(sc.OUTPUT_ENV, raising=False)
    assert sc.resolve_output_dir(cfg) == fo_path(cfg.output["dir"])
    monkeypatch.setenv(sc.OUTPUT_ENV, str(tmp_path / "env"))
    assert sc.resolve_output_dir(cfg) == tmp_path / "env"
    assert sc.resolve_output_dir(cfg, tmp_path / "cli") == tmp_path / "cli"


def fo_path(p):
    from pathlib import Path
    return Path(p)


def test_snapshot_schedule_and_manifest(tmp_path):
    doc = _doc(n=6, steps=4)
    doc["output"] = {"snapshot_every": 2, "formats": ["csv", "vtk"]}
    sc.run_scenario(sc.parse_config(json.dumps(doc)), out_dir=tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())["snapshots"]
    assert [(e["step"], e["format"]) for e in man] == [
        (0, "csv"), (0, "vtk"), (2, "csv"), (2, "vtk"), (4, "csv"), (4, "vtk")]
    for e in man:
        assert (tmp_path / e["path"]).exists()


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"moduli": {"k_v": 0.0}}))
    assert cli.main(["simulate", "--config", str(bad)]) == sc.EXIT_CONFIG
    good = tmp_path / "good.json"
    good.write_text(json.dumps(_doc(n=6, steps=3)))
    assert cli.main(["simulate", "--config", str(good), "--out", str(tmp_path / "o")]) == 0
    assert json.loads(capsys.readouterr().out)["steps"] == 3
    assert cli.main(["simulate", "--config", str(good), "--cells", "2"]) == sc.EXIT_CONFIG
    assert cli.main(["verify", "hypotheses", "--samples", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["passed"] is True
