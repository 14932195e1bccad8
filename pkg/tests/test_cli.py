import json

import pytest

from magchan.cli import ConfigError, RunConfig, main, parse_config, sweep, worker_count

SIN = {"field": {"b": {"sin": [1.0]}}}
CONST = {"field": {"b": {"const": -1.0}}}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _run(tmp_path, cfg, command, *extra):
    out = tmp_path / "out"
    code = main(["--config", _write(tmp_path, cfg), "--command", command, "--out", str(out), *extra])
    return code, out


def test_parse_config_defaults_and_hash():
    rc = parse_config(dict(SIN, energy=2.0))
    assert isinstance(rc, RunConfig)
    assert rc.energies() == [2.0] and rc.ensemble == {"count": 1, "seed": 0}
    again = parse_config(rc.to_json())
    assert again.hash() == rc.hash()
    moved = parse_config(dict(SIN, energy=2.0, output={"path": "elsewhere.json"}))
    assert moved.hash() == rc.hash()
    assert parse_config(dict(SIN, energy=2.5)).hash() != rc.hash()


def test_energy_grid():
    rc = parse_config(dict(SIN, energy={"grid": {"lo": 1.0, "hi": 2.0, "n": 3}}))
    assert rc.energies() == [1.0, 1.5, 2.0]
    with pytest.raises(ConfigError):
        parse_config(dict(SIN, energy={"grid": {"lo": 2.0, "hi": 1.0, "n": 3}}))


def test_unknown_key_is_named(tmp_path, capsys):
    code, _ = _run(tmp_path, {"field": {"bb": {"sin": [1.0]}}}, "fixed-points")
    assert code == 2
    assert "bb" in capsys.readouterr().err


def test_config_errors():
    with pytest.raises(ConfigError):
        parse_config("{not json")
    with pytest.raises(ConfigError):
        parse_config({"energy": 1.0})
    with pytest.raises(ConfigError) as exc:
        parse_config(dict(SIN, ensemble={"count": 0}))
    assert exc.value.path == "ensemble/count"
    with pytest.raises(ConfigError):
        parse_config(dict(SIN, energy=1.0, ensemble={"count": 200000}))


def test_fixed_points_command(tmp_path):
    code, out = _run(tmp_path, dict(SIN, energy=2.0), "fixed-points")
    assert code == 0
    doc = json.loads((out / "fixed-points.json").read_text())
    assert len(doc["result"]["rows"]) == 4
    h = doc["header"]
    assert h["command"] == "fixed-points" and h["w_convention"] == "exact" and len(h["config_hash"]) == 64


def test_fixed_points_csv_has_comment_header(tmp_path):
    code, out = _run(tmp_path, dict(SIN, energy=2.0, output={"format": "csv"}), "fixed-points")
    assert code == 0
    lines = (out / "fixed-points.csv").read_text().splitlines()
    comments = [ln for ln in lines if ln.startswith("# ")]
    assert any(ln.startswith("# config_hash=") for ln in comments)
    body = lines[len(comments):]
    assert body[0].startswith("E,theta,sign,rho,class") and len(body) == 5


def test_spiral_window_command(tmp_path):
    code, out = _run(tmp_path, dict(CONST, options={"bracket": [0.1, 10.0]}), "spiral-window")
    assert code == 0
    res = json.loads((out / "spiral-window.json").read_text())["result"]
    assert res["E_d"] == pytest.approx(0.5, abs=1e-6)
    assert res["E_e"] == "inf"


def test_numerical_failure_exit_code(tmp_path, capsys):
    code, _ = _run(tmp_path, dict(SIN, options={"bracket": [0.1, 10.0]}), "spiral-window")
    assert code == 3
    assert "spiral-window" in capsys.readouterr().err


def test_classify_budget_exhaustion_exits_zero(tmp_path):
    cfg = dict(SIN, energy=2.0, tolerances={"tau_max": 0.5}, options={"start": [2.0, 2.5]})
    code, out = _run(tmp_path, cfg, "classify")
    assert code == 0
    res = json.loads((out / "classify.json").read_text())["result"]
    assert res["records"][0]["outcome"]["variant"] == "Undetermined"


def test_seed_override_changes_ensemble(tmp_path):
    cfg = dict(SIN, energy=2.0, ensemble={"count": 3, "seed": 1})
    rc = parse_config(cfg)
    a = sweep(rc, threads=1)
    rc.ensemble["seed"] = 2
    b = sweep(rc, threads=1)
    assert [r["state"] for r in a.records] != [r["state"] for r in b.records]
    assert set(a.counts) == {"FixedPoint"}


def test_sweep_is_deterministic_across_worker_counts(tmp_path):
    cfg = dict(CONST, energy={"grid": {"lo": 1.0, "hi": 2.0, "n": 3}}, ensemble={"count": 4, "seed": 9})
    p = _write(tmp_path, cfg)
    outs = []
    for threads in ("1", "3"):
        d = tmp_path / f"o{threads}"
        assert main(["--config", p, "--command", "sweep", "--out", str(d), "--threads", threads]) == 0
        outs.append((d / "sweep.json").read_bytes())
    assert outs[0] == outs[1]


def test_worker_count_environment(monkeypatch):
    monkeypatch.setenv("MAGCHAN_WORKERS", "3")
    assert worker_count() == 3
    assert worker_count(5) == 5
    monkeypatch.setenv("MAGCHAN_WORKERS", "x")
    with pytest.raises(ConfigError):
        worker_count()


def test_geodesic_command(tmp_path):
    cfg = {"field": {"b": {"const": 0.0}}, "geo": {"f": {"cos": [2.0]}, "c": 0.5}, "energy": 1.0,
           "ensemble": {"count": 5, "seed": 3}}
    code, out = _run(tmp_path, cfg, "geodesic")
    assert code == 0
    res = json.loads((out / "geodesic.json").read_text())["result"]
    assert res["counts"] == {"FixedPoint": 5}


def test_missing_geo_block(tmp_path):
    code, _ = _run(tmp_path, dict(SIN, energy=1.0), "geodesic")
    assert code == 2
