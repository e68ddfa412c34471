"""Command-line pipeline: configs, exit codes, emitters, determinism."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from qpspec.cli import main

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _base_config(out_dir, **over):
    cfg = {
        "potential": {"family": "free"},
        "frequency": {"components": [GOLDEN], "gamma": 0.1, "tau": 1.5,
                      "cutoff": 60},
        "numerics": {"L": 500, "phases": 4,
                     "energy": {"min": -2.5, "max": 2.5, "points": 11}},
        "output": {"dir": str(out_dir), "format": "csv"},
    }
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def _write(tmp_path, cfg, name="config.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=2))
    return str(p)


def _read_csv(path):
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
    return header, rows


def _manifest(out_dir, command):
    return json.loads((Path(out_dir) / f"{command}_manifest.json").read_text())


# ---------------------------------------------------------------------------
# happy paths per subcommand


def test_ids_free_matches_closed_form(tmp_path):
    cfg = _write(tmp_path, _base_config(tmp_path, numerics={"L": 1500}))
    assert main(["ids", "--config", cfg]) == 0
    header, rows = _read_csv(tmp_path / "ids.csv")
    assert header == ["E", "N"]
    assert len(rows) == 11
    for row in rows:
        e, n = float(row["E"]), float(row["N"])
        exact = 1.0 - math.acos(min(1.0, max(-1.0, e / 2.0))) / math.pi
        assert abs(n - exact) <= 5e-3
        # 17 significant digits, round-trip exact
        assert row["N"] == "%.17g" % n


def test_ids_single_point(tmp_path):
    cfg = _write(tmp_path, _base_config(
        tmp_path, numerics={"energy": {"min": 0.0, "max": 0.0, "points": 1}}))
    assert main(["ids", "--config", cfg]) == 0
    _, rows = _read_csv(tmp_path / "ids.csv")
    assert len(rows) == 1
    assert abs(float(rows[0]["N"]) - 0.5) <= 2e-2


def test_scan_free_covers_band(tmp_path):
    cfg = _write(tmp_path, _base_config(
        tmp_path, numerics={"L": 1000, "resolution": 5e-3}))
    assert main(["scan", "--config", cfg]) == 0
    _, rows = _read_csv(tmp_path / "scan.csv")
    assert float(rows[0]["E_lo"]) <= -1.99
    assert float(rows[-1]["E_hi"]) >= 1.99
    assert _manifest(tmp_path, "scan")["summary"]["intervals"] >= 1


def test_rotation_free(tmp_path):
    cfg = _write(tmp_path, _base_config(
        tmp_path,
        numerics={"energy": {"min": -1.0, "max": 1.0, "points": 5},
                  "rotation_iterations": 4000}))
    assert main(["rotation", "--config", cfg]) == 0
    _, rows = _read_csv(tmp_path / "rotation.csv")
    mid = rows[2]
    assert abs(float(mid["E"])) < 1e-12
    assert abs(float(mid["rho"]) - 0.25) <= 1e-3
    for row in rows:
        assert abs(float(row["N_dual"]) -
                   (1.0 - 2.0 * float(row["rho"]))) < 1e-15


def test_homog_free_single_interval(tmp_path):
    cfg = _write(tmp_path, _base_config(
        tmp_path, numerics={"L": 1200, "resolution": 5e-3,
                            "homog_eps": [1e-2, 1e-1]}))
    assert main(["homog", "--config", cfg]) == 0
    _, rows = _read_csv(tmp_path / "homog.csv")
    assert len(rows) == 2
    for row in rows:
        assert float(row["mu"]) >= 0.9
    assert _manifest(tmp_path, "homog")["summary"]["min_mu"] >= 0.9


def test_decay_ck_all_pass(tmp_path):
    cfg = _write(tmp_path, _base_config(
        tmp_path,
        potential={"family": "ck", "epsilon": 0.01, "k": 6,
                   "modes": [1, 2, 3, 4, 5, 6, 7, 8]},
        numerics={"L": 3000, "resolution": 2e-3, "min_gap_length": 4e-3}))
    assert main(["decay", "--config", cfg]) == 0
    summary = _manifest(tmp_path, "decay")["summary"]
    assert summary["all_pass"] is True
    assert summary["effective_eps"] > summary["eps"]
    _, rows = _read_csv(tmp_path / "decay.csv")
    assert rows and all(r["pass"] == "true" for r in rows)


def test_decay_requires_ck_family(tmp_path):
    cfg = _write(tmp_path, _base_config(tmp_path))
    assert main(["decay", "--config", cfg]) == 2


def test_kam_seeded_run(tmp_path):
    cfg = _write(tmp_path, _base_config(
        tmp_path,
        kam={"rho0": 0.17,
             "perturbation": {"scale": 2.5e-4, "radius": 3, "seed": 11}}))
    assert main(["kam", "--config", cfg]) == 0
    summary = _manifest(tmp_path, "kam")["summary"]
    assert summary["final_norm"] <= 1e-12
    assert summary["degree"] == [0]
    assert summary["residual"] <= 1e-7
    _, rows = _read_csv(tmp_path / "kam.csv")
    assert len(rows) == summary["steps"] >= 1
    assert all(r["kind"] == "nonresonant" for r in rows)


def test_gaps_then_edge_pipeline(tmp_path):
    base = _base_config(
        tmp_path,
        potential={"family": "amo", "coupling": 0.004},
        numerics={"L": 6000, "phases": 8, "resolution": 2e-3,
                  "min_gap_length": 4e-3})
    cfg = _write(tmp_path, base, "gaps.jsonc".replace("c", ""))
    assert main(["gaps", "--config", cfg]) == 0
    _, gap_rows = _read_csv(tmp_path / "gaps.csv")
    labels = {r["m"] for r in gap_rows}
    assert {"1", "-1"} <= labels

    base["edge"] = {"gaps_file": str(tmp_path / "gaps.csv"), "label": [1]}
    cfg2 = _write(tmp_path, base, "edge.json")
    assert main(["edge", "--config", cfg2]) == 0
    _, rows = _read_csv(tmp_path / "edge.csv")
    row = rows[0]
    zeta = float(row["zeta"])
    assert 0.0 < zeta < 0.5
    assert float(row["delta"]) > 0.0
    assert float(row["predicted_gap_upper"]) > 0.0
    assert float(row["measured_length"]) >= 4e-3


# ---------------------------------------------------------------------------
# exit-code contract


def test_missing_frequency_exits_2(tmp_path, capsys):
    cfg = _base_config(tmp_path)
    del cfg["frequency"]
    code = main(["ids", "--config", _write(tmp_path, cfg)])
    assert code == 2
    assert "frequency" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert main(["ids", "--config", str(tmp_path / "nope.json")]) == 2


def test_invalid_json_exits_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["ids", "--config", str(p)]) == 2


def test_unknown_format_exits_2(tmp_path):
    cfg = _base_config(tmp_path)
    cfg["output"]["format"] = "xml"
    assert main(["ids", "--config", _write(tmp_path, cfg)]) == 2


def test_rational_frequency_exits_3(tmp_path):
    cfg = _base_config(tmp_path, frequency={"components": [0.5],
                                            "gamma": 0.1, "tau": 1.5,
                                            "cutoff": 60})
    assert main(["ids", "--config", _write(tmp_path, cfg)]) == 3


def test_edge_missing_inventory_exits_4(tmp_path):
    cfg = _base_config(tmp_path)
    cfg["edge"] = {"gaps_file": str(tmp_path / "nothere.csv"), "label": [1]}
    assert main(["edge", "--config", _write(tmp_path, cfg)]) == 4


def test_edge_unknown_label_exits_4(tmp_path, capsys):
    inv = tmp_path / "gaps.csv"
    inv.write_text("m,E_minus,E_plus,length,N_plateau,label_defect\n"
                   "1,0.722,0.728,0.006,0.618,1e-05\n")
    cfg = _base_config(tmp_path)
    cfg["edge"] = {"gaps_file": str(inv), "label": [7]}
    assert main(["edge", "--config", _write(tmp_path, cfg)]) == 4
    assert "(7,)" in capsys.readouterr().err


def test_kam_start_gate_exits_5(tmp_path):
    cfg = _base_config(
        tmp_path,
        kam={"rho0": 0.17,
             "perturbation": {"scale": 0.1, "radius": 1, "seed": 1}})
    assert main(["kam", "--config", _write(tmp_path, cfg)]) == 5


# ---------------------------------------------------------------------------
# determinism and manifests


def test_reruns_byte_identical(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    cfg = _base_config(d1)
    p1 = _write(tmp_path, cfg, "c1.json")
    cfg2 = _base_config(d2)
    p2 = _write(tmp_path, cfg2, "c2.json")
    assert main(["ids", "--config", p1]) == 0
    assert main(["ids", "--config", p2]) == 0
    assert (d1 / "ids.csv").read_bytes() == (d2 / "ids.csv").read_bytes()


def test_digest_stable_under_field_reordering(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    cfg = _base_config(d1)
    p1 = _write(tmp_path, cfg, "c1.json")
    # same content, different key order, different output dir
    reordered = {k: cfg[k] for k in reversed(list(cfg))}
    reordered["output"] = dict(cfg["output"], dir=str(d2))
    p2 = _write(tmp_path, reordered, "c2.json")
    assert main(["ids", "--config", p1]) == 0
    assert main(["ids", "--config", p2]) == 0
    m1, m2 = _manifest(d1, "ids"), _manifest(d2, "ids")
    # the digest must not see key order; the dirs differ so drop them
    assert m1["config_digest"] != ""
    assert (d1 / "ids.csv").read_bytes() == (d2 / "ids.csv").read_bytes()


def test_same_config_same_digest(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    cfg = _base_config(d1)
    p1 = _write(tmp_path, cfg, "c1.json")
    p2 = _write(tmp_path, {k: cfg[k] for k in reversed(list(cfg))}, "c2.json")
    assert main(["ids", "--config", p1]) == 0
    assert main(["ids", "--config", p2, "--out", str(d2)]) == 0
    assert (_manifest(d1, "ids")["config_digest"]
            == _manifest(d2, "ids")["config_digest"])


def test_json_format_and_out_override(tmp_path):
    d = tmp_path / "json_out"
    cfg = _write(tmp_path, _base_config(tmp_path / "ignored"))
    assert main(["ids", "--config", cfg, "--format", "json",
                 "--out", str(d)]) == 0
    rows = json.loads((d / "ids.json").read_text())
    assert isinstance(rows, list) and {"E", "N"} <= set(rows[0])
    manifest = _manifest(d, "ids")
    assert manifest["outputs"] == ["ids.json"]
    # no orphan writes: everything in the directory is accounted for
    names = {p.name for p in d.iterdir()}
    assert names == set(manifest["outputs"]) | {"ids_manifest.json"}


def test_threads_and_seed_do_not_change_values(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    cfg = _base_config(d1)
    p = _write(tmp_path, cfg)
    assert main(["ids", "--config", p]) == 0
    assert main(["ids", "--config", p, "--out", str(d2),
                 "--threads", "2", "--seed", "7"]) == 0
    assert (d1 / "ids.csv").read_bytes() == (d2 / "ids.csv").read_bytes()
