import json

import numpy as np
import pytest

from homogfc.cli import main
from homogfc.config import DEFAULTS, dump_json, from_dict, load_config
from homogfc.errors import ConfigError
from homogfc.pipeline import (
    ECHO,
    MANIFEST,
    csv_text,
    emit_plot_data,
    read_csv,
    run_pipeline,
    stage_hashes,
)

MINIMAL = {"geometry": {"inclusion": {"type": "disk", "center": [0.5, 0.5], "radius": 0.25}},
           "materials": {"c_g": 1.0, "c_s": 2.0, "lambda_g": 1.0, "lambda_s": 3.0, "D": 1.0}}

# small enough that every stage runs in about a second
FAST = dict(MINIMAL, geometry={"inclusion": MINIMAL["geometry"]["inclusion"], "h": 0.1},
            velocity={"type": "cellular", "amplitude": 1.0, "mean": [0.3, 0.1]},
            table={"n_T0": 2, "n_C0": 2, "peclet_scales": [0.0, 1.0]},
            macro={"N": 32, "t_end": 0.005, "snapshot_every": 5},
            micro={"eps": [2, 4], "T_f": 0.005})


def write_cfg(tmp_path, data, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data), encoding="utf-8")
    return p


def test_minimal_config_fills_defaults():
    cfg = from_dict(MINIMAL)
    assert cfg["kinetics"] == DEFAULTS["kinetics"]
    assert cfg["geometry"]["h"] == DEFAULTS["geometry"]["h"]


def test_echo_is_byte_stable(tmp_path):
    a = load_config(write_cfg(tmp_path, MINIMAL)).echo()
    b = from_dict(json.loads(a)).echo()
    assert a == b and a.endswith("\n")
    assert dump_json({"x": 0.1 + 0.2}) == '{\n  "x": 0.30000000000000004\n}\n'


def test_missing_section_rejected():
    with pytest.raises(ConfigError, match="materials"):
        from_dict({"geometry": MINIMAL["geometry"]})


@pytest.mark.parametrize("section,key,value,label", [
    ("materials", "c_g", -1.0, "(H1)"),
    ("materials", "D", 0.0, "(H1)"),
    ("kinetics", "T_a", 0.0, "(H1)"),
    ("cell", "T0", -1.0, "(H3)"),
])
def test_hypothesis_violations_cite_label(section, key, value, label):
    data = json.loads(json.dumps(MINIMAL))
    data.setdefault(section, {})[key] = value
    with pytest.raises(ConfigError) as info:
        from_dict(data)
    assert label in str(info.value) and key in str(info.value)


def test_unbounded_velocity_cites_h2():
    with pytest.raises(ConfigError, match=r"\(H2\)"):
        from_dict(dict(MINIMAL, velocity={"type": "cellular", "amplitude": float("inf")}))


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        from_dict(dict(MINIMAL, kinetcs={"A": 1.0}))
    with pytest.raises(ConfigError, match="unknown key"):
        from_dict(dict(MINIMAL, velocity={"type": "zero", "amplitude": 1.0}))


def test_parse_error_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "geometry": {,\n}\n', encoding="utf-8")
    with pytest.raises(ConfigError, match=r"line 2, column 16"):
        load_config(p)


def test_csv_uses_round_trip_floats():
    text = csv_text(["a", "b"], [(0.1, 3), (1 / 3, 7)])
    assert text == "a,b\n0.1,3\n0.3333333333333333,7\n"


def test_drifts_stage_writes_single_json(tmp_path):
    status = run_pipeline(from_dict(MINIMAL), ["drifts"], tmp_path)
    assert status == {"drifts": "ran"}
    outputs = sorted(p.name for p in tmp_path.iterdir())
    assert outputs == sorted(["drifts.json", ECHO, MANIFEST])
    d = json.loads((tmp_path / "drifts.json").read_text())
    assert d["b_T"] == [0.0, 0.0] and d["residuals"]["max"] <= 1e-10


def test_cache_hit_and_selective_rerun(tmp_path):
    cfg = from_dict(FAST)
    first = run_pipeline(cfg, ["macro"], tmp_path)
    assert set(first.values()) == {"ran"}
    assert set(run_pipeline(cfg, ["macro"], tmp_path).values()) == {"cached"}
    changed = json.loads(json.dumps(FAST))
    changed["macro"]["dt"] = 5e-4
    status = run_pipeline(from_dict(changed), ["macro"], tmp_path)
    assert status == {"drifts": "cached", "cell": "cached", "tensors": "cached", "macro": "ran"}
    changed["kinetics"] = {"A": 0.5}
    status = run_pipeline(from_dict(changed), ["macro"], tmp_path)
    assert status == {"drifts": "cached", "cell": "ran", "tensors": "ran", "macro": "ran"}


def test_tampered_output_is_recomputed(tmp_path):
    cfg = from_dict(MINIMAL)
    run_pipeline(cfg, ["drifts"], tmp_path)
    (tmp_path / "drifts.json").write_text("{}\n")
    assert run_pipeline(cfg, ["drifts"], tmp_path) == {"drifts": "ran"}


def test_stage_hashes_follow_dependencies():
    a = stage_hashes(from_dict(MINIMAL))
    b = stage_hashes(from_dict(dict(MINIMAL, micro={"T_f": 0.01})))
    assert [k for k in a if a[k] != b[k]] == ["validate"]
    c = stage_hashes(from_dict(dict(MINIMAL, seed=3)))
    assert {k for k in a if a[k] != c[k]} == {"drifts", "cell", "tensors", "macro", "validate"}


def test_full_fast_pipeline_and_plot_data(tmp_path):
    status = run_pipeline(from_dict(FAST), ["scaling", "macro", "validate"], tmp_path)
    assert set(status) == {"scaling", "drifts", "cell", "tensors", "macro", "validate"}
    rows = read_csv(tmp_path / "convergence.csv")
    assert [float(r["epsilon"]) for r in rows] == [0.5, 0.25]
    manifest = json.loads((tmp_path / MANIFEST).read_text())
    assert set(manifest["stages"]) == set(status)
    written = emit_plot_data(tmp_path)
    assert set(written) == {"rho_vs_eps.csv", "lambda_eff_11_vs_T0.csv", "tensor_vs_T0_C0.csv",
                            "tensor_vs_peclet.csv", "field_slice.csv"}
    assert len(read_csv(tmp_path / "plots" / "field_slice.csv")) == 32


def test_plot_data_needs_artifacts(tmp_path):
    with pytest.raises(ConfigError, match="no plottable"):
        emit_plot_data(tmp_path)


def test_custom_velocity_file_matches_constant(tmp_path):
    g = np.linspace(0, 1, 21)[:-1]
    X, Y = np.meshgrid(g, g)
    rows = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, 0.7), np.full(X.size, -0.2)])
    np.savetxt(tmp_path / "flow.csv", rows, delimiter=",", header="x,y,bx,by", comments="")
    base = dict(MINIMAL, geometry={"inclusion": {"type": "none"}, "h": 0.1})
    custom = write_cfg(tmp_path, dict(base, velocity={"type": "custom", "path": "flow.csv"}))
    run_pipeline(load_config(custom), ["drifts"], tmp_path / "a")
    run_pipeline(from_dict(dict(base, velocity={"type": "constant", "value": [0.7, -0.2]})),
                 ["drifts"], tmp_path / "b")
    a = json.loads((tmp_path / "a" / "drifts.json").read_text())
    b = json.loads((tmp_path / "b" / "drifts.json").read_text())
    assert np.allclose(a["b_T"], b["b_T"], atol=1e-12) and np.allclose(a["b_T"], [0.7, -0.2])


def test_bad_velocity_file(tmp_path):
    (tmp_path / "flow.csv").write_text("x,y,bx\n0,0,1\n")
    cfg = load_config(write_cfg(tmp_path, dict(MINIMAL, velocity={"type": "custom",
                                                                  "path": "flow.csv"})))
    with pytest.raises(ConfigError, match=r"\(H2\)"):
        run_pipeline(cfg, ["drifts"], tmp_path / "out")


def test_cli_ok_prints_json(tmp_path, capsys):
    assert main(["drifts", "--config", str(write_cfg(tmp_path, MINIMAL))]) == 0
    assert "b_T" in json.loads(capsys.readouterr().out)


def test_cli_scaling(tmp_path, capsys):
    assert main(["scaling", "--config", str(write_cfg(tmp_path, MINIMAL))]) == 0
    assert json.loads(capsys.readouterr().out)


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = json.loads(json.dumps(MINIMAL))
    bad["materials"]["c_g"] = -1.0
    assert main(["drifts", "--config", str(write_cfg(tmp_path, bad))]) == 2
    assert "(H1)" in capsys.readouterr().err
    assert main(["drifts"]) == 2


def test_cli_numerical_error_exit_code(tmp_path, capsys):
    data = json.loads(json.dumps(FAST))
    data["macro"]["T0"] = {"type": "constant", "value": 5.0}
    cfg = write_cfg(tmp_path, data)
    assert main(["macro", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    err = capsys.readouterr().err
    assert "stage 'macro' failed" in err
    assert (tmp_path / "o" / "macro.error.json").exists()


def test_cli_invariant_exit_code(tmp_path, capsys):
    data = json.loads(json.dumps(FAST))
    data["velocity"]["amplitude"] = 16.0
    data["kinetics"] = {"A": 0.0}
    cfg = write_cfg(tmp_path, data)
    assert main(["tensors", "--config", str(cfg)]) == 4
    assert "exceeds" in capsys.readouterr().err


def test_cli_overrides(tmp_path, capsys):
    cfg = str(write_cfg(tmp_path, FAST))
    assert main(["cell", "--config", cfg, "--T0", "1.2", "--C0", "0.3"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["T0"] == 1.2 and d["C0"] == 0.3
    assert main(["validate", "--config", cfg, "--eps", "2,x", "--out", str(tmp_path / "v")]) == 2


def test_cli_pipeline_and_plotdata(tmp_path, capsys):
    cfg = str(write_cfg(tmp_path, FAST))
    out = str(tmp_path / "art")
    assert main(["pipeline", "--config", cfg, "--out", out, "--stages", "tensors"]) == 0
    assert json.loads(capsys.readouterr().out) == {"drifts": "ran", "cell": "ran", "tensors": "ran"}
    assert main(["plotdata", out]) == 0
    assert "tensor_vs_T0_C0.csv" in capsys.readouterr().out.split()
    assert main(["pipeline", "--config", cfg]) == 2
