import csv
import json
import xml.etree.ElementTree as ET

import pytest

from polyent.cli_reports import (
    CSV_HEADER,
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_VERIFY,
    PRESETS,
    ConfigError,
    ExperimentSpec,
    OrphanRowError,
    ResultRow,
    build_system,
    compare_presets,
    fit_and_plot,
    format_claims,
    load_rows,
    load_spec,
    main,
    run_experiment,
)

SMALL = {
    "schema": 1,
    "name": "small",
    "system": {"kind": "action-angle", "hamiltonian": "quadratic", "bounds": [[1.0, 1.2]]},
    "epsilons": [0.1],
    "ns": [2, 4, 8, 16],
    "estimators": ["G", "S"],
}


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=2))
    return path


def synthetic(ns, counts, kind="G"):
    return [ResultRow("h", "sys", kind, n, 0.1, c, 0.0) for n, c in zip(ns, counts)]


# -- config ---------------------------------------------------------------------------


def test_config_error_reports_line(tmp_path, capsys):
    bad = dict(SMALL, epsilons=[1.5])
    path = write_config(tmp_path, bad)
    with pytest.raises(ConfigError) as info:
        load_spec(path)
    line = next(i for i, t in enumerate(path.read_text().splitlines(), 1) if '"epsilons"' in t)
    assert info.value.line == line and info.value.field == "epsilons"
    assert main(["estimate", "--config", str(path)]) == EXIT_CONFIG
    assert f"line {line}" in capsys.readouterr().err


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{\n  "system": {"kind": "kronecker"},\n  "ns": [1, 2,]\n}\n')
    with pytest.raises(ConfigError) as info:
        load_spec(path)
    assert info.value.line == 3


@pytest.mark.parametrize(
    "patch",
    [{"estimators": ["X"]}, {"system": {"kind": "nope"}}, {"surprise": 1}, {"grid": {"factor": 0.5}}, {"schema": 2}],
)
def test_invalid_configs_rejected(patch):
    with pytest.raises(ConfigError):
        ExperimentSpec.from_dict(dict(SMALL, **patch))


def test_certificates_need_pmodel():
    with pytest.raises(ConfigError):
        ExperimentSpec.from_dict(dict(SMALL, certificates={"lower": {"epsilon": 0.1, "N": [36]}}))


@pytest.mark.parametrize("kind", ["kronecker", "action-angle", "pmodel-planar", "pmodel-product", "rotator-pendulum", "elliptic"])
def test_every_system_kind_builds(kind):
    sys = build_system({"kind": kind})
    assert sys.space.dim >= 1


def test_hash_ignores_output_dir():
    a = ExperimentSpec.from_dict(SMALL)
    b = ExperimentSpec.from_dict(dict(SMALL, output_dir="elsewhere"))
    assert a.hash == b.hash
    assert a.hash != ExperimentSpec.from_dict(dict(SMALL, ns=[2, 4, 8, 32])).hash


# -- runs and outputs ---------------------------------------------------------------------


def test_csv_header_and_rows(tmp_path):
    spec = ExperimentSpec.from_dict(dict(SMALL, output_dir=str(tmp_path / "o")))
    res = run_experiment(spec)
    with open(res.paths["csv"], newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == 1 + 2 * 4
    assert all(r[0] == spec.hash for r in rows[1:])
    assert res.exit_code == EXIT_OK


def test_byte_identical_csv(tmp_path):
    a = run_experiment(ExperimentSpec.from_dict(dict(SMALL, output_dir=str(tmp_path / "a"))))
    b = run_experiment(ExperimentSpec.from_dict(dict(SMALL, output_dir=str(tmp_path / "b"))), threads=3)
    assert open(a.paths["csv"], "rb").read() == open(b.paths["csv"], "rb").read()


def test_no_cache_changes_only_timings(tmp_path):
    a = run_experiment(ExperimentSpec.from_dict(dict(SMALL, output_dir=str(tmp_path / "a"))))
    b = run_experiment(ExperimentSpec.from_dict(dict(SMALL, output_dir=str(tmp_path / "b"))), use_cache=False)
    assert [r.count for r in a.rows] == [r.count for r in b.rows]


def test_empty_estimator_set_is_noop(tmp_path):
    data = {"system": {"kind": "kronecker"}, "output_dir": str(tmp_path / "o")}
    res = run_experiment(ExperimentSpec.from_dict(data))
    assert res.rows == [] and res.exit_code == EXIT_OK
    assert open(res.paths["csv"]).read().strip() == ",".join(CSV_HEADER)


def test_orphan_rows_rejected(tmp_path):
    res = run_experiment(ExperimentSpec.from_dict(dict(SMALL, output_dir=str(tmp_path / "o"))))
    assert len(load_rows(res.paths["csv"])) == 8
    with open(res.paths["csv"], "a") as fh:
        fh.write("deadbeef0000,action-angle,G,32,0.1,5,0.000\n")
    with pytest.raises(OrphanRowError):
        load_rows(res.paths["csv"])


def test_simulate_writes_orbits(tmp_path):
    assert main(["simulate", "--config", str(write_config(tmp_path, SMALL)), "--out", str(tmp_path / "o")]) == EXIT_OK
    with open(tmp_path / "o" / "orbits.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["point", "t", "x0", "x1"] and len(rows) == 1 + 4 * 65


def test_estimate_and_report_cli(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["estimate", "--config", str(write_config(tmp_path, SMALL)), "--out", str(out)]) == EXIT_OK
    assert main(["report", "--input", str(out / "results.csv")]) == EXIT_OK
    text = capsys.readouterr().out
    assert "slope=" in text
    assert any(p.suffix == ".svg" for p in out.iterdir())


def test_certify_cli_writes_certificates(tmp_path):
    cfg = {
        "system": {"kind": "pmodel-planar"},
        "certificates": {"lower": {"epsilon": 0.1, "N": [36]}},
        "output_dir": str(tmp_path / "o"),
    }
    assert main(["certify", "--config", str(write_config(tmp_path, cfg))]) == EXIT_OK
    doc = json.loads((tmp_path / "o" / "certificate-lower-N36.json").read_text())
    assert doc["verification"]["passed"] and doc["margin"] >= 0


def test_weak_cli(tmp_path, capsys):
    assert main(["weak", "--config", str(write_config(tmp_path, SMALL)), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert "s_c=" in capsys.readouterr().out


def test_inadmissible_certificate_exit_code(tmp_path):
    cfg = {"system": {"kind": "pmodel-planar"}, "certificates": {"lower": {"epsilon": 0.3, "N": [36]}}, "output_dir": str(tmp_path / "o")}
    assert main(["certify", "--config", str(write_config(tmp_path, cfg))]) == EXIT_VERIFY


# -- fits and plots --------------------------------------------------------------------


def test_synthetic_fits():
    ns = [16, 32, 64, 128, 256]
    assert fit_and_plot(synthetic(ns, ns))[0].slope == pytest.approx(1.0, abs=1e-9)
    assert fit_and_plot(synthetic(ns, [n * n for n in ns]))[0].slope == pytest.approx(2.0, abs=1e-9)
    with pytest.raises(ValueError):
        fit_and_plot(synthetic(ns, ns) + synthetic(ns, ns, kind="S"))


def test_svg_self_contained(tmp_path):
    ns = [16, 32, 64, 128]
    _, path = fit_and_plot(synthetic(ns, [3 * n for n in ns]), tmp_path / "fit.svg")
    text = open(path).read()
    root = ET.fromstring(text)
    assert root.tag.endswith("svg")
    assert "href" not in text and "<image" not in text and "@import" not in text


# -- presets -------------------------------------------------------------------------------


def test_corrupted_preset_gives_fail_row():
    bad = json.loads(json.dumps(PRESETS["pmodel-lower"]))
    bad["certificates"]["lower"]["epsilon"] = 0.4
    rows = compare_presets([bad])
    assert len(rows) == 1 and not rows[0].passed and "error" in rows[0].value


def test_claims_table_deterministic():
    item = dict(SMALL, ns=[2, 4, 8, 16], estimators=["G"], claims=[{"type": "slope", "kind": "G", "epsilon": 0.1, "band": [0.0, 2.0]}])
    first = format_claims(compare_presets([item]))
    assert first == format_claims(compare_presets([item]))
    assert first.splitlines()[0] == "preset,claim,value,target,result"
    assert first.splitlines()[1].endswith(",pass")


def test_presets_cli_single(tmp_path, capsys):
    assert main(["presets", "--preset", "isometry-rank0", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "presets.csv").read_text() == capsys.readouterr().out
