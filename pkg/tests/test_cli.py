"""Command-line contract: flags, config files, formats, exit codes,
byte-stable reports."""

import json

import pytest

from spincavity.cli import main


def _run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def _assert_round12(value):
    if isinstance(value, float):
        assert value == float(f"{value:.12g}")
    elif isinstance(value, dict):
        for v in value.values():
            _assert_round12(v)
    elif isinstance(value, list):
        for v in value:
            _assert_round12(v)


# ----------------------------------------------------------------- success


def test_list_protocols(capsys):
    code, out, err = _run(capsys, "list-protocols")
    assert code == 0
    assert out.splitlines() == [
        "ghz", "ghz-four-level", "ghz-three-level", "measure-reduce",
        "two-atom-qutrit",
    ]


def test_protocol_effective_json(capsys):
    code, out, err = _run(capsys, "protocol", "two-atom-qutrit")
    assert code == 0
    payload = json.loads(out)
    assert payload["protocol"] == "two-atom-qutrit"
    assert payload["engine"] == "effective"
    branch = payload["branches"][0]
    assert branch["probability"] == pytest.approx(1.0, abs=1e-9)
    assert branch["fidelity"] == pytest.approx(1.0, abs=1e-9)
    legs = branch["leg_populations"]
    assert set(legs) == {"gg", "ee", "ff"}
    assert sum(legs.values()) == pytest.approx(1.0, abs=1e-9)
    # effective runs fall back to a default detuning
    assert payload["config_echo"]["delta"] == 20.0
    assert payload["timings"]["t1"] > 0
    _assert_round12(payload)


def test_protocol_measure_reduce_csv(capsys):
    code, out, err = _run(capsys, "protocol", "measure-reduce", "--n", "4",
                          "--format", "csv")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "branch,probability,fidelity"
    rows = {ln.split(",")[0]: ln.split(",")[1:] for ln in lines[1:]}
    assert set(rows) == {"g", "e", "f"}
    assert float(rows["f"][0]) == pytest.approx(0.3, abs=1e-9)
    assert float(rows["f"][1]) == pytest.approx(1.0, abs=1e-9)
    assert float(rows["g"][0]) == pytest.approx(0.25, abs=1e-9)
    assert float(rows["e"][0]) == pytest.approx(0.45, abs=1e-9)


def test_protocol_seed_samples_outcome(capsys):
    code, out1, _ = _run(capsys, "protocol", "measure-reduce", "--n", "4",
                         "--seed", "11")
    assert code == 0
    code, out2, _ = _run(capsys, "protocol", "measure-reduce", "--n", "4",
                         "--seed", "11")
    assert code == 0
    p1, p2 = json.loads(out1), json.loads(out2)
    assert p1["sampled_outcome"] in ("g", "e", "f")
    assert p1["sampled_outcome"] == p2["sampled_outcome"]


def test_protocol_output_byte_stable(capsys):
    _, out1, _ = _run(capsys, "protocol", "ghz", "--n", "3")
    _, out2, _ = _run(capsys, "protocol", "ghz", "--n", "3")
    assert out1 == out2


def test_config_file_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"protocol": "ghz", "n": 4, "format": "json"}))
    code, out, err = _run(capsys, "protocol", "--config", str(cfg), "--n", "3")
    assert code == 0
    payload = json.loads(out)
    assert payload["config_echo"]["n"] == 3  # flag wins over file
    assert payload["protocol"] == "ghz"


def test_out_file_and_force(tmp_path, capsys):
    path = tmp_path / "report.json"
    code, out, _ = _run(capsys, "protocol", "ghz", "--out", str(path))
    assert code == 0
    assert out == ""
    first = path.read_text()
    assert json.loads(first)["protocol"] == "ghz"
    # refuse to overwrite without --force
    code, _, err = _run(capsys, "protocol", "ghz", "--out", str(path))
    assert code == 1
    assert "--force" in err
    code, _, _ = _run(capsys, "protocol", "ghz", "--out", str(path), "--force")
    assert code == 0
    # identical physics; the echo differs only in the force flag itself
    a, b = json.loads(first), json.loads(path.read_text())
    a.pop("config_echo"), b.pop("config_echo")
    assert a == b


def test_sweep_csv_header_and_rows(capsys):
    code, out, _ = _run(capsys, "sweep", "ghz", "--sweep-param", "nbar",
                        "--sweep-from", "0", "--sweep-to", "1",
                        "--sweep-steps", "3", "--format", "csv")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "sweep_param,value,branch,probability,fidelity"
    assert len(lines) == 4
    # the effective engine has no mode, so the thermal occupation is inert
    fids = {ln.split(",")[4] for ln in lines[1:]}
    assert len(fids) == 1


def test_sweep_json_rows(capsys):
    code, out, _ = _run(capsys, "sweep", "ghz", "--sweep-param", "g",
                        "--sweep-from", "0.5", "--sweep-to", "1.5",
                        "--sweep-steps", "2")
    assert code == 0
    payload = json.loads(out)
    assert len(payload["rows"]) == 2
    row = payload["rows"][0]
    assert set(row) == {"sweep_param", "value", "branch", "probability", "fidelity"}
    assert row["sweep_param"] == "g"
    assert row["value"] == 0.5
    _assert_round12(payload)


def test_compare_frames_cavity(capsys):
    code, out, _ = _run(capsys, "compare-frames", "ghz", "--n", "2",
                        "--g", "1", "--delta", "5", "--fock-cutoff", "8")
    assert code == 0
    payload = json.loads(out)
    frames = {row["frame"]: row["fidelity"] for row in payload["frames"]}
    assert set(frames) == {"effective", "interaction", "slow"}
    assert frames["effective"] == pytest.approx(1.0, abs=1e-9)
    assert frames["interaction"] >= 0.9
    assert frames["slow"] >= 0.9
    pairs = {row["frames"]: row["trace_distance"] for row in payload["pairs"]}
    assert set(pairs) == {"effective|interaction", "effective|slow",
                          "interaction|slow"}
    for dist in pairs.values():
        assert 0.0 <= dist < 0.5


def test_compare_frames_csv_shape(capsys):
    code, out, _ = _run(capsys, "compare-frames", "ghz", "--n", "2",
                        "--g", "1", "--delta", "5", "--fock-cutoff", "8",
                        "--format", "csv")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "kind,name,value"
    kinds = [ln.split(",")[0] for ln in lines[1:]]
    assert kinds == ["fidelity"] * 3 + ["trace_distance"] * 3


# ------------------------------------------------------------ config errors


@pytest.mark.parametrize("argv", [
    ("protocol",),                                     # no protocol name
    ("protocol", "bogus"),                             # unknown protocol
    ("protocol", "ghz", "--engine", "bogus"),          # bad engine choice
    ("protocol", "two-atom-qutrit", "--n", "3"),       # wrong atom count
    ("protocol", "ghz", "--engine", "full"),           # full engine, no delta
    ("protocol", "ghz", "--engine", "lindblad"),       # decay engine, no delta
    ("compare-frames", "ghz"),                         # frames need a delta
    ("protocol", "ghz", "--engine", "lindblad", "--system", "ion", "--delta", "5"),
    ("sweep", "ghz"),                                  # no sweep param
    ("sweep", "ghz", "--sweep-param", "g"),            # no range
    ("sweep", "ghz", "--sweep-param", "g", "--sweep-from", "0",
     "--sweep-to", "1", "--sweep-steps", "1"),         # too few steps
    (),                                                # no subcommand
])
def test_config_errors_exit_1(capsys, argv):
    code, out, err = _run(capsys, *argv)
    assert code == 1
    assert "config error" in err


def test_unknown_config_key_exit_1(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"protocol": "ghz", "turbo": True}))
    code, _, err = _run(capsys, "protocol", "--config", str(cfg))
    assert code == 1
    assert "turbo" in err


def test_malformed_config_exit_1(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{not json")
    code, _, err = _run(capsys, "protocol", "--config", str(cfg))
    assert code == 1


def test_thermal_needs_large_cutoff_exit_1(capsys):
    code, _, err = _run(capsys, "protocol", "ghz", "--engine", "full",
                        "--delta", "10", "--nbar", "1", "--fock-cutoff", "12")
    assert code == 1
    assert "fock-cutoff" in err


# ------------------------------------------------------------ physics errors


def test_truncation_failure_exit_2(capsys):
    # near-resonant strong coupling on a tiny mode: population hits the
    # top Fock levels and the run must fail as a physics error
    code, _, err = _run(capsys, "protocol", "ghz", "--n", "2",
                        "--engine", "full", "--g", "1", "--delta", "1.2",
                        "--fock-cutoff", "3")
    assert code == 2
    assert "physics error" in err
