import json
import subprocess
import sys
import textwrap

import pytest

from thermo_billiards import cli
from thermo_billiards.cli import ConfigError, main, parse_config, serialize_config
from thermo_billiards.experiments import DriftConfig
from thermo_billiards.geometry import Overlap, reference_table

SMALL = textwrap.dedent("""
    seed: 42
    validate: {n_rays: 20000}
    simulate: {n_trajectories: 2, n_steps: 50, burn_in: 5}
    tails: {n_replicates: 3, steps_per_replicate: 20000, n_quadrature: 10000}
    drift: {n_per_point: 2000}
    grazing: {n: 100000}
    equilibrate: {n_particles: 2000, checkpoints: [1, 3]}
    subexp: {n_particles: 2000, chain_steps: 1000000, n_boot: 10, n_taus: 5}
    laws: {n_collisions: 10000, n_flow: 10000, burn_in: 100}
""")


def write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_config_defaults():
    cfg = parse_config("seed: 3\ntable: {preset: reference}\n")
    assert cfg.seed == 3
    assert cfg.table == reference_table()
    assert cfg.section("drift") == DriftConfig()
    assert cfg.format == "both"


def test_round_trip():
    cfg = parse_config(SMALL)
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert serialize_config(again) == serialize_config(cfg)


def test_custom_disks_round_trip():
    text = "table:\n  sigma_cap: 2.5\n  disks:\n    - {center: [0.25, 0.25], radius: 0.42}\n    - {center: [0.75, 0.75], radius: 0.22, beta: 1.0}\n"
    cfg = parse_config(text)
    assert parse_config(serialize_config(cfg)) == cfg


def test_overlap_listed():
    text = "table:\n  disks:\n    - {center: [0.3, 0.5], radius: 0.2}\n    - {center: [0.69, 0.5], radius: 0.2}\n"
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    assert any(isinstance(v, Overlap) and (v.i, v.j) == (0, 1) for v in e.value.report.violations)
    assert "Overlap(0,1)" in str(e.value)


@pytest.mark.parametrize("text", [
    "sede: 1\n",
    "drift: {epsilon: 1.5}\n",
    "drift: {n_per_points: 3}\n",
    "tails: {n_replicates: 0}\n",
    "table: {preset: moon}\n",
    "format: xml\n",
    "seed: -4\n",
    "seed: 1.5\n",
    "simulate: {burn_in: -1}\n",
])
def test_semantic_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_syntax_error_has_position():
    with pytest.raises(ConfigError) as e:
        parse_config("seed: 1\ntable: {preset: reference\n")
    assert e.value.line is not None and e.value.column is not None


def test_exit_code_config_error(tmp_path, capsys):
    p = write(tmp_path, "drift: {epsilon: 2.0}\n")
    assert main(["drift", "--config", str(p), "--quiet"]) == cli.EXIT_CONFIG
    assert main(["validate", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG


def test_validate_reference(tmp_path, capsys):
    p = write(tmp_path, SMALL)
    out = tmp_path / "o"
    assert main(["validate", "--config", str(p), "--out", str(out), "--quiet"]) == 0
    rep = json.loads((out / "validate.json").read_text())
    m = {x["key"]: x for x in rep["metrics"]}
    assert m["horizon_violations"]["value"] == 0.0
    assert m["sigma_min_hat"]["ci_low"] is None  # NaN is written as null


def test_single_disk_horizon_violation(tmp_path):
    text = "seed: 1\ntable: {preset: single_disk, sigma_cap: 2.0}\nvalidate: {n_rays: 20000}\n"
    p = write(tmp_path, text)
    for sub in ("validate", "simulate", "drift"):
        assert main([sub, "--config", str(p), "--out", str(tmp_path / sub), "--quiet"]) == cli.EXIT_HORIZON


def test_simulate_trace(tmp_path):
    p = write(tmp_path, SMALL)
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path), "--quiet"]) == 0
    raw = (tmp_path / "trace.csv").read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == ",".join(cli.TRACE_COLUMNS)
    assert len(lines) == 1 + 2 * 50


def test_outputs_byte_identical(tmp_path):
    p = write(tmp_path, SMALL)
    runs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        code = main(["tails", "--config", str(p), "--out", str(d), "--quiet"])
        assert code in (0, 4, 5)
        runs.append({f: (d / f).read_bytes() for f in ("tails.csv", "tails.json")})
    assert runs[0] == runs[1]


def test_seed_override_changes_output(tmp_path):
    p = write(tmp_path, SMALL)
    main(["drift", "--config", str(p), "--out", str(tmp_path / "a"), "--quiet"])
    main(["drift", "--config", str(p), "--out", str(tmp_path / "b"), "--seed", "43", "--quiet"])
    a = (tmp_path / "a" / "drift.csv").read_text()
    b = (tmp_path / "b" / "drift.csv").read_text()
    assert a != b and ",43\n" in b


def test_format_selection(tmp_path):
    p = write(tmp_path, SMALL)
    main(["drift", "--config", str(p), "--out", str(tmp_path), "--format", "csv", "--quiet"])
    assert (tmp_path / "drift.csv").exists() and not (tmp_path / "drift.json").exists()


def test_csv_floats_round_trip(tmp_path):
    p = write(tmp_path, SMALL)
    main(["drift", "--config", str(p), "--out", str(tmp_path), "--quiet"])
    rows = (tmp_path / "drift.csv").read_text().splitlines()[1:]
    rep = json.loads((tmp_path / "drift.json").read_text())
    for row, m in zip(rows, rep["metrics"]):
        assert float(row.split(",")[2]) == m["value"]


def test_all_aggregates(tmp_path, capsys):
    p = write(tmp_path, SMALL)
    code = main(["all", "--config", str(p), "--out", str(tmp_path), "--quiet"])
    out = capsys.readouterr().out.strip().splitlines()
    verdicts = dict(line.split("\t") for line in out if "\t" in line and not line.startswith("validate"))
    assert set(verdicts) == set(cli.ex.EXPERIMENTS)
    if "Fail" in verdicts.values():
        assert code == cli.EXIT_FAIL
    elif "Inconclusive" in verdicts.values():
        assert code == cli.EXIT_INCONCLUSIVE
    else:
        assert code == 0


def test_threads_flag_and_env(tmp_path, monkeypatch):
    from thermo_billiards import parallel

    p = write(tmp_path, SMALL)
    assert main(["drift", "--config", str(p), "--out", str(tmp_path / "t1"), "--threads", "2", "--quiet"]) == main(
        ["drift", "--config", str(p), "--out", str(tmp_path / "t2"), "--threads", "1", "--quiet"])
    assert (tmp_path / "t1" / "drift.csv").read_bytes() == (tmp_path / "t2" / "drift.csv").read_bytes()
    assert main(["drift", "--config", str(p), "--threads", "0"]) == cli.EXIT_CONFIG
    parallel.set_threads(None)
    monkeypatch.setenv(parallel.ENV_THREADS, "3")
    assert parallel.get_threads() == 3


def test_console_entry_point(tmp_path):
    p = write(tmp_path, SMALL)
    r = subprocess.run([sys.executable, "-m", "thermo_billiards", "validate", "--config", str(p),
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0
    assert r.stdout.strip() == "validate\tok"
    assert "escaping rays" in r.stderr
