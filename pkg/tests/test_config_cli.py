import csv
import io
import json

import pytest

from bpre_lab import cli, runner
from bpre_lab.config import ConfigError, from_mapping, load_config, parse_config


def test_parse_json_and_toml_agree():
    j = parse_config('{"experiment": "survival", "law": "moderate", "n": 8, "N": 100, "seed": 3}')
    t = parse_config('experiment = "survival"\nlaw = "moderate"\nn = 8\nN = 100\nseed = 3\n', "toml")
    assert j == t


def test_json_syntax_error_has_position():
    with pytest.raises(ConfigError, match=r":2:\d+:"):
        parse_config('{"experiment": "survival",\n "law": }')


@pytest.mark.parametrize("bad", [
    {"experiment": "nope", "law": "moderate"},
    {"experiment": "survival"},
    {"experiment": "survival", "law": "moderate", "N": 0},
    {"experiment": "survival", "law": "moderate", "extra": 1},
    {"experiment": "bottleneck", "law": "moderate", "t_list": [1.5]},
])
def test_schema_rejects(bad):
    with pytest.raises(ConfigError):
        from_mapping(bad)


def test_unknown_named_law():
    cfg = from_mapping({"experiment": "calibrate", "law": "nonsense"})
    with pytest.raises(ConfigError):
        cfg.environment_law()


def test_explicit_law_spec():
    cfg = from_mapping({"experiment": "calibrate",
                        "law": {"atoms": [{"kind": "geometric", "p": 0.5}, {"kind": "poisson", "lambda": 0.5}],
                                "weights": [0.5, 0.5]}})
    assert cfg.environment_law().weights == (0.5, 0.5)


def test_load_config_by_suffix(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('experiment = "walk-check"\nlaw = "moderate"\n')
    assert load_config(p).experiment == "walk-check"


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_csv_contract(capsys):
    rc = cli.main(["survival", "-N", "3000", "-n", "6", "--seed", "1"])
    rows = _rows(capsys.readouterr().out)
    assert rc == 0
    assert list(rows[0]) == list(runner.CSV_COLUMNS)
    for r in rows:
        params = json.loads(r["params"])
        assert r["params"] == json.dumps(params, sort_keys=True, separators=(",", ":"))
        assert r["experiment"] == "survival" and r["seed"] == "1"
        if params["quantity"] == "gate":
            assert params["status"] in ("PASS", "FAIL", "SKIP")


def test_json_output(tmp_path):
    rc = cli.main(["calibrate", "--law", "asymptotic", "--out", str(tmp_path), "--format", "json"])
    doc = json.loads((tmp_path / "calibrate.json").read_text())
    assert rc == 0 and doc["columns"] == list(runner.CSV_COLUMNS)
    q = {json.loads(r["params"])["quantity"]: r["value"] for r in doc["rows"]}
    assert abs(q["E[X e^X]"]) < 1e-12


def test_cli_bytes_identical_across_shards(tmp_path):
    outs = []
    for shards in (1, 8, 1):
        d = tmp_path / f"s{shards}_{len(outs)}"
        cli.main(["cond-dist", "-N", "40000", "--seed", "5", "--shards", str(shards), "--out", str(d)])
        outs.append((d / "cond-dist.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"experiment": "survival", "law": ')
    assert cli.main(["survival", "--config", str(bad)]) == 2
    assert "bad.json:1:" in capsys.readouterr().err
    ok = tmp_path / "ok.json"
    ok.write_text('{"experiment": "theta", "law": "moderate"}')
    assert cli.main(["survival", "--config", str(ok)]) == 2
    assert cli.main(["survival", "--shards", "0"]) == 2
    with pytest.raises(SystemExit):
        cli.main(["bogus"])


def test_failed_gate_sets_exit_code():
    # the geometric equality sub-check is known to fail
    cfg = from_mapping({"experiment": "bpre-check", "law": "moderate"})
    assert runner.run_config(cfg, None) == 1


def test_shipped_schema_file_is_current():
    from pathlib import Path

    from bpre_lab.config import SCHEMA

    path = Path(__file__).resolve().parents[1] / "config.schema.json"
    assert json.loads(path.read_text()) == SCHEMA


def test_shipped_configs_validate():
    from pathlib import Path

    for p in sorted((Path(__file__).resolve().parents[1] / "scripts" / "configs").iterdir()):
        cfg = load_config(p)
        cfg.environment_law()
