import json

import numpy as np
import pandas as pd
import pytest

from scatrel import __version__
from scatrel.api.export import config_sha256, read_csv, write_csv, write_json
from scatrel.api.models import RunConfig, direction_vector, load_config, parse_config
from scatrel.cli import EXIT_INPUT, EXIT_NUMERICAL, exit_status, main
from scatrel.core.errors import ConfigError, DomainError, IntegrationError

FREE_CONFIG = {
    "potential": {"kind": "zero"},
    "lambda": 0.5,
    "trajectory": {"omega": 0.0, "z": 0.5},
}


def _write_config(tmp_path, payload: dict, name: str = "run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


def test_defaults_round_trip():
    cfg = RunConfig()
    again = parse_config(json.dumps(cfg.model_dump(mode="json", by_alias=True)))
    assert again == cfg
    assert again.lam == 0.5
    assert config_sha256(again) == config_sha256(cfg)


def test_hash_ignores_output_location():
    a = parse_config('{"out": "first"}')
    b = parse_config('{"out": "second", "threads": 4}')
    c = parse_config('{"lambda": 0.7}')
    assert config_sha256(a) == config_sha256(b)
    assert config_sha256(a) != config_sha256(c)


def test_error_points_at_line_and_field():
    text = '{\n  "dimension": 2,\n  "lambda": -1.0\n}'
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == 3
    assert info.value.field == "lambda"


def test_nested_field_error():
    text = '{\n  "potential": {\n    "kind": "gaussian",\n    "rho": 0.5\n  }\n}'
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == "potential.rho"
    assert info.value.line == 4


@pytest.mark.parametrize(
    "text",
    [
        '{"h_values": [0.1, 0.2]}',
        '{"h_values": [0.2, -0.1]}',
        '{"dimension": 4}',
        '{"threads": 0}',
        '{"potential": {"kind": "coulomb"}}',
        '{"surprise": 1}',
        '{"patch": {"z_range": [2.0, 1.0]}}',
    ],
)
def test_invalid_documents_are_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_malformed_json_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_config('{\n  "lambda": 0.5,\n}')
    assert info.value.line is not None


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


def test_direction_vector():
    assert np.allclose(direction_vector(0.0, 2), [1.0, 0.0])
    assert np.allclose(direction_vector([0.0, 0.0, 2.0], 3), [0.0, 0.0, 1.0])
    with pytest.raises(DomainError):
        direction_vector(0.3, 3)
    with pytest.raises(DomainError):
        direction_vector([0.0, 0.0], 2)


def test_direction_must_fit_dimension():
    text = '{\n  "dimension": 3,\n  "trajectory": {"omega": 0.2, "z": [0.5, 0.0]}\n}'
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == "trajectory.omega"
    assert info.value.line == 3

    vectors = {"trajectory": {"omega": [1.0, 0.0, 0.0]}, "solve": {"omega": [1.0, 0.0, 0.0], "theta": [0.0, 1.0, 0.0]}}
    assert parse_config(json.dumps({"dimension": 3, **vectors})).dimension == 3


def test_dimension_mismatch_exits_with_input_error(tmp_path):
    config = _write_config(tmp_path, {"dimension": 3, "potential": {"kind": "zero"}})
    assert main(["trajectory", "--config", str(config), "--out", str(tmp_path / "out")]) == EXIT_INPUT


def test_writers_are_reproducible(tmp_path):
    frame = pd.DataFrame({"a": [0.1, 1.0 / 3.0], "b": [1, 2]})
    first = write_csv(frame, tmp_path / "one" / "x.csv", "abc")
    second = write_csv(frame, tmp_path / "two" / "x.csv", "abc")
    assert first.read_bytes() == second.read_bytes()
    header = first.read_text().splitlines()[:2]
    assert header == [f"# scatrel {__version__}", "# config-sha256 abc"]
    back = read_csv(first)
    assert back["a"].tolist() == frame["a"].tolist()

    path = write_json({"z": 1j, "nan": float("nan"), "arr": np.arange(3)}, tmp_path / "r.json", "abc", "demo")
    body = json.loads(path.read_text())
    assert body["z"] == {"re": 0.0, "im": 1.0}
    assert body["nan"] is None
    assert body["arr"] == [0, 1, 2]
    assert body["meta"] == {"version": __version__, "config_sha256": "abc", "schema": "demo/v1"}


def test_exit_status_mapping():
    assert exit_status(DomainError("bad input")) == EXIT_INPUT
    assert exit_status(ConfigError("bad config")) == EXIT_INPUT
    assert exit_status(IntegrationError("step size collapsed", 1.0)) == EXIT_NUMERICAL


def test_unexpected_errors_propagate(tmp_path, monkeypatch):
    from scatrel import cli

    def boom(cfg, ctx):
        raise RuntimeError("boom")

    monkeypatch.setitem(cli.COMMANDS, "trajectory", boom)
    config = _write_config(tmp_path, FREE_CONFIG)
    with pytest.raises(RuntimeError):
        main(["trajectory", "--config", str(config), "--out", str(tmp_path / "out")])


def test_trajectory_subcommand_free_flight(tmp_path):
    config = _write_config(tmp_path, FREE_CONFIG)
    out = tmp_path / "out"
    assert main(["trajectory", "--config", str(config), "--out", str(out)]) == 0
    table = read_csv(out / "trajectory.csv")
    assert list(table.columns[:5]) == ["t", "q1", "q2", "p1", "p2"]
    assert np.allclose(table["q2"], 0.5, atol=1e-9)
    assert np.allclose(table["p1"], 1.0, atol=1e-9)
    summary = json.loads((out / "trajectory.json").read_text())
    assert summary["classification"] == "non_trapped"

    again = tmp_path / "again"
    assert main(["trajectory", "--config", str(config), "--out", str(again)]) == 0
    assert (out / "trajectory.csv").read_bytes() == (again / "trajectory.csv").read_bytes()


def test_solve_on_diagonal_exits_with_input_error(tmp_path):
    payload = {**FREE_CONFIG, "potential": {"kind": "gaussian"}, "solve": {"omega": 0.4, "theta": 0.4}}
    config = _write_config(tmp_path, payload)
    assert main(["solve", "--config", str(config), "--out", str(tmp_path / "out")]) == EXIT_INPUT


def test_bad_config_exits_with_input_error(tmp_path):
    config = _write_config(tmp_path, {"lambda": -2.0})
    assert main(["trajectory", "--config", str(config), "--out", str(tmp_path / "out")]) == EXIT_INPUT


def test_trajectory_summary_reports_principal_type(tmp_path):
    config = _write_config(tmp_path, {**FREE_CONFIG, "potential": {"kind": "gaussian"}})
    out = tmp_path / "out"
    assert main(["trajectory", "--config", str(config), "--out", str(out)]) == 0
    summary = json.loads((out / "trajectory.json").read_text())
    assert summary["principal_type_violations"] == 0


def test_trajectory_horizon_is_honored(tmp_path):
    payload = {**FREE_CONFIG, "trajectory": {**FREE_CONFIG["trajectory"], "t_max": 1.0}}
    config = _write_config(tmp_path, payload)
    assert main(["trajectory", "--config", str(config), "--out", str(tmp_path / "out")]) == EXIT_NUMERICAL
    with pytest.raises(ConfigError):
        parse_config('{"trajectory": {"t_max": -1.0}}')
